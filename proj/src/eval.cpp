#include "fspool/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fspool/adam.hpp"
#include "fspool/error.hpp"
#include "fspool/train.hpp"

namespace fspool {

const char* to_string(Method method) {
    switch (method) {
        case Method::Proto: return "proto";
        case Method::DoS: return "dos";
        case Method::DoA: return "doa";
        case Method::SimpleAvg: return "simple-avg";
        case Method::FineTune: return "fine-tune";
    }
    return "?";
}

Method method_from(const std::string& name) {
    if (name == "proto") return Method::Proto;
    if (name == "dos") return Method::DoS;
    if (name == "doa") return Method::DoA;
    if (name == "simple-avg") return Method::SimpleAvg;
    if (name == "fine-tune") return Method::FineTune;
    throw ConfigError("unknown method '" + name +
                      "' (expected proto, dos, doa, simple-avg or fine-tune)");
}

Embedder pool_embedder(const ModelPool& pool, size_t model_index) {
    if (model_index >= pool.model_count()) {
        throw IndexError("pool_embedder: model index " + std::to_string(model_index) +
                         " out of range");
    }
    return [&pool, model_index](const Tensor& x) { return embed(x, pool, model_index); };
}

Embedder member_embedder(const BackboneSpec& spec, const BaseParams& theta) {
    return [&spec, &theta](const Tensor& x) {
        ModelPool net;
        net.spec = spec;
        net.theta = theta;
        return embed(x, net, 0);
    };
}

Tensor classify_probs(const EpisodeData& task, const Embedder& embed_fn) {
    NoGradGuard ng;
    Tensor protos = class_means(embed_fn(support_matrix(task)), support_labels(task), task.way);
    Tensor dists = pairwise_sq_dist(embed_fn(query_matrix(task)), protos);
    Tensor logp = log_softmax(scale(dists, -1.0f));
    std::vector<float> probs(logp.size());
    for (size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(logp.data()[i]);
    return Tensor::from(logp.shape(), std::move(probs));
}

namespace {

std::vector<size_t> row_argmax(const Tensor& probs) {
    const size_t rows = probs.shape()[0], cols = probs.shape()[1];
    std::vector<size_t> preds(rows);
    for (size_t i = 0; i < rows; ++i) {
        preds[i] = argmax_row({probs.data() + i * cols, cols});
    }
    return preds;
}

Tensor average_probs(const std::vector<Tensor>& member_probs) {
    const size_t rows = member_probs[0].shape()[0], cols = member_probs[0].shape()[1];
    std::vector<float> avg(rows * cols);
    for (size_t i = 0; i < avg.size(); ++i) {
        double acc = 0.0;
        for (const Tensor& p : member_probs) acc += double(p.data()[i]);
        avg[i] = float(acc / double(member_probs.size()));
    }
    return Tensor::from({rows, cols}, std::move(avg));
}

double max_row_sum_deviation(const Tensor& probs) {
    const size_t rows = probs.shape()[0], cols = probs.shape()[1];
    double worst = 0.0;
    for (size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < cols; ++j) s += double(probs.data()[i * cols + j]);
        worst = std::max(worst, std::abs(s - 1.0));
    }
    return worst;
}

}  // namespace

DosPrediction predict_dos(const EpisodeData& task, const ModelPool& pool,
                          const SelectionNetwork& phi) {
    if (phi.output_arity() != pool.model_count()) {
        throw ConfigError("predict_dos: selector arity " + std::to_string(phi.output_arity()) +
                          " vs pool of " + std::to_string(pool.model_count()) + " models");
    }
    NoGradGuard ng;
    Tensor logits = select_logits(task_representation(task, pool), phi);
    DosPrediction out;
    out.chosen_model = argmax_row(logits.values());
    out.predictions = row_argmax(classify_probs(task, pool_embedder(pool, out.chosen_model)));
    return out;
}

std::vector<size_t> predict_doa(const EpisodeData& task, const ModelPool& pool) {
    std::vector<Tensor> member_probs;
    member_probs.reserve(pool.model_count());
    for (size_t i = 0; i < pool.model_count(); ++i) {
        member_probs.push_back(classify_probs(task, pool_embedder(pool, i)));
    }
    return row_argmax(average_probs(member_probs));
}

std::vector<size_t> predict_simple_avg(const EpisodeData& task, const IndependentPool& ipool) {
    if (ipool.members.empty()) throw ConfigError("predict_simple_avg: empty independent pool");
    std::vector<Tensor> member_probs;
    member_probs.reserve(ipool.members.size());
    for (const BaseParams& theta : ipool.members) {
        member_probs.push_back(classify_probs(task, member_embedder(ipool.spec, theta)));
    }
    return row_argmax(average_probs(member_probs));
}

FineTuneResult fine_tune_linear(const EpisodeData& task, const Embedder& embed_fn,
                                size_t iterations, float lr) {
    Tensor emb_s, emb_q;
    {
        NoGradGuard ng;
        emb_s = embed_fn(support_matrix(task));
        emb_q = embed_fn(query_matrix(task));
    }
    FineTuneHead head = init_head(emb_s.shape()[1], task.way);
    std::vector<Tensor> params = head.params();
    AdamState opt = AdamState::for_params(params, lr);
    const std::vector<size_t> labels = support_labels(task);
    for (size_t it = 0; it < iterations; ++it) {
        Tensor logits = add_rowvec(matmul(emb_s, head.weight), head.bias);
        Tensor loss = nll_mean(log_softmax(logits), labels);
        zero_grads(params);
        backward(loss);
        adam_step(params, opt);
    }
    NoGradGuard ng;
    Tensor logits = add_rowvec(matmul(emb_q, head.weight), head.bias);
    Tensor logp = log_softmax(logits);
    std::vector<float> probs(logp.size());
    for (size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(logp.data()[i]);
    FineTuneResult out;
    out.query_probs = Tensor::from(logp.shape(), std::move(probs));
    out.predictions = row_argmax(out.query_probs);
    return out;
}

namespace {

float prediction_accuracy(const std::vector<size_t>& preds, const std::vector<size_t>& labels) {
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i] ? 1 : 0;
    return float(correct) / float(preds.size());
}

std::vector<size_t> member_correct_counts(const std::vector<Tensor>& member_probs,
                                          const std::vector<size_t>& labels) {
    std::vector<size_t> counts;
    counts.reserve(member_probs.size());
    for (const Tensor& p : member_probs) {
        const std::vector<size_t> preds = row_argmax(p);
        size_t c = 0;
        for (size_t i = 0; i < preds.size(); ++i) c += preds[i] == labels[i] ? 1 : 0;
        counts.push_back(c);
    }
    return counts;
}

std::string format_float(double v, const char* fmt = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), fmt, v);
    return buf;
}

}  // namespace

EvalReport evaluate(const EvalSettings& settings, std::span<const DomainDataset> targets,
                    std::span<const ClassSplit> target_splits, const ModelPool* pool,
                    const SelectionNetwork* phi, const IndependentPool* ipool,
                    std::span<const std::string> source_domains) {
    if (targets.empty()) throw ConfigError("evaluate: no target domains");
    if (targets.size() != target_splits.size()) {
        throw ContractError("evaluate: target/split count mismatch");
    }
    if (settings.episodes == 0 || settings.way == 0 || settings.shot == 0 ||
        settings.queries == 0) {
        throw ConfigError("evaluate: episodes, way, shot and queries must be positive");
    }
    if (settings.unseen) {
        for (const DomainDataset& t : targets) {
            if (std::find(source_domains.begin(), source_domains.end(), t.name) !=
                source_domains.end()) {
                throw ProtocolError("unseen-domain protocol violation: target '" + t.name +
                                    "' is among the checkpoint's source domains");
            }
        }
    }
    const bool needs_pool = settings.method != Method::SimpleAvg;
    if (needs_pool && pool == nullptr) throw ConfigError("evaluate: method requires a model pool");
    if (settings.method == Method::DoS && phi == nullptr) {
        throw ConfigError("evaluate: dos requires a selection network");
    }
    if (settings.method == Method::SimpleAvg && ipool == nullptr) {
        throw ConfigError("evaluate: simple-avg requires an independent pool");
    }

    // episode sequence depends only on (targets, settings, seed)
    Rng rng(mix_seed(settings.seed, 0xE7A1));
    std::vector<Episode> episodes;
    episodes.reserve(settings.episodes);
    for (size_t e = 0; e < settings.episodes; ++e) {
        const size_t di = size_t(rng.below(targets.size()));
        episodes.push_back(sample_episode(targets[di], target_splits[di], settings.split,
                                          settings.way, settings.shot, settings.queries, rng));
    }

    EvalReport report;
    report.method = to_string(settings.method);
    for (const DomainDataset& t : targets) report.target_domains.push_back(t.name);

    double max_row_err = 0.0;

    for (size_t e = 0; e < episodes.size(); ++e) {
        const EpisodeData& task = episodes[e].task;
        const std::vector<size_t> labels = query_labels(task);
        EpisodeResult res;
        res.index = e;
        res.domain = episodes[e].domain_name;

        std::vector<size_t> preds;
        size_t base_model = 0;  // embedding used for further adaptation
        switch (settings.method) {
            case Method::Proto: {
                Tensor probs = classify_probs(task, pool_embedder(*pool, 0));
                max_row_err = std::max(max_row_err, max_row_sum_deviation(probs));
                preds = row_argmax(probs);
                break;
            }
            case Method::DoS: {
                DosPrediction dp = predict_dos(task, *pool, *phi);
                Tensor probs = classify_probs(task, pool_embedder(*pool, dp.chosen_model));
                max_row_err = std::max(max_row_err, max_row_sum_deviation(probs));
                preds = std::move(dp.predictions);
                res.chosen_model = int(dp.chosen_model);
                base_model = dp.chosen_model;
                break;
            }
            case Method::DoA: {
                std::vector<Tensor> member_probs;
                for (size_t i = 0; i < pool->model_count(); ++i) {
                    member_probs.push_back(classify_probs(task, pool_embedder(*pool, i)));
                    max_row_err = std::max(max_row_err, max_row_sum_deviation(member_probs.back()));
                }
                Tensor avg = average_probs(member_probs);
                max_row_err = std::max(max_row_err, max_row_sum_deviation(avg));
                preds = row_argmax(avg);
                report.contributions.push_back(member_correct_counts(member_probs, labels));
                break;
            }
            case Method::SimpleAvg: {
                std::vector<Tensor> member_probs;
                for (const BaseParams& theta : ipool->members) {
                    member_probs.push_back(
                        classify_probs(task, member_embedder(ipool->spec, theta)));
                    max_row_err = std::max(max_row_err, max_row_sum_deviation(member_probs.back()));
                }
                Tensor avg = average_probs(member_probs);
                max_row_err = std::max(max_row_err, max_row_sum_deviation(avg));
                preds = row_argmax(avg);
                report.contributions.push_back(member_correct_counts(member_probs, labels));
                break;
            }
            case Method::FineTune: {
                FineTuneResult ft = fine_tune_linear(task, pool_embedder(*pool, 0),
                                                     settings.adapt_iterations, settings.adapt_lr);
                max_row_err = std::max(max_row_err, max_row_sum_deviation(ft.query_probs));
                preds = std::move(ft.predictions);
                break;
            }
        }

        if (settings.further_adapt && settings.method != Method::FineTune) {
            // linear classifier over the method's final embedding; averaging
            // methods refine over their first member's embedding
            const Embedder embed_fn = settings.method == Method::SimpleAvg
                                          ? member_embedder(ipool->spec, ipool->members[0])
                                          : pool_embedder(*pool, base_model);
            FineTuneResult ft =
                fine_tune_linear(task, embed_fn, settings.adapt_iterations, settings.adapt_lr);
            max_row_err = std::max(max_row_err, max_row_sum_deviation(ft.query_probs));
            preds = std::move(ft.predictions);
        }

        res.accuracy = prediction_accuracy(preds, labels);
        report.episodes.push_back(std::move(res));
    }

    double mean = 0.0;
    for (const EpisodeResult& r : report.episodes) mean += double(r.accuracy);
    mean /= double(report.episodes.size());
    double var = 0.0;
    for (const EpisodeResult& r : report.episodes) {
        var += (double(r.accuracy) - mean) * (double(r.accuracy) - mean);
    }
    const double stddev =
        report.episodes.size() > 1 ? std::sqrt(var / double(report.episodes.size() - 1)) : 0.0;
    report.mean = float(mean);
    report.ci95 = float(1.96 * stddev / std::sqrt(double(report.episodes.size())));

    report.settings["method"] = report.method;
    report.settings["split"] = to_string(settings.split);
    report.settings["episodes"] = std::to_string(settings.episodes);
    report.settings["way"] = std::to_string(settings.way);
    report.settings["shot"] = std::to_string(settings.shot);
    report.settings["query"] = std::to_string(settings.queries);
    report.settings["seed"] = std::to_string(settings.seed);
    report.settings["further_adapt"] = settings.further_adapt ? "1" : "0";
    report.settings["protocol"] = settings.unseen ? "unseen" : "seen";
    report.settings["mean"] = format_float(report.mean);
    report.settings["ci95"] = format_float(report.ci95);
    report.settings["max_row_sum_err"] = format_float(max_row_err, "%.3e");
    return report;
}

std::vector<std::vector<size_t>> contribution_report(const ModelPool& pool,
                                                     std::span<const EpisodeData> episodes) {
    std::vector<std::vector<size_t>> rows;
    rows.reserve(episodes.size());
    for (const EpisodeData& task : episodes) {
        const std::vector<size_t> labels = query_labels(task);
        std::vector<Tensor> member_probs;
        for (size_t i = 0; i < pool.model_count(); ++i) {
            member_probs.push_back(classify_probs(task, pool_embedder(pool, i)));
        }
        rows.push_back(member_correct_counts(member_probs, labels));
    }
    return rows;
}

void write_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    for (const auto& [k, v] : report.settings) out << k << "=" << v << "\n";
    out << "episode_index,domain,accuracy,chosen_model\n";
    for (const EpisodeResult& r : report.episodes) {
        out << r.index << "," << r.domain << "," << format_float(double(r.accuracy)) << ","
            << r.chosen_model << "\n";
    }
    out << "episode_index,model_index,correct_count\n";
    for (size_t e = 0; e < report.contributions.size(); ++e) {
        for (size_t m = 0; m < report.contributions[e].size(); ++m) {
            out << e << "," << m << "," << report.contributions[e][m] << "\n";
        }
    }
    if (!out) throw FormatError("write failed for '" + path + "'");
}

}  // namespace fspool
