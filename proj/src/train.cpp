#include "fspool/train.hpp"

#include <cmath>
#include <ostream>

#include "fspool/adam.hpp"
#include "fspool/error.hpp"

namespace fspool {

namespace {

// rng stream roles, mixed with the config seed
constexpr uint64_t kRoleBaseInit = 0x10;
constexpr uint64_t kRoleBaseBatch = 0x11;
constexpr uint64_t kRoleModEpisodes = 0x20;
constexpr uint64_t kRoleSelInit = 0x30;
constexpr uint64_t kRoleSelEpisodes = 0x31;
constexpr uint64_t kRoleValEpisodes = 0x40;
constexpr uint64_t kRoleMemberInit = 0x50;
constexpr uint64_t kRoleMemberEpisodes = 0x51;

std::vector<std::vector<float>> snapshot(std::span<const Tensor> params) {
    std::vector<std::vector<float>> out;
    out.reserve(params.size());
    for (const Tensor& p : params) out.emplace_back(p.values().begin(), p.values().end());
    return out;
}

void restore(std::span<Tensor> params, const std::vector<std::vector<float>>& values) {
    for (size_t i = 0; i < params.size(); ++i) {
        std::copy(values[i].begin(), values[i].end(), params[i].data());
    }
}

// Early-stopping bookkeeping shared by all stages: keeps the best parameter
// snapshot, counts evaluations without improvement.
struct EarlyStop {
    size_t patience;
    double best_metric = -1.0;
    size_t stale = 0;
    std::vector<std::vector<float>> best_values;

    explicit EarlyStop(size_t patience_) : patience(patience_) {}

    // returns true when training should stop
    bool observe(double metric, std::span<const Tensor> params) {
        if (metric > best_metric) {
            best_metric = metric;
            best_values = snapshot(params);
            stale = 0;
            return false;
        }
        stale += 1;
        return stale >= patience;
    }

    void finish(std::span<Tensor> params) {
        if (!best_values.empty()) restore(params, best_values);
    }
};

void check_finite_loss(float loss, const char* stage, size_t step) {
    if (!std::isfinite(loss)) {
        throw DivergenceError(std::string(stage) + ": non-finite loss at step " +
                              std::to_string(step));
    }
}

Tensor xavier_head(size_t fan_in, size_t fan_out, Rng& rng) {
    const float limit = std::sqrt(6.0f / float(fan_in + fan_out));
    std::vector<float> data(fan_in * fan_out);
    for (float& x : data) x = rng.uniform_f32(-limit, limit);
    return Tensor::from({fan_in, fan_out}, std::move(data), /*requires_grad=*/true);
}

}  // namespace

void TrainConfig::validate() const {
    if (lr <= 0.0f) throw ConfigError("lr must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    if (patience == 0) throw ConfigError("patience must be positive");
    if (val_episodes == 0) throw ConfigError("val_episodes must be positive");
    if (way == 0 || shot == 0 || queries == 0) {
        throw ConfigError("way, shot and queries must be positive");
    }
}

Tensor support_matrix(const EpisodeData& task) {
    const size_t n = task.support.size();
    const size_t d = task.support[0].x.size();
    std::vector<float> data(n * d);
    for (size_t i = 0; i < n; ++i) {
        std::copy(task.support[i].x.begin(), task.support[i].x.end(), data.begin() + ptrdiff_t(i * d));
    }
    return Tensor::from({n, d}, std::move(data));
}

Tensor query_matrix(const EpisodeData& task) {
    const size_t n = task.query.size();
    const size_t d = task.query[0].x.size();
    std::vector<float> data(n * d);
    for (size_t i = 0; i < n; ++i) {
        std::copy(task.query[i].x.begin(), task.query[i].x.end(), data.begin() + ptrdiff_t(i * d));
    }
    return Tensor::from({n, d}, std::move(data));
}

std::vector<size_t> support_labels(const EpisodeData& task) {
    std::vector<size_t> out;
    out.reserve(task.support.size());
    for (const Example& e : task.support) out.push_back(e.label);
    return out;
}

std::vector<size_t> query_labels(const EpisodeData& task) {
    std::vector<size_t> out;
    out.reserve(task.query.size());
    for (const Example& e : task.query) out.push_back(e.label);
    return out;
}

size_t argmax_row(std::span<const float> row) {
    size_t best = 0;
    for (size_t j = 1; j < row.size(); ++j) {
        if (row[j] > row[best]) best = j;
    }
    return best;
}

std::vector<size_t> nearest_prototype_predictions(const EpisodeData& task, const ModelPool& pool,
                                                  size_t model_index) {
    NoGradGuard ng;
    Tensor protos = class_means(embed(support_matrix(task), pool, model_index),
                                support_labels(task), task.way);
    Tensor dists = pairwise_sq_dist(embed(query_matrix(task), pool, model_index), protos);
    std::vector<size_t> preds(task.query.size());
    for (size_t i = 0; i < preds.size(); ++i) {
        std::span<const float> row(dists.data() + i * task.way, task.way);
        // nearest prototype == argmax of negated distances, ties to lowest index
        size_t best = 0;
        for (size_t j = 1; j < task.way; ++j) {
            if (row[j] < row[best]) best = j;
        }
        preds[i] = best;
    }
    return preds;
}

float episode_accuracy(const EpisodeData& task, const ModelPool& pool, size_t model_index) {
    const std::vector<size_t> preds = nearest_prototype_predictions(task, pool, model_index);
    const std::vector<size_t> labels = query_labels(task);
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i] ? 1 : 0;
    return float(correct) / float(preds.size());
}

// --- Step 1 -------------------------------------------------------------------

BaseParams train_base(const AggregateDataset& agg, const BackboneSpec& spec,
                      const TrainConfig& cfg, std::ostream* log) {
    cfg.validate();
    spec.validate();
    if (agg.examples.empty()) throw ContractError("train_base: empty aggregate dataset");
    if (agg.feature_dim != spec.input_dim) {
        throw DimensionError("train_base: aggregate feature_dim " +
                             std::to_string(agg.feature_dim) + " vs backbone input " +
                             std::to_string(spec.input_dim));
    }

    Rng init_rng(mix_seed(cfg.seed, kRoleBaseInit));
    ModelPool net;
    net.spec = spec;
    net.theta = init_base(spec, init_rng);

    // temporary linear head over the global classes, discarded at the end
    Tensor head_w = xavier_head(spec.embedding_dim(), agg.class_count, init_rng);
    Tensor head_b = Tensor::zeros({agg.class_count}, /*requires_grad=*/true);

    // deterministic holdout for the early-stopping metric: the last ~10% of
    // each class's examples (classes with a single example stay in training)
    std::vector<size_t> train_idx, val_idx;
    {
        std::vector<std::vector<size_t>> by_class(agg.class_count);
        for (size_t i = 0; i < agg.examples.size(); ++i) {
            by_class[agg.examples[i].class_id].push_back(i);
        }
        for (const auto& members : by_class) {
            const size_t held = members.size() >= 2 ? std::max<size_t>(1, members.size() / 10) : 0;
            for (size_t i = 0; i + held < members.size(); ++i) train_idx.push_back(members[i]);
            for (size_t i = members.size() - held; i < members.size(); ++i) {
                val_idx.push_back(members[i]);
            }
        }
    }

    std::vector<Tensor> trainable = net.theta.all();
    trainable.push_back(head_w);
    trainable.push_back(head_b);
    AdamState opt = AdamState::for_params(trainable, cfg.lr);
    EarlyStop stopper(cfg.patience);

    auto batch_logits = [&](std::span<const size_t> idx) {
        std::vector<float> data(idx.size() * agg.feature_dim);
        for (size_t i = 0; i < idx.size(); ++i) {
            const auto& x = agg.examples[idx[i]].x;
            std::copy(x.begin(), x.end(), data.begin() + ptrdiff_t(i * agg.feature_dim));
        }
        Tensor batch = Tensor::from({idx.size(), agg.feature_dim}, std::move(data));
        return add_rowvec(matmul(embed(batch, net, 0), head_w), head_b);
    };

    auto holdout_accuracy = [&]() {
        if (val_idx.empty()) return 0.0;
        NoGradGuard ng;
        Tensor logits = batch_logits(val_idx);
        size_t correct = 0;
        for (size_t i = 0; i < val_idx.size(); ++i) {
            const size_t pred =
                argmax_row({logits.data() + i * agg.class_count, agg.class_count});
            correct += pred == agg.examples[val_idx[i]].class_id ? 1 : 0;
        }
        return double(correct) / double(val_idx.size());
    };

    Rng batch_rng(mix_seed(cfg.seed, kRoleBaseBatch));
    std::vector<Tensor> theta_params = net.theta.all();
    for (size_t step = 1; step <= cfg.episodes_per_stage; ++step) {
        std::vector<size_t> idx(std::min(cfg.batch_size, train_idx.size()));
        std::vector<size_t> labels(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            idx[i] = train_idx[batch_rng.below(train_idx.size())];
            labels[i] = agg.examples[idx[i]].class_id;
        }
        Tensor loss = nll_mean(log_softmax(batch_logits(idx)), labels);
        check_finite_loss(loss.item(), "train_base", step);
        zero_grads(trainable);
        backward(loss);
        adam_step(trainable, opt);

        if (step % cfg.eval_every == 0) {
            const double metric = holdout_accuracy();
            if (log) {
                *log << "stage=base step=" << step << " loss=" << loss.item()
                     << " val=" << metric << "\n";
            }
            if (stopper.observe(metric, theta_params)) break;
        }
    }
    stopper.finish(theta_params);
    return net.theta;
}

// --- Step 2 -------------------------------------------------------------------

Tensor prototypical_loss(const EpisodeData& task, const ModelPool& pool, size_t model_index) {
    Tensor protos = class_means(embed(support_matrix(task), pool, model_index),
                                support_labels(task), task.way);
    Tensor dists = pairwise_sq_dist(embed(query_matrix(task), pool, model_index), protos);
    return nll_mean(log_softmax(scale(dists, -1.0f)), query_labels(task));
}

void train_modulator(const DomainDataset& domain, const ClassSplit& split, ModelPool& pool,
                     size_t slot, const TrainConfig& cfg, std::ostream* log) {
    cfg.validate();
    if (slot == 0 || slot >= pool.model_count()) {
        throw IndexError("train_modulator: slot " + std::to_string(slot) +
                         " out of range for pool of " + std::to_string(pool.model_count()) +
                         " models");
    }
    std::vector<Tensor> params = pool.modulators[slot - 1].params();
    AdamState opt = AdamState::for_params(params, cfg.lr);
    EarlyStop stopper(cfg.patience);

    auto val_accuracy = [&]() {
        Rng val_rng(mix_seed(cfg.seed, kRoleValEpisodes + slot));
        double acc = 0.0;
        for (size_t e = 0; e < cfg.val_episodes; ++e) {
            Episode ep = sample_episode(domain, split, SplitPart::Val, cfg.way, cfg.shot,
                                        cfg.queries, val_rng);
            acc += double(episode_accuracy(ep.task, pool, slot));
        }
        return acc / double(cfg.val_episodes);
    };

    Rng rng(mix_seed(cfg.seed, kRoleModEpisodes + slot));
    for (size_t step = 1; step <= cfg.episodes_per_stage; ++step) {
        Episode ep =
            sample_episode(domain, split, SplitPart::Train, cfg.way, cfg.shot, cfg.queries, rng);
        Tensor loss = prototypical_loss(ep.task, pool, slot);
        check_finite_loss(loss.item(), "train_modulator", step);
        zero_grads(params);
        backward(loss);
        adam_step(params, opt);

        if (step % cfg.eval_every == 0) {
            const double metric = val_accuracy();
            if (log) {
                *log << "stage=modulators domain=" << domain.name << " step=" << step
                     << " loss=" << loss.item() << " val=" << metric << "\n";
            }
            if (stopper.observe(metric, params)) break;
        }
    }
    stopper.finish(params);
}

// --- Step 3 -------------------------------------------------------------------

Tensor task_representation(const EpisodeData& task, const ModelPool& pool) {
    NoGradGuard ng;
    return mean_rows(embed(support_matrix(task), pool, 0));
}

SelectionLabel best_model_label(const EpisodeData& task, const ModelPool& pool) {
    SelectionLabel label;
    label.accuracies.reserve(pool.model_count());
    for (size_t i = 0; i < pool.model_count(); ++i) {
        label.accuracies.push_back(episode_accuracy(task, pool, i));
    }
    label.best_index = argmax_row(label.accuracies);
    return label;
}

SelectionNetwork train_selector(std::span<const DomainDataset> domains,
                                std::span<const ClassSplit> splits, const ModelPool& pool,
                                const TrainConfig& cfg, size_t selector_hidden,
                                std::ostream* log) {
    cfg.validate();
    if (domains.size() != splits.size()) {
        throw ContractError("train_selector: domain/split count mismatch");
    }
    Rng init_rng(mix_seed(cfg.seed, kRoleSelInit));
    SelectionNetwork phi = init_selector(pool.spec.embedding_dim(), selector_hidden,
                                         pool.modulators.size(), init_rng);
    std::vector<Tensor> params = phi.params();
    AdamState opt = AdamState::for_params(params, cfg.lr);
    EarlyStop stopper(cfg.patience);

    auto val_agreement = [&]() {
        Rng val_rng(mix_seed(cfg.seed, kRoleValEpisodes));
        size_t hits = 0;
        for (size_t e = 0; e < cfg.val_episodes; ++e) {
            const size_t di = size_t(val_rng.below(domains.size()));
            Episode ep = sample_episode(domains[di], splits[di], SplitPart::Val, cfg.way,
                                        cfg.shot, cfg.queries, val_rng);
            NoGradGuard ng;
            Tensor logits = select_logits(task_representation(ep.task, pool), phi);
            const size_t picked = argmax_row(logits.values());
            hits += picked == best_model_label(ep.task, pool).best_index ? 1 : 0;
        }
        return double(hits) / double(cfg.val_episodes);
    };

    Rng rng(mix_seed(cfg.seed, kRoleSelEpisodes));
    for (size_t step = 1; step <= cfg.episodes_per_stage; ++step) {
        const size_t di = size_t(rng.below(domains.size()));
        Episode ep = sample_episode(domains[di], splits[di], SplitPart::Train, cfg.way, cfg.shot,
                                    cfg.queries, rng);
        const SelectionLabel label = best_model_label(ep.task, pool);
        Tensor logits = select_logits(task_representation(ep.task, pool), phi);
        Tensor loss = cross_entropy(logits, label.best_index);
        check_finite_loss(loss.item(), "train_selector", step);
        zero_grads(params);
        backward(loss);
        adam_step(params, opt);

        if (step % cfg.eval_every == 0) {
            const double metric = val_agreement();
            if (log) {
                *log << "stage=selector step=" << step << " loss=" << loss.item()
                     << " val=" << metric << "\n";
            }
            if (stopper.observe(metric, params)) break;
        }
    }
    stopper.finish(params);
    return phi;
}

// --- Simple-Avg members ---------------------------------------------------------

BaseParams train_protonet_member(const DomainDataset& domain, const ClassSplit& split,
                                 const BackboneSpec& spec, const TrainConfig& cfg,
                                 size_t member_index, std::ostream* log) {
    cfg.validate();
    spec.validate();
    Rng init_rng(mix_seed(cfg.seed, kRoleMemberInit + member_index));
    ModelPool net;
    net.spec = spec;
    net.theta = init_base(spec, init_rng);
    std::vector<Tensor> params = net.theta.all();
    AdamState opt = AdamState::for_params(params, cfg.lr);
    EarlyStop stopper(cfg.patience);

    auto val_accuracy = [&]() {
        Rng val_rng(mix_seed(cfg.seed, kRoleValEpisodes + 100 + member_index));
        double acc = 0.0;
        for (size_t e = 0; e < cfg.val_episodes; ++e) {
            Episode ep = sample_episode(domain, split, SplitPart::Val, cfg.way, cfg.shot,
                                        cfg.queries, val_rng);
            acc += double(episode_accuracy(ep.task, net, 0));
        }
        return acc / double(cfg.val_episodes);
    };

    Rng rng(mix_seed(cfg.seed, kRoleMemberEpisodes + member_index));
    for (size_t step = 1; step <= cfg.episodes_per_stage; ++step) {
        Episode ep =
            sample_episode(domain, split, SplitPart::Train, cfg.way, cfg.shot, cfg.queries, rng);
        Tensor loss = prototypical_loss(ep.task, net, 0);
        check_finite_loss(loss.item(), "train_protonet_member", step);
        zero_grads(params);
        backward(loss);
        adam_step(params, opt);

        if (step % cfg.eval_every == 0) {
            const double metric = val_accuracy();
            if (log) {
                *log << "stage=member domain=" << domain.name << " step=" << step
                     << " loss=" << loss.item() << " val=" << metric << "\n";
            }
            if (stopper.observe(metric, params)) break;
        }
    }
    stopper.finish(params);
    return net.theta;
}

}  // namespace fspool
