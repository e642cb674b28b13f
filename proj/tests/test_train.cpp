#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "fspool/adam.hpp"
#include "fspool/error.hpp"
#include "fspool/train.hpp"
#include "oracle.hpp"

using namespace fspool;

namespace {

// identity embedding: 1-d input, single unit layer with weight 1 and bias 0
ModelPool identity_pool() {
    ModelPool pool;
    pool.spec = BackboneSpec{1, {1}, false};
    LayerParams layer;
    layer.weight = Tensor::from({1, 1}, {1.0f}, true);
    layer.bias = Tensor::zeros({1}, true);
    pool.theta.layers.push_back(std::move(layer));
    return pool;
}

EpisodeData episode_1d(std::vector<float> support, std::vector<float> query,
                       std::vector<size_t> query_labels, size_t way) {
    EpisodeData task;
    task.way = way;
    task.shot = support.size() / way;
    task.queries_per_class = query.size() / way;
    for (size_t i = 0; i < support.size(); ++i) {
        task.support.push_back({{support[i]}, i % way});
    }
    for (size_t i = 0; i < query.size(); ++i) {
        task.query.push_back({{query[i]}, query_labels[i]});
    }
    return task;
}

SyntheticDomainSpec domain_spec(const std::string& name, TransformKind kind, uint64_t seed) {
    SyntheticDomainSpec spec;
    spec.name = name;
    spec.feature_dim = 8;
    spec.class_count = 20;
    spec.examples_per_class = 25;
    spec.cluster_spread = 0.4f;
    spec.seed = seed;
    spec.transform.kind = kind;
    switch (kind) {
        case TransformKind::Rotation: spec.transform.angles = {1.1f, 2.3f, 0.7f, 1.9f}; break;
        case TransformKind::AxisMask: spec.transform.kept_dims = {0, 1, 2}; break;
        case TransformKind::Frequency:
            spec.transform.freq_amp = 1.2f;
            spec.transform.freq_omega = 2.4f;
            spec.transform.freq_phase = 0.5f;
            break;
    }
    return spec;
}

TrainConfig quick_cfg(uint64_t seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.episodes_per_stage = 150;
    cfg.eval_every = 50;
    cfg.patience = 3;
    cfg.val_episodes = 10;
    cfg.way = 3;
    cfg.shot = 3;
    cfg.queries = 5;
    cfg.batch_size = 16;
    return cfg;
}

std::vector<std::vector<float>> snapshot_params(const std::vector<Tensor>& params) {
    std::vector<std::vector<float>> out;
    for (const Tensor& p : params) out.emplace_back(p.values().begin(), p.values().end());
    return out;
}

bool params_equal(const std::vector<Tensor>& params,
                  const std::vector<std::vector<float>>& snap) {
    for (size_t i = 0; i < params.size(); ++i) {
        if (std::memcmp(params[i].data(), snap[i].data(), snap[i].size() * sizeof(float)) != 0) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("prototypical loss closed form for a 2-way 1-shot episode") {
    // support embeddings {0, 2}, one query at 0 labeled 0: distances (0, 4)
    ModelPool pool = identity_pool();
    EpisodeData task = episode_1d({0.0f, 2.0f}, {0.0f}, {0}, 2);
    task.queries_per_class = 1;
    const float loss = prototypical_loss(task, pool, 0).item();
    CHECK(loss == doctest::Approx(0.01814992791780978).epsilon(1e-5));
}

TEST_CASE("equidistant query costs ln(way)") {
    ModelPool pool = identity_pool();
    EpisodeData task = episode_1d({-1.0f, 1.0f}, {0.0f}, {0}, 2);
    const float loss = prototypical_loss(task, pool, 0).item();
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("task representation invariances") {
    Rng rng(3);
    ModelPool pool;
    pool.spec = BackboneSpec{4, {6, 5}, true};
    pool.theta = init_base(pool.spec, rng);

    EpisodeData task;
    task.way = 2;
    task.shot = 3;
    task.queries_per_class = 1;
    for (size_t i = 0; i < 6; ++i) {
        Example e;
        e.label = i % 2;
        for (int j = 0; j < 4; ++j) e.x.push_back(rng.uniform_f32(-1.0f, 1.0f));
        task.support.push_back(e);
    }
    task.query.push_back(task.support[0]);

    Tensor z = task_representation(task, pool);
    CHECK(z.shape() == std::vector<size_t>{5});

    // permutation invariance
    EpisodeData permuted = task;
    std::swap(permuted.support[0], permuted.support[4]);
    std::swap(permuted.support[1], permuted.support[3]);
    Tensor zp = task_representation(permuted, pool);
    CHECK(std::memcmp(z.data(), zp.data(), z.size() * sizeof(float)) == 0);

    // duplication invariance
    EpisodeData doubled = task;
    doubled.support.insert(doubled.support.end(), task.support.begin(), task.support.end());
    doubled.shot = 6;
    Tensor zd = task_representation(doubled, pool);
    CHECK(std::memcmp(z.data(), zd.data(), z.size() * sizeof(float)) == 0);

    // single support example: representation equals that embedding
    EpisodeData solo = task;
    solo.support.resize(1);
    solo.way = 1;
    solo.shot = 1;
    Tensor zs = task_representation(solo, pool);
    Tensor emb = embed(support_matrix(solo), pool, 0);
    CHECK(std::memcmp(zs.data(), emb.data(), zs.size() * sizeof(float)) == 0);
}

TEST_CASE("best_model_label matches the independent oracle") {
    Rng rng(17);
    ModelPool pool;
    pool.spec = BackboneSpec{8, {10, 6}, true};
    pool.theta = init_base(pool.spec, rng);
    pool.kind = ModulatorKind::Adapter;
    for (int i = 0; i < 3; ++i) {
        pool.modulators.push_back(init_modulator(pool.spec, pool.kind));
        pool.domain_names.push_back("d" + std::to_string(i));
        for (Tensor p : pool.modulators.back().params()) {
            for (float& v : p.values()) v = rng.uniform_f32(-0.4f, 0.4f);
        }
    }

    DomainDataset ds = gen_synthetic_domain(domain_spec("probe", TransformKind::Rotation, 7));
    ClassSplit split = split_classes(ds.class_count(), 5);
    Rng ep_rng(23);
    size_t matches = 0;
    const size_t trials = 60;
    for (size_t t = 0; t < trials; ++t) {
        Episode ep = sample_episode(ds, split, SplitPart::Train, 3, 2, 4, ep_rng);
        SelectionLabel label = best_model_label(ep.task, pool);
        std::vector<float> oracle_accs;
        const size_t oracle_best = oracle::best_model(ep.task, pool, &oracle_accs);
        CHECK(label.accuracies.size() == pool.model_count());
        for (size_t m = 0; m < pool.model_count(); ++m) {
            CHECK(label.accuracies[m] == oracle_accs[m]);
        }
        matches += label.best_index == oracle_best ? 1 : 0;
    }
    CHECK(matches == trials);
}

TEST_CASE("identical models tie to the unmodulated index") {
    Rng rng(29);
    ModelPool pool;
    pool.spec = BackboneSpec{8, {6}, false};
    pool.theta = init_base(pool.spec, rng);
    pool.kind = ModulatorKind::ChannelAffine;
    for (int i = 0; i < 2; ++i) {
        pool.modulators.push_back(init_modulator(pool.spec, pool.kind));
        pool.domain_names.push_back("d" + std::to_string(i));
    }
    DomainDataset ds = gen_synthetic_domain(domain_spec("probe", TransformKind::Rotation, 9));
    ClassSplit split = split_classes(ds.class_count(), 5);
    Rng ep_rng(31);
    Episode ep = sample_episode(ds, split, SplitPart::Train, 3, 2, 4, ep_rng);
    SelectionLabel label = best_model_label(ep.task, pool);
    CHECK(label.best_index == 0);
    CHECK(label.accuracies[0] == label.accuracies[1]);
    CHECK(label.accuracies[0] == label.accuracies[2]);
}

TEST_CASE("train_base fits well-separated classes and is deterministic") {
    // two linearly separable clusters
    AggregateDataset agg;
    agg.feature_dim = 4;
    agg.class_count = 2;
    Rng rng(41);
    for (int i = 0; i < 60; ++i) {
        AggregateExample e;
        e.class_id = size_t(i % 2);
        e.domain = "synthetic";
        for (int j = 0; j < 4; ++j) {
            e.x.push_back(rng.uniform_f32(-0.5f, 0.5f) + (e.class_id ? 2.0f : -2.0f));
        }
        agg.examples.push_back(std::move(e));
    }
    BackboneSpec spec{4, {8, 4}, true};
    TrainConfig cfg = quick_cfg(1);
    cfg.episodes_per_stage = 120;

    BaseParams theta = train_base(agg, spec, cfg);
    BaseParams theta_again = train_base(agg, spec, cfg);
    for (size_t l = 0; l < theta.layers.size(); ++l) {
        CHECK(std::memcmp(theta.layers[l].weight.data(), theta_again.layers[l].weight.data(),
                          theta.layers[l].weight.size() * sizeof(float)) == 0);
    }

    // embeddings should separate the two classes for a nearest-prototype rule
    ModelPool net;
    net.spec = spec;
    net.theta = theta;
    EpisodeData probe;
    probe.way = 2;
    probe.shot = 5;
    probe.queries_per_class = 10;
    Rng prng(5);
    for (size_t c = 0; c < 2; ++c) {
        for (int k = 0; k < 5; ++k) {
            Example e;
            e.label = c;
            for (int j = 0; j < 4; ++j) {
                e.x.push_back(prng.uniform_f32(-0.5f, 0.5f) + (c ? 2.0f : -2.0f));
            }
            probe.support.push_back(e);
        }
        for (int q = 0; q < 10; ++q) {
            Example e;
            e.label = c;
            for (int j = 0; j < 4; ++j) {
                e.x.push_back(prng.uniform_f32(-0.5f, 0.5f) + (c ? 2.0f : -2.0f));
            }
            probe.query.push_back(e);
        }
    }
    CHECK(episode_accuracy(probe, net, 0) >= 0.95f);
}

TEST_CASE("train_base with a zero budget returns pristine parameters") {
    AggregateDataset agg;
    agg.feature_dim = 2;
    agg.class_count = 2;
    agg.examples.push_back({{0.0f, 0.0f}, 0, "d"});
    agg.examples.push_back({{1.0f, 1.0f}, 1, "d"});
    BackboneSpec spec{2, {3}, false};
    TrainConfig cfg = quick_cfg(9);
    cfg.episodes_per_stage = 0;
    BaseParams a = train_base(agg, spec, cfg);
    BaseParams b = train_base(agg, spec, cfg);
    CHECK(std::memcmp(a.layers[0].weight.data(), b.layers[0].weight.data(),
                      a.layers[0].weight.size() * sizeof(float)) == 0);
    // bias must still be exactly the zero initialization
    for (float v : a.layers[0].bias.values()) CHECK(v == 0.0f);
}

TEST_CASE("train_modulator freezes theta and helps on a masking domain") {
    DomainDataset ds = gen_synthetic_domain(domain_spec("mask", TransformKind::AxisMask, 77));
    ClassSplit split = split_classes(ds.class_count(), 5);

    // base trained on the untransformed sibling domain, so the mask hurts it
    DomainDataset plain = gen_synthetic_domain(domain_spec("plain", TransformKind::Rotation, 78));
    std::vector<DomainDataset> domains{plain};
    std::vector<ClassSplit> splits{split_classes(plain.class_count(), 6)};
    AggregateDataset agg = aggregate_classes(domains, splits);

    BackboneSpec spec{8, {16, 8}, true};
    TrainConfig cfg = quick_cfg(3);
    cfg.episodes_per_stage = 400;
    cfg.eval_every = 100;
    BaseParams theta = train_base(agg, spec, cfg);

    ModelPool pool;
    pool.spec = spec;
    pool.theta = theta;
    pool.kind = ModulatorKind::Adapter;
    pool.modulators.push_back(init_modulator(spec, pool.kind));
    pool.domain_names.push_back(ds.name);

    const auto theta_before = snapshot_params(pool.theta.all());
    train_modulator(ds, split, pool, 1, cfg);
    CHECK(params_equal(pool.theta.all(), theta_before));

    // held-out comparison: modulated model vs unmodulated base
    Rng ep_rng(101);
    double base_acc = 0.0, mod_acc = 0.0;
    const size_t eval_episodes = 100;
    for (size_t e = 0; e < eval_episodes; ++e) {
        Episode ep = sample_episode(ds, split, SplitPart::Val, 3, 3, 5, ep_rng);
        base_acc += episode_accuracy(ep.task, pool, 0);
        mod_acc += episode_accuracy(ep.task, pool, 1);
    }
    CHECK(mod_acc > base_acc);
}

TEST_CASE("train_modulator with a zero budget stays identity initialized") {
    DomainDataset ds = gen_synthetic_domain(domain_spec("rot", TransformKind::Rotation, 91));
    ClassSplit split = split_classes(ds.class_count(), 5);
    Rng rng(11);
    ModelPool pool;
    pool.spec = BackboneSpec{8, {6}, false};
    pool.theta = init_base(pool.spec, rng);
    pool.kind = ModulatorKind::ChannelAffine;
    pool.modulators.push_back(init_modulator(pool.spec, pool.kind));
    pool.domain_names.push_back(ds.name);

    TrainConfig cfg = quick_cfg(2);
    cfg.episodes_per_stage = 0;
    train_modulator(ds, split, pool, 1, cfg);

    Modulator fresh = init_modulator(pool.spec, pool.kind);
    for (size_t s = 0; s < fresh.sites.size(); ++s) {
        CHECK(std::memcmp(pool.modulators[0].sites[s].scale.data(),
                          fresh.sites[s].scale.data(),
                          fresh.sites[s].scale.size() * sizeof(float)) == 0);
        CHECK(std::memcmp(pool.modulators[0].sites[s].shift.data(),
                          fresh.sites[s].shift.data(),
                          fresh.sites[s].shift.size() * sizeof(float)) == 0);
    }
}

TEST_CASE("train_selector freezes the pool and degenerates gracefully at M=0") {
    DomainDataset ds = gen_synthetic_domain(domain_spec("solo", TransformKind::Rotation, 13));
    std::vector<DomainDataset> domains{ds};
    std::vector<ClassSplit> splits{split_classes(ds.class_count(), 4)};

    Rng rng(19);
    ModelPool pool;
    pool.spec = BackboneSpec{8, {6}, false};
    pool.theta = init_base(pool.spec, rng);

    const auto theta_before = snapshot_params(pool.theta.all());
    TrainConfig cfg = quick_cfg(8);
    cfg.episodes_per_stage = 30;
    SelectionNetwork phi = train_selector(domains, splits, pool, cfg, 16);
    CHECK(params_equal(pool.theta.all(), theta_before));
    CHECK(phi.output_arity() == 1);

    Rng ep_rng(3);
    Episode ep = sample_episode(ds, splits[0], SplitPart::Train, 3, 2, 4, ep_rng);
    NoGradGuard ng;
    Tensor logits = select_logits(task_representation(ep.task, pool), phi);
    CHECK(logits.shape()[0] == 1);
    // single-class cross entropy is identically zero
    CHECK(cross_entropy(logits, 0).item() == 0.0f);
}

TEST_CASE("divergence is reported with the step index") {
    AggregateDataset agg;
    agg.feature_dim = 2;
    agg.class_count = 12;
    // finite but near-FLT_MAX features overflow the forward pass to inf,
    // turning the loss into NaN on the first step
    for (int i = 0; i < 24; ++i) {
        agg.examples.push_back({{3.4e38f, 3.4e38f}, size_t(i % 12), "d"});
    }
    BackboneSpec spec{2, {8}, false};
    TrainConfig cfg = quick_cfg(4);
    try {
        train_base(agg, spec, cfg);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}
