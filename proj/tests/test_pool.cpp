#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "fspool/checkpoint.hpp"
#include "fspool/error.hpp"
#include "fspool/pool.hpp"
#include "fspool/rng.hpp"

using namespace fspool;

namespace {

ModelPool make_pool(ModulatorKind kind, size_t n_modulators, uint64_t seed,
                    BackboneSpec spec = {4, {6, 5}, true}) {
    Rng rng(seed);
    ModelPool pool;
    pool.spec = spec;
    pool.theta = init_base(spec, rng);
    pool.kind = kind;
    for (size_t i = 0; i < n_modulators; ++i) {
        pool.modulators.push_back(init_modulator(spec, kind));
        pool.domain_names.push_back("dom" + std::to_string(i));
    }
    return pool;
}

Tensor random_batch(size_t rows, size_t dim, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> data(rows * dim);
    for (float& v : data) v = rng.uniform_f32(-2.0f, 2.0f);
    return Tensor::from({rows, dim}, std::move(data));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("fresh modulators are exact identities") {
    for (ModulatorKind kind : {ModulatorKind::Adapter, ModulatorKind::ChannelAffine}) {
        for (bool normalize : {false, true}) {
            ModelPool pool = make_pool(kind, 2, 42, BackboneSpec{4, {6, 5}, normalize});
            Tensor x = random_batch(3, 4, 7);
            Tensor base = embed(x, pool, 0);
            for (size_t i = 1; i <= 2; ++i) {
                CHECK(bitwise_equal(embed(x, pool, i), base));
            }
        }
    }
}

TEST_CASE("embed batch rows are independent") {
    ModelPool pool = make_pool(ModulatorKind::Adapter, 1, 3);
    Rng rng(9);
    std::vector<float> row(4);
    for (float& v : row) v = rng.uniform_f32(-1.0f, 1.0f);
    std::vector<float> both = row;
    both.insert(both.end(), row.begin(), row.end());
    Tensor out = embed(Tensor::from({2, 4}, std::move(both)), pool, 0);
    CHECK(std::memcmp(out.data(), out.data() + 5, 5 * sizeof(float)) == 0);
}

TEST_CASE("embed rejects an out-of-range model index") {
    ModelPool pool = make_pool(ModulatorKind::Adapter, 2, 1);
    CHECK_THROWS_AS(embed(random_batch(1, 4, 1), pool, 3), IndexError);
}

TEST_CASE("mutating one modulator leaves other models untouched") {
    ModelPool pool = make_pool(ModulatorKind::ChannelAffine, 2, 11);
    Tensor x = random_batch(2, 4, 5);
    Tensor base_before = embed(x, pool, 0);
    Tensor m2_before = embed(x, pool, 2);

    pool.modulators[0].sites[0].scale.data()[1] = 3.5f;
    CHECK(bitwise_equal(embed(x, pool, 0), base_before));
    CHECK(bitwise_equal(embed(x, pool, 2), m2_before));
    CHECK_FALSE(bitwise_equal(embed(x, pool, 1), base_before));
}

TEST_CASE("mutating theta changes every model") {
    ModelPool pool = make_pool(ModulatorKind::Adapter, 2, 13);
    Tensor x = random_batch(2, 4, 6);
    std::vector<Tensor> before;
    for (size_t i = 0; i < pool.model_count(); ++i) before.push_back(embed(x, pool, i));
    pool.theta.layers[0].weight.data()[0] += 0.25f;
    for (size_t i = 0; i < pool.model_count(); ++i) {
        CHECK_FALSE(bitwise_equal(embed(x, pool, i), before[i]));
    }
}

TEST_CASE("modulator parameter accounting") {
    // ResNet-18 geometry: 16 insertion points, widths 64/128/256/512 x4 each
    std::vector<size_t> widths;
    for (size_t w : {64, 128, 256, 512}) {
        for (int i = 0; i < 4; ++i) widths.push_back(w);
    }
    const size_t per_modulator = count_modulator_params(widths, ModulatorKind::ChannelAffine);
    CHECK(per_modulator == 7680);
    CHECK(per_modulator * 8 == 61440);

    CHECK(count_modulator_params(std::vector<size_t>{4, 8}, ModulatorKind::ChannelAffine) == 24);
    CHECK(count_modulator_params(std::vector<size_t>{4, 8}, ModulatorKind::Adapter) == 80);
    CHECK(count_modulator_params(widths, ModulatorKind::Identity) == 0);
}

TEST_CASE("initialized modulator parameter count matches the accounting") {
    BackboneSpec spec{4, {6, 5}, false};
    for (ModulatorKind kind : {ModulatorKind::Adapter, ModulatorKind::ChannelAffine}) {
        Modulator mod = init_modulator(spec, kind);
        size_t total = 0;
        for (const Tensor& p : mod.params()) total += p.size();
        CHECK(total == count_modulator_params(spec.layer_widths, kind));
    }
}

TEST_CASE("select_logits zero network gives uniform logits") {
    SelectionNetwork phi;
    phi.w1 = Tensor::zeros({5, 8});
    phi.b1 = Tensor::zeros({8});
    phi.w2 = Tensor::zeros({8, 3});
    phi.b2 = Tensor::zeros({3});
    Tensor z = Tensor::from({5}, {1, -1, 2, 0.5, 0});
    Tensor logits = select_logits(z, phi);
    CHECK(logits.shape() == std::vector<size_t>{3});
    for (float v : logits.values()) CHECK(v == 0.0f);
    Tensor probs = log_softmax(logits);
    for (float v : probs.values()) {
        CHECK(std::exp(v) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    }
}

TEST_CASE("selector output arity is M+1") {
    Rng rng(21);
    for (size_t m : {0u, 1u, 4u}) {
        SelectionNetwork phi = init_selector(6, 16, m, rng);
        CHECK(phi.output_arity() == m + 1);
        Tensor z = Tensor::zeros({6});
        CHECK(select_logits(z, phi).shape()[0] == m + 1);
    }
}

TEST_CASE("positive scaling of the task representation preserves the argmax") {
    // on positive activations the network is piecewise linear through relu
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        SelectionNetwork phi;
        const size_t d = 4, h = 6, m = 3;
        std::vector<float> w1(d * h), w2(h * (m + 1));
        for (float& v : w1) v = rng.uniform_f32(0.05f, 1.0f);
        for (float& v : w2) v = rng.uniform_f32(-1.0f, 1.0f);
        phi.w1 = Tensor::from({d, h}, std::move(w1));
        phi.b1 = Tensor::zeros({h});
        phi.w2 = Tensor::from({h, m + 1}, std::move(w2));
        phi.b2 = Tensor::zeros({m + 1});

        std::vector<float> z(d);
        for (float& v : z) v = rng.uniform_f32(0.1f, 1.0f);
        std::vector<float> z3 = z;
        for (float& v : z3) v *= 3.0f;

        auto argmax = [](const Tensor& t) {
            size_t best = 0;
            for (size_t i = 1; i < t.size(); ++i) {
                if (t.values()[i] > t.values()[best]) best = i;
            }
            return best;
        };
        CHECK(argmax(select_logits(Tensor::from({4}, std::move(z)), phi)) ==
              argmax(select_logits(Tensor::from({4}, std::move(z3)), phi)));
    }
}

TEST_CASE("argmax semantics of selection logits") {
    Tensor logits = Tensor::from({3}, {0.1f, 2.0f, -1.0f});
    size_t best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits.values()[i] > logits.values()[best]) best = i;
    }
    CHECK(best == 1);
}

TEST_CASE("initialization is deterministic and bounded") {
    BackboneSpec spec{8, {16, 8}, true};
    Rng a(99), b(99);
    BaseParams t1 = init_base(spec, a);
    BaseParams t2 = init_base(spec, b);
    for (size_t l = 0; l < t1.layers.size(); ++l) {
        CHECK(bitwise_equal(t1.layers[l].weight, t2.layers[l].weight));
        for (float v : t1.layers[l].bias.values()) CHECK(v == 0.0f);
        for (float v : t1.layers[l].norm_gamma.values()) CHECK(v == 1.0f);
        for (float v : t1.layers[l].norm_beta.values()) CHECK(v == 0.0f);
    }
    // xavier bound on the first layer: sqrt(6 / (8 + 16))
    const float limit = std::sqrt(6.0f / 24.0f);
    for (float v : t1.layers[0].weight.values()) CHECK(std::abs(v) <= limit);

    Modulator m1 = init_modulator(spec, ModulatorKind::Adapter);
    Modulator m2 = init_modulator(spec, ModulatorKind::Adapter);
    for (size_t s = 0; s < m1.sites.size(); ++s) {
        CHECK(bitwise_equal(m1.sites[s].adapter, m2.sites[s].adapter));
    }
}

TEST_CASE("checkpoint round trip is bitwise") {
    const std::string path1 = "test_pool_ck1.bin";
    const std::string path2 = "test_pool_ck2.bin";
    ModelPool pool = make_pool(ModulatorKind::ChannelAffine, 3, 77);
    Rng rng(5);
    // perturb so the payload is not all identity values
    for (Modulator& mod : pool.modulators) {
        for (Tensor p : mod.params()) {
            for (float& v : p.values()) v += rng.uniform_f32(-0.5f, 0.5f);
        }
    }
    SelectionNetwork phi = init_selector(5, 12, 3, rng);

    Checkpoint ck;
    pack_pool(ck, pool);
    pack_selector(ck, phi);
    ck.meta["stage"] = "selector";
    ck.meta["seed"] = "7";
    ck.meta["data_digest"] = "0";
    write_checkpoint(ck, path1);

    Checkpoint back = read_checkpoint(path1);
    CHECK(back.stage() == "selector");
    CHECK(back.domains() == pool.domain_names);
    write_checkpoint(back, path2);

    std::ifstream f1(path1, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());

    ModelPool pool2 = unpack_pool(back);
    CHECK(pool2.model_count() == pool.model_count());
    Tensor x = random_batch(2, 4, 3);
    for (size_t i = 0; i < pool.model_count(); ++i) {
        CHECK(bitwise_equal(embed(x, pool2, i), embed(x, pool, i)));
    }
    auto phi2 = unpack_selector(back);
    REQUIRE(phi2.has_value());
    CHECK(bitwise_equal(phi2->w1, phi.w1));

    std::filesystem::remove(path1);
    std::filesystem::remove(path2);
}

TEST_CASE("checkpoint rejects bad magic and truncation") {
    const std::string path = "test_pool_bad.bin";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE!junkjunkjunk";
    }
    try {
        read_checkpoint(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("POOL1") != std::string::npos);
    }

    ModelPool pool = make_pool(ModulatorKind::Adapter, 1, 7);
    Checkpoint ck;
    pack_pool(ck, pool);
    ck.meta["stage"] = "base";
    write_checkpoint(ck, path);
    // chop the file mid-tensor
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    {
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() - 7));
    }
    try {
        read_checkpoint(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects non-finite parameter values") {
    const std::string path = "test_pool_nan.bin";
    ModelPool pool = make_pool(ModulatorKind::Adapter, 1, 7);
    pool.theta.layers[0].weight.data()[2] = std::numeric_limits<float>::quiet_NaN();
    Checkpoint ck;
    pack_pool(ck, pool);
    ck.meta["stage"] = "base";
    write_checkpoint(ck, path);
    CHECK_THROWS_AS(read_checkpoint(path), FormatError);
    std::filesystem::remove(path);
}
