#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "fspool/adam.hpp"
#include "fspool/error.hpp"
#include "fspool/gradcheck.hpp"
#include "fspool/rng.hpp"
#include "fspool/tensor.hpp"

using namespace fspool;

namespace {

Tensor random_tensor(std::vector<size_t> shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    std::vector<float> data(n);
    for (float& v : data) v = rng.uniform_f32(lo, hi);
    return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor out = matmul(a, eye);
    CHECK(std::memcmp(out.data(), a.data(), 4 * sizeof(float)) == 0);

    Tensor z = Tensor::zeros({2, 3});
    Tensor b = Tensor::from({3, 4}, std::vector<float>(12, 7.0f));
    Tensor zout = matmul(z, b);
    for (float v : zout.values()) CHECK(v == 0.0f);
}

TEST_CASE("matmul hand-expanded product") {
    // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {5, 6});
    Tensor out = matmul(a, b);
    CHECK(out.values()[0] == doctest::Approx(17.0));
    CHECK(out.values()[1] == doctest::Approx(39.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x5]") != std::string::npos);
    }
}

TEST_CASE("relu sign cases and idempotence") {
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Tensor y = relu(x);
    CHECK(y.values()[0] == 0.0f);
    CHECK(y.values()[1] == 0.0f);
    CHECK(y.values()[2] == 2.0f);

    Rng rng(7);
    Tensor r = random_tensor({4, 5}, rng, -2.0f, 2.0f);
    Tensor once = relu(r);
    Tensor twice = relu(once);
    CHECK(std::memcmp(once.data(), twice.data(), once.size() * sizeof(float)) == 0);
}

TEST_CASE("relu all-negative input has zero output and zero gradient") {
    Tensor x = Tensor::from({4}, {-3, -1, -0.5, -2}, true);
    Tensor loss = sum(relu(x));
    backward(loss);
    for (float v : x.grad()) CHECK(v == 0.0f);
}

TEST_CASE("log_softmax uniform input") {
    Tensor x = Tensor::zeros({5});
    Tensor y = log_softmax(x);
    for (float v : y.values()) CHECK(v == doctest::Approx(-1.6094379124341003).epsilon(1e-6));
}

TEST_CASE("log_softmax overflow guard") {
    Tensor x = Tensor::from({2}, {1000.0f, 0.0f});
    Tensor y = log_softmax(x);
    CHECK(std::isfinite(y.values()[0]));
    CHECK(std::isfinite(y.values()[1]));
    CHECK(y.values()[0] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("log_softmax shift invariance and normalization") {
    Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor x = random_tensor({7}, rng, -30.0f, 30.0f);
        Tensor y = log_softmax(x);
        double total = 0.0;
        for (float v : y.values()) total += std::exp(double(v));
        CHECK(std::abs(total - 1.0) < 1e-6);

        std::vector<float> shifted(x.values().begin(), x.values().end());
        for (float& v : shifted) v += 4.0f;
        Tensor y2 = log_softmax(Tensor::from({7}, std::move(shifted)));
        for (size_t i = 0; i < 7; ++i) {
            CHECK(y2.values()[i] == doctest::Approx(y.values()[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("cross_entropy closed forms") {
    CHECK(cross_entropy(Tensor::zeros({5}), 3).item() ==
          doctest::Approx(1.6094379124341003).epsilon(1e-6));
    // logits [2,1], label 0 -> ln(1+e^-1)
    CHECK(cross_entropy(Tensor::from({2}, {2, 1}), 0).item() ==
          doctest::Approx(0.3132616875182229).epsilon(1e-6));
    // confident correct -> loss ~ 0
    Tensor confident = Tensor::from({4}, {50, 0, 0, 0});
    CHECK(cross_entropy(confident, 0).item() < 1e-3);
}

TEST_CASE("cross_entropy label out of range") {
    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({3}), 3), IndexError);
}

TEST_CASE("pairwise_sq_dist closed forms and symmetry") {
    Tensor q = Tensor::from({1, 2}, {0, 0});
    Tensor p = Tensor::from({1, 2}, {3, 4});
    CHECK(pairwise_sq_dist(q, p).values()[0] == doctest::Approx(25.0));
    CHECK(pairwise_sq_dist(q, q).values()[0] == 0.0f);

    Rng rng(3);
    Tensor a = random_tensor({4, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    Tensor ab = pairwise_sq_dist(a, b);
    Tensor ba = pairwise_sq_dist(b, a);
    for (size_t i = 0; i < 4; ++i) {
        for (size_t j = 0; j < 2; ++j) {
            CHECK(ab.values()[i * 2 + j] == ba.values()[j * 4 + i]);
        }
    }

    CHECK_THROWS_AS(pairwise_sq_dist(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})),
                    DimensionError);
}

TEST_CASE("mean_rows") {
    Tensor single = Tensor::from({1, 3}, {4, 5, 6});
    Tensor m = mean_rows(single);
    CHECK(std::memcmp(m.data(), single.data(), 3 * sizeof(float)) == 0);

    Tensor x = Tensor::from({2, 2}, {1, 3, 3, 1});
    Tensor mx = mean_rows(x);
    CHECK(mx.values()[0] == 2.0f);
    CHECK(mx.values()[1] == 2.0f);

    Tensor opp = Tensor::from({2, 2}, {1, -2, -1, 2});
    Tensor mo = mean_rows(opp);
    CHECK(mo.values()[0] == 0.0f);
    CHECK(mo.values()[1] == 0.0f);

    // rank-0 rows cannot even be constructed
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), DimensionError);
}

TEST_CASE("backward linear and quadratic closed forms") {
    Rng rng(5);
    Tensor x = random_tensor({3, 4}, rng);
    x.set_requires_grad(true);
    backward(sum(x));
    for (float g : x.grad()) CHECK(g == 1.0f);

    Tensor y = random_tensor({6}, rng);
    y.set_requires_grad(true);
    Tensor loss = scale(sum(mul(y, y)), 0.5f);
    backward(loss);
    for (size_t i = 0; i < y.size(); ++i) {
        CHECK(y.grad()[i] == doctest::Approx(y.values()[i]).epsilon(1e-6));
    }
}

TEST_CASE("backward requires a scalar loss") {
    Tensor x = Tensor::zeros({2, 2}, true);
    CHECK_THROWS_AS(backward(add(x, x)), ContractError);
}

TEST_CASE("unused leaf receives exactly zero gradient") {
    Tensor used = Tensor::from({3}, {1, 2, 3}, true);
    Tensor unused = Tensor::from({3}, {4, 5, 6}, true);
    backward(sum(used));
    for (float g : unused.grad()) CHECK(g == 0.0f);
    for (float g : used.grad()) CHECK(g == 1.0f);
}

TEST_CASE("gradient accumulates across two uses of one tensor") {
    Tensor x = Tensor::from({2}, {3, -2}, true);
    // loss = sum(x + x) -> d/dx = 2
    backward(sum(add(x, x)));
    CHECK(x.grad()[0] == 2.0f);
    CHECK(x.grad()[1] == 2.0f);
}

TEST_CASE("grad_check exact on linear functions") {
    // zero-sum input keeps the f32 rounding of the loss below the
    // finite-difference signal, so the linear case is resolved exactly
    Rng rng(13);
    std::vector<float> data(8);
    for (size_t i = 0; i < 4; ++i) {
        data[i] = rng.uniform_f32(0.2f, 1.2f);
        data[i + 4] = -data[i];
    }
    const double err = grad_check(
        [](const std::vector<Tensor>& in) { return sum(in[0]); },
        {Tensor::from({2, 4}, std::move(data))}, 1e-3f);
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check detects non-determinism") {
    int calls = 0;
    auto flaky = [&calls](const std::vector<Tensor>& in) {
        calls++;
        return scale(sum(in[0]), calls == 1 ? 1.0f : 1.5f);
    };
    Rng rng(17);
    CHECK_THROWS_AS(grad_check(flaky, {random_tensor({2}, rng)}, 1e-3f), DeterminismError);
}

TEST_CASE("gradcheck suite passes its thresholds") {
    for (const GradCheckCase& c : run_gradcheck_suite()) {
        INFO(c.name << " err=" << c.error << " threshold=" << c.threshold);
        CHECK(c.pass());
        if (c.name != "prototypical_loss") CHECK(c.error < 1e-4);
    }
}

TEST_CASE("gradcheck suite lists every registered op exactly once") {
    std::vector<std::string> names;
    for (const GradCheckCase& c : run_gradcheck_suite()) names.push_back(c.name);
    std::vector<std::string> sorted = names;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    for (const char* expected :
         {"matmul", "relu", "log_softmax", "cross_entropy", "pairwise_sq_dist", "mean_rows",
          "layer_norm", "prototypical_loss"}) {
        CHECK(std::find(names.begin(), names.end(), expected) != names.end());
    }
}

TEST_CASE("adam zero gradient leaves parameters untouched") {
    std::vector<Tensor> params = {Tensor::from({3}, {1, 2, 3})};
    std::vector<Tensor> grads = {Tensor::zeros({3})};
    AdamState state = AdamState::for_params(params, 0.001f);
    const std::vector<float> before(params[0].values().begin(), params[0].values().end());
    adam_step(params, grads, state);
    CHECK(state.step_count == 1);
    for (size_t i = 0; i < 3; ++i) CHECK(params[0].values()[i] == before[i]);
}

TEST_CASE("adam step magnitude approaches lr under constant gradient") {
    std::vector<Tensor> params = {Tensor::zeros({2})};
    std::vector<Tensor> grads = {Tensor::from({2}, {0.5f, -3.0f})};
    AdamState state = AdamState::for_params(params, 0.01f);
    float prev0 = 0.0f, prev1 = 0.0f;
    float step0 = 0.0f, step1 = 0.0f;
    for (int t = 0; t < 400; ++t) {
        prev0 = params[0].values()[0];
        prev1 = params[0].values()[1];
        adam_step(params, grads, state);
        step0 = params[0].values()[0] - prev0;
        step1 = params[0].values()[1] - prev1;
    }
    // steady state: |delta| -> lr, sign opposite the gradient
    CHECK(std::abs(step0) == doctest::Approx(0.01).epsilon(0.02));
    CHECK(std::abs(step1) == doctest::Approx(0.01).epsilon(0.02));
    CHECK(step0 < 0.0f);
    CHECK(step1 > 0.0f);
}

TEST_CASE("adam is deterministic") {
    auto run = [] {
        std::vector<Tensor> params = {Tensor::from({3}, {0.5f, -0.25f, 4.0f})};
        std::vector<Tensor> grads = {Tensor::from({3}, {0.1f, 0.2f, -0.7f})};
        AdamState state = AdamState::for_params(params, 0.001f);
        for (int t = 0; t < 10; ++t) adam_step(params, grads, state);
        return std::vector<float>(params[0].values().begin(), params[0].values().end());
    };
    const std::vector<float> a = run();
    const std::vector<float> b = run();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("adam rejects mismatched shapes") {
    std::vector<Tensor> params = {Tensor::zeros({3})};
    std::vector<Tensor> grads = {Tensor::zeros({4})};
    AdamState state = AdamState::for_params(params);
    CHECK_THROWS_AS(adam_step(params, grads, state), DimensionError);
}

TEST_CASE("no-grad mode skips graph construction") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    NoGradGuard ng;
    Tensor y = sum(x);
    CHECK_FALSE(y.requires_grad());
}
