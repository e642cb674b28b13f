#include <cmath>

#include "fspool/data.hpp"
#include "fspool/gradcheck.hpp"
#include "fspool/pool.hpp"
#include "fspool/rng.hpp"
#include "fspool/train.hpp"

namespace fspool {

namespace {

constexpr float kStep = 1e-3f;
constexpr double kPrimitiveThreshold = 1e-4;
constexpr double kCompositeThreshold = 1e-3;

// f32 central differences resolve a gradient coordinate only when the loss
// ulp is small against eps * |grad|. The cases below are built around that:
// tensor-valued ops are reduced with sum_i w_i * (y_i(x) - y_i(x0)), which is
// exactly zero at the base point (Sterbenz subtraction keeps the perturbed
// differences exact), and inputs/weights are arranged so no gradient
// coordinate cancels toward zero.

Tensor random_tensor(std::vector<size_t> shape, Rng& rng, float min_abs, float max_abs,
                     bool positive) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    std::vector<float> data(n);
    for (float& v : data) {
        const float mag = rng.uniform_f32(min_abs, max_abs);
        v = positive || rng.uniform() < 0.5 ? mag : -mag;
    }
    return Tensor::from(std::move(shape), std::move(data));
}

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite() {
    std::vector<GradCheckCase> cases;
    uint64_t weight_seed = 1000;

    auto scalar_case = [&](const std::string& name, const OpFn& f, std::vector<Tensor> inputs) {
        cases.push_back({name, kPrimitiveThreshold, grad_check(f, std::move(inputs), kStep)});
    };
    auto weighted_case = [&](const std::string& name, const OpFn& op, std::vector<Tensor> inputs,
                             Tensor w) {
        const Tensor y0 = op(inputs);
        const Tensor base = Tensor::from(y0.shape(), {y0.values().begin(), y0.values().end()});
        ScalarFn f = [op, base, w](const std::vector<Tensor>& in) {
            return sum(mul(add(op(in), scale(base, -1.0f)), w));
        };
        cases.push_back({name, kPrimitiveThreshold, grad_check(f, std::move(inputs), kStep)});
    };
    // weights drawn from [wlo, whi]; for ops whose jacobian mixes signs the
    // band is chosen to keep weighted gradients away from zero
    auto tensor_case = [&](const std::string& name, const OpFn& op, std::vector<Tensor> inputs,
                           float wlo, float whi) {
        const Tensor y0 = op(inputs);
        Rng wrng(weight_seed++);
        std::vector<float> wdata(y0.size());
        for (float& v : wdata) v = wrng.uniform_f32(wlo, whi);
        weighted_case(name, op, std::move(inputs), Tensor::from(y0.shape(), std::move(wdata)));
    };

    Rng rng(0x5eedf00d);
    auto mixed = [&](std::vector<size_t> shape) {
        return random_tensor(std::move(shape), rng, 0.2f, 1.2f, false);
    };
    auto positive = [&](std::vector<size_t> shape, float lo, float hi) {
        return random_tensor(std::move(shape), rng, lo, hi, true);
    };

    tensor_case("matmul", [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                {positive({2, 3}, 0.2f, 0.5f), positive({3, 2}, 0.2f, 0.5f)}, 1.0f, 2.0f);
    tensor_case("add", [](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                {mixed({3, 3}), mixed({3, 3})}, 1.0f, 2.0f);
    tensor_case("mul", [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); },
                {positive({3, 3}, 0.3f, 1.0f), positive({3, 3}, 0.3f, 1.0f)}, 1.0f, 2.0f);
    tensor_case("add_rowvec",
                [](const std::vector<Tensor>& in) { return add_rowvec(in[0], in[1]); },
                {mixed({4, 3}), mixed({3})}, 1.0f, 2.0f);
    tensor_case("mul_rowvec",
                [](const std::vector<Tensor>& in) { return mul_rowvec(in[0], in[1]); },
                {positive({4, 3}, 0.3f, 1.0f), positive({3}, 0.3f, 1.0f)}, 1.0f, 2.0f);
    tensor_case("relu", [](const std::vector<Tensor>& in) { return relu(in[0]); },
                {mixed({4, 4})}, 1.0f, 2.0f);
    tensor_case("scale", [](const std::vector<Tensor>& in) { return scale(in[0], -1.7f); },
                {mixed({3, 5})}, 1.0f, 2.0f);
    scalar_case("sum", [](const std::vector<Tensor>& in) { return sum(in[0]); }, {mixed({3, 4})});
    tensor_case("reshape", [](const std::vector<Tensor>& in) { return reshape(in[0], {2, 6}); },
                {mixed({3, 4})}, 1.0f, 2.0f);
    // log_softmax jacobian is delta - softmax; one heavy weight per row keeps
    // w_k - p_k * sum(w) away from zero for every k
    weighted_case("log_softmax",
                  [](const std::vector<Tensor>& in) { return log_softmax(in[0]); },
                  {random_tensor({2, 3}, rng, 0.05f, 0.25f, false)},
                  Tensor::from({2, 3}, {3.0f, 0.4f, 0.4f, 0.4f, 3.0f, 0.4f}));
    // near-confident rows keep -ln(p) comparable to the tail probabilities
    scalar_case("nll_mean",
                [](const std::vector<Tensor>& in) { return nll_mean(log_softmax(in[0]), {0}); },
                {Tensor::from({1, 2}, {1.1f, -1.1f})});
    scalar_case("cross_entropy",
                [](const std::vector<Tensor>& in) { return cross_entropy(in[0], 1); },
                {Tensor::from({2}, {-1.1f, 1.1f})});
    // separated clusters give every coordinate a same-signed distance gradient
    tensor_case("pairwise_sq_dist",
                [](const std::vector<Tensor>& in) { return pairwise_sq_dist(in[0], in[1]); },
                {positive({3, 2}, 0.5f, 0.8f), positive({2, 2}, 0.1f, 0.25f)}, 1.0f, 2.0f);
    tensor_case("mean_rows", [](const std::vector<Tensor>& in) { return mean_rows(in[0]); },
                {mixed({5, 3})}, 1.0f, 2.0f);
    tensor_case("class_means",
                [](const std::vector<Tensor>& in) {
                    return class_means(in[0], {1, 0, 1, 0, 1, 0}, 2);
                },
                {mixed({6, 3})}, 1.0f, 2.0f);
    // a tight row (small sigma) amplifies the projection gradients by 1/sigma,
    // lifting every input coordinate over the finite-difference floor
    tensor_case("layer_norm",
                [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); },
                {Tensor::from({1, 4}, {0.9f, 0.95f, 1.05f, 1.1f}),
                 Tensor::from({4}, {0.6f, 1.3f, 0.8f, 1.1f}),
                 Tensor::from({4}, {0.3f, -0.2f, 0.5f, -0.4f})},
                1.0f, 2.0f);

    // composite: full prototypical loss of a random 2-way 1-shot episode,
    // differentiated through the base and modulator parameters. The final
    // layer's norm shift translates every embedding identically, so pairwise
    // distances do not depend on it; its true gradient is exactly zero and a
    // finite-difference comparison there is meaningless, so it is skipped.
    {
        BackboneSpec spec;
        spec.input_dim = 5;
        spec.layer_widths = {6, 4};
        spec.normalize = true;
        Rng init(0xabcd);
        ModelPool pool;
        pool.spec = spec;
        pool.theta = init_base(spec, init);
        pool.kind = ModulatorKind::Adapter;
        pool.modulators.push_back(init_modulator(spec, ModulatorKind::Adapter));
        pool.domain_names = {"probe"};
        // nudge the adapter off its exact-zero init so its gradient is generic
        for (Tensor p : pool.modulators[0].params()) {
            for (float& v : p.values()) v += init.uniform_f32(-0.2f, 0.2f);
        }

        EpisodeData task;
        task.way = 2;
        task.shot = 1;
        task.queries_per_class = 3;
        for (size_t c = 0; c < task.way; ++c) {
            Example e;
            e.label = c;
            for (size_t j = 0; j < spec.input_dim; ++j) {
                e.x.push_back(init.uniform_f32(-1.0f, 1.0f) + (c ? 1.5f : -1.5f));
            }
            task.support.push_back(e);
            for (size_t q = 0; q < task.queries_per_class; ++q) {
                Example qe;
                qe.label = c;
                for (size_t j = 0; j < spec.input_dim; ++j) {
                    qe.x.push_back(init.uniform_f32(-1.0f, 1.0f) + (c ? 1.5f : -1.5f));
                }
                task.query.push_back(qe);
            }
        }

        const Tensor final_norm_beta = pool.theta.layers.back().norm_beta;
        std::vector<Tensor> params;
        for (const Tensor& p : pool.theta.all()) {
            if (p.impl() != final_norm_beta.impl()) params.push_back(p);
        }
        for (const Tensor& p : pool.modulators[0].params()) params.push_back(p);
        const double err = grad_check(
            [&pool, &task](const std::vector<Tensor>&) {
                return prototypical_loss(task, pool, 1);
            },
            params, kStep);
        cases.push_back({"prototypical_loss", kCompositeThreshold, err});
    }

    return cases;
}

}  // namespace fspool
