#include "fspool/adam.hpp"

#include <cmath>

#include "fspool/error.hpp"

namespace fspool {

AdamState AdamState::for_params(std::span<const Tensor> params, float lr) {
    AdamState s;
    s.lr = lr;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor& p : params) {
        s.m.emplace_back(p.size(), 0.0f);
        s.v.emplace_back(p.size(), 0.0f);
    }
    return s;
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw DimensionError("adam_step: " + std::to_string(params.size()) + " params, " +
                             std::to_string(grads.size()) + " grads, " +
                             std::to_string(state.m.size()) + " accumulators");
    }
    state.step_count += 1;
    const double t = double(state.step_count);
    const double b1 = double(state.beta1), b2 = double(state.beta2);
    const double corr1 = 1.0 - std::pow(b1, t);
    const double corr2 = 1.0 - std::pow(b2, t);
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        if (p.shape() != grads[k].shape() || p.size() != state.m[k].size()) {
            throw DimensionError("adam_step: param " + std::to_string(k) + " shape " +
                                 shape_string(p.shape()) + " vs grad " +
                                 shape_string(grads[k].shape()));
        }
        float* pd = p.data();
        const float* gd = grads[k].data();
        std::vector<float>& m = state.m[k];
        std::vector<float>& v = state.v[k];
        for (size_t i = 0; i < m.size(); ++i) {
            const double g = double(gd[i]);
            m[i] = float(b1 * double(m[i]) + (1.0 - b1) * g);
            v[i] = float(b2 * double(v[i]) + (1.0 - b2) * g * g);
            const double mhat = double(m[i]) / corr1;
            const double vhat = double(v[i]) / corr2;
            pd[i] = float(double(pd[i]) - double(state.lr) * mhat / (std::sqrt(vhat) + double(state.eps)));
        }
    }
}

void adam_step(std::span<Tensor> params, AdamState& state) {
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Tensor& p : params) {
        grads.push_back(Tensor::from(p.shape(), {p.grad().begin(), p.grad().end()}));
    }
    adam_step(params, grads, state);
}

void zero_grads(std::span<Tensor> params) {
    for (Tensor& p : params) p.zero_grad();
}

}  // namespace fspool
