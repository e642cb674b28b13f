#pragma once

#include <span>
#include <vector>

#include "fspool/tensor.hpp"

namespace fspool {

// Per-parameter Adam accumulators. Defaults follow the usual (0.9, 0.999, 1e-8)
// setting with learning rate 0.001.
struct AdamState {
    float lr = 0.001f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    size_t step_count = 0;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;

    static AdamState for_params(std::span<const Tensor> params, float lr = 0.001f);
};

// One bias-corrected Adam update. grads[i] holds the gradient for params[i];
// shapes must match the state accumulators. Deterministic.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state);

// Convenience overload reading the gradients attached to the parameters.
void adam_step(std::span<Tensor> params, AdamState& state);

void zero_grads(std::span<Tensor> params);

}  // namespace fspool
