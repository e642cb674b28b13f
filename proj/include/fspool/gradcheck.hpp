#pragma once

#include <functional>
#include <vector>

#include "fspool/tensor.hpp"

namespace fspool {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of a scalar-valued function against central
// finite differences with step `eps`, over every coordinate of every input.
// Returns max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// The function is evaluated twice up front; a bitwise mismatch raises
// DeterminismError.
double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, float eps);

struct GradCheckCase {
    std::string name;
    double threshold;
    double error;

    bool pass() const { return error < threshold; }
};

// One case per differentiable operation plus the composite prototypical loss,
// on fixed-seed random inputs. Primitive threshold 1e-4, composite 1e-3.
std::vector<GradCheckCase> run_gradcheck_suite();

}  // namespace fspool
