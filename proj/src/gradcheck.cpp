#include "fspool/gradcheck.hpp"

#include <cmath>

#include "fspool/error.hpp"

namespace fspool {

double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, float eps) {
    for (Tensor& t : inputs) t.set_requires_grad(true);

    Tensor first = f(inputs);
    if (first.size() != 1) {
        throw ContractError("grad_check: function must be scalar-valued, got " +
                            shape_string(first.shape()));
    }
    {
        NoGradGuard ng;
        Tensor second = f(inputs);
        if (first.item() != second.item()) {
            throw DeterminismError("grad_check: two forward passes disagree (" +
                                   std::to_string(first.item()) + " vs " +
                                   std::to_string(second.item()) + ")");
        }
    }

    for (Tensor& t : inputs) t.zero_grad();
    backward(first);

    double max_rel = 0.0;
    NoGradGuard ng;
    for (Tensor& t : inputs) {
        float* data = t.data();
        std::span<const float> analytic = t.grad();
        for (size_t i = 0; i < t.size(); ++i) {
            const float saved = data[i];
            data[i] = saved + eps;
            const float hi = data[i];
            const double f_hi = double(f(inputs).item());
            data[i] = saved - eps;
            const float lo = data[i];
            const double f_lo = double(f(inputs).item());
            data[i] = saved;
            // use the realized f32 step, not the nominal one
            const double numeric = (f_hi - f_lo) / (double(hi) - double(lo));
            const double a = double(analytic[i]);
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace fspool
