#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fspool {

class Tensor;

namespace detail {

// One node of the define-by-run graph. Parents are the operands that produced
// this value; backward_fn pushes this node's gradient into them. The graph is
// rebuilt on every forward pass and dies with the last Tensor handle.
struct TensorImpl {
    std::vector<size_t> shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;  // lazily allocated, same length as data
    std::vector<Tensor> parents;
    std::function<void()> backward_fn;

    size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

}  // namespace detail

// Dense row-major f32 tensor with value semantics over shared storage.
// Copies alias the same buffer; training code relies on this to update
// parameters in place.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<size_t> shape, float value, bool requires_grad = false);
    static Tensor from(std::vector<size_t> shape, std::vector<float> data,
                       bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<size_t>& shape() const { return impl_->shape; }
    size_t rank() const { return impl_->shape.size(); }
    size_t size() const { return impl_->data.size(); }

    std::span<float> values() { return impl_->data; }
    std::span<const float> values() const { return impl_->data; }
    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }

    // Scalar extraction; contract error on non-scalar tensors.
    float item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    // Gradient view; reads as zeros until backward writes something.
    std::span<const float> grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }
    std::span<float> grad_mut() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    }

    detail::TensorImpl* impl() const { return impl_.get(); }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_op_output(std::vector<size_t> shape, std::vector<float> data,
                                 std::vector<Tensor> parents, std::function<void()> backward_fn);
};

std::string shape_string(const std::vector<size_t>& shape);

// --- autograd mode -----------------------------------------------------------

bool grad_enabled();

// Disables graph construction in its scope; evaluation-only forward passes.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

// Reverse-mode sweep from a scalar loss. Visits each recorded operation once,
// in reverse topological order, accumulating into the grad buffers of every
// reachable tensor that requires grad. Leaves that never fed the loss keep a
// zero gradient.
void backward(const Tensor& loss);

// --- operations --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor mul_rowvec(const Tensor& m, const Tensor& v);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, float c);
Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<size_t> shape);

// Row-wise for rank 2, plain for rank 1. Max-subtracted for stability.
Tensor log_softmax(const Tensor& x);

// -(1/rows) * sum_i logp(i, labels[i]).
Tensor nll_mean(const Tensor& logp, const std::vector<size_t>& labels);

// -log_softmax(logits)[label] for a rank-1 logit vector.
Tensor cross_entropy(const Tensor& logits, size_t label);

// (i,j) -> squared euclidean distance between queries row i and prototypes row j.
Tensor pairwise_sq_dist(const Tensor& queries, const Tensor& prototypes);

// Column-wise mean of a rank-2 tensor.
Tensor mean_rows(const Tensor& x);

// Per-class column-wise means; labels[i] in [0, n_classes), every class occupied.
Tensor class_means(const Tensor& x, const std::vector<size_t>& labels, size_t n_classes);

// Per-row normalization to zero mean / unit variance with learned affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

}  // namespace fspool
