#include "fspool/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "fspool/error.hpp"

namespace fspool {

namespace {

thread_local bool g_grad_enabled = true;

size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

void check_rank(const Tensor& t, size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             " tensor, got " + shape_string(t.shape()));
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                             " vs " + shape_string(b.shape()));
    }
}

}  // namespace

std::string shape_string(const std::vector<size_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor make_op_output(std::vector<size_t> shape, std::vector<float> data,
                      std::vector<Tensor> parents, std::function<void()> backward_fn) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            impl->requires_grad = true;
            impl->parents = std::move(parents);
            impl->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(impl));
}

namespace {

// Builds the output node first, then installs a backward closure that can see
// the output's grad buffer. `make_backward(self)` receives the raw output impl,
// which outlives the closure it owns.
template <class F>
Tensor op_output(std::vector<size_t> shape, std::vector<float> data, std::vector<Tensor> parents,
                 F&& make_backward) {
    Tensor out = make_op_output(std::move(shape), std::move(data), std::move(parents), nullptr);
    if (out.requires_grad()) {
        out.impl()->backward_fn = make_backward(out.impl());
    }
    return out;
}

bool wants_grad(const Tensor& t) { return t.requires_grad(); }

}  // namespace

Tensor Tensor::zeros(std::vector<size_t> shape, bool requires_grad) {
    return from(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(std::vector<size_t> shape, float value, bool requires_grad) {
    std::vector<float> data(shape_numel(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from(std::vector<size_t> shape, std::vector<float> data, bool requires_grad) {
    for (size_t d : shape) {
        if (d == 0) {
            throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
        }
    }
    const size_t n = shape_numel(shape);
    if (data.empty()) data.assign(n, 0.0f);
    if (data.size() != n) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

float Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item() requires a scalar tensor, got " + shape_string(shape()));
    }
    return impl_->data[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<empty>")));
    }
    if (!loss.requires_grad()) return;

    // Post-order over parent links; the reverse is an order where every
    // consumer runs before its operands, so each node's grad is complete when
    // its backward rule fires. Each node is visited exactly once.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> visited;
    struct Frame {
        detail::TensorImpl* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.impl(), 0});
    visited.insert(loss.impl());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorImpl* p = f.node->parents[f.next_parent++].impl();
            if (p->requires_grad && visited.insert(p).second) {
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

// --- operations --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank(a, 2, "matmul");
    check_rank(b, 2, "matmul");
    const size_t m = a.shape()[0], k = a.shape()[1];
    const size_t n = b.shape()[1];
    if (k != b.shape()[0]) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) +
                             " vs " + shape_string(b.shape()));
    }
    std::vector<float> out(m * n);
    const float* pa = a.data();
    const float* pb = b.data();
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t t = 0; t < k; ++t) acc += double(pa[i * k + t]) * double(pb[t * n + j]);
            out[i * n + j] = float(acc);
        }
    }
    return op_output({m, n}, std::move(out), {a, b}, [a, b, m, n, k](detail::TensorImpl* self) {
        return [a, b, m, n, k, self]() {
            const float* g = self->grad.data();
            if (a.requires_grad()) {
                auto* ai = a.impl();
                ai->ensure_grad();
                const float* pb = b.data();
                for (size_t i = 0; i < m; ++i) {
                    for (size_t t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (size_t j = 0; j < n; ++j) {
                            acc += double(g[i * n + j]) * double(pb[t * n + j]);
                        }
                        ai->grad[i * k + t] += float(acc);
                    }
                }
            }
            if (b.requires_grad()) {
                auto* bi = b.impl();
                bi->ensure_grad();
                const float* pa = a.data();
                for (size_t t = 0; t < k; ++t) {
                    for (size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (size_t i = 0; i < m; ++i) {
                            acc += double(pa[i * k + t]) * double(g[i * n + j]);
                        }
                        bi->grad[t * n + j] += float(acc);
                    }
                }
            }
        };
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<float> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return op_output(a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl* self) {
        return [a, b, self]() {
            for (const Tensor& t : {a, b}) {
                if (!wants_grad(t)) continue;
                auto* ti = t.impl();
                ti->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) ti->grad[i] += self->grad[i];
            }
        };
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<float> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return op_output(a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl* self) {
        return [a, b, self]() {
            if (wants_grad(a)) {
                auto* ai = a.impl();
                ai->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) {
                    ai->grad[i] += self->grad[i] * b.data()[i];
                }
            }
            if (wants_grad(b)) {
                auto* bi = b.impl();
                bi->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) {
                    bi->grad[i] += self->grad[i] * a.data()[i];
                }
            }
        };
    });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    check_rank(m, 2, "add_rowvec");
    check_rank(v, 1, "add_rowvec");
    const size_t rows = m.shape()[0], cols = m.shape()[1];
    if (v.shape()[0] != cols) {
        throw DimensionError("add_rowvec: " + shape_string(m.shape()) + " vs " +
                             shape_string(v.shape()));
    }
    std::vector<float> out(m.size());
    for (size_t i = 0; i < rows; ++i) {
        for (size_t j = 0; j < cols; ++j) out[i * cols + j] = m.data()[i * cols + j] + v.data()[j];
    }
    return op_output(m.shape(), std::move(out), {m, v}, [m, v, rows, cols](detail::TensorImpl* self) {
        return [m, v, rows, cols, self]() {
            if (wants_grad(m)) {
                auto* mi = m.impl();
                mi->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) mi->grad[i] += self->grad[i];
            }
            if (wants_grad(v)) {
                auto* vi = v.impl();
                vi->ensure_grad();
                for (size_t j = 0; j < cols; ++j) {
                    double acc = 0.0;
                    for (size_t i = 0; i < rows; ++i) acc += double(self->grad[i * cols + j]);
                    vi->grad[j] += float(acc);
                }
            }
        };
    });
}

Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
    check_rank(m, 2, "mul_rowvec");
    check_rank(v, 1, "mul_rowvec");
    const size_t rows = m.shape()[0], cols = m.shape()[1];
    if (v.shape()[0] != cols) {
        throw DimensionError("mul_rowvec: " + shape_string(m.shape()) + " vs " +
                             shape_string(v.shape()));
    }
    std::vector<float> out(m.size());
    for (size_t i = 0; i < rows; ++i) {
        for (size_t j = 0; j < cols; ++j) out[i * cols + j] = m.data()[i * cols + j] * v.data()[j];
    }
    return op_output(m.shape(), std::move(out), {m, v}, [m, v, rows, cols](detail::TensorImpl* self) {
        return [m, v, rows, cols, self]() {
            if (wants_grad(m)) {
                auto* mi = m.impl();
                mi->ensure_grad();
                for (size_t i = 0; i < rows; ++i) {
                    for (size_t j = 0; j < cols; ++j) {
                        mi->grad[i * cols + j] += self->grad[i * cols + j] * v.data()[j];
                    }
                }
            }
            if (wants_grad(v)) {
                auto* vi = v.impl();
                vi->ensure_grad();
                for (size_t j = 0; j < cols; ++j) {
                    double acc = 0.0;
                    for (size_t i = 0; i < rows; ++i) {
                        acc += double(self->grad[i * cols + j]) * double(m.data()[i * cols + j]);
                    }
                    vi->grad[j] += float(acc);
                }
            }
        };
    });
}

Tensor relu(const Tensor& x) {
    std::vector<float> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    return op_output(x.shape(), std::move(out), {x}, [x](detail::TensorImpl* self) {
        return [x, self]() {
            // gradient at exactly 0 is 0
            auto* xi = x.impl();
            xi->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) {
                if (x.data()[i] > 0.0f) xi->grad[i] += self->grad[i];
            }
        };
    });
}

Tensor scale(const Tensor& x, float c) {
    std::vector<float> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
    return op_output(x.shape(), std::move(out), {x}, [x, c](detail::TensorImpl* self) {
        return [x, c, self]() {
            auto* xi = x.impl();
            xi->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) xi->grad[i] += c * self->grad[i];
        };
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.values()) acc += double(v);
    return op_output({1}, {float(acc)}, {x}, [x](detail::TensorImpl* self) {
        return [x, self]() {
            auto* xi = x.impl();
            xi->ensure_grad();
            for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += self->grad[0];
        };
    });
}

Tensor reshape(const Tensor& x, std::vector<size_t> shape) {
    if (shape_numel(shape) != x.size()) {
        throw DimensionError("reshape: " + shape_string(x.shape()) + " has " +
                             std::to_string(x.size()) + " elements, target " +
                             shape_string(shape) + " needs " +
                             std::to_string(shape_numel(shape)));
    }
    std::vector<float> out(x.values().begin(), x.values().end());
    return op_output(std::move(shape), std::move(out), {x}, [x](detail::TensorImpl* self) {
        return [x, self]() {
            auto* xi = x.impl();
            xi->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) xi->grad[i] += self->grad[i];
        };
    });
}

Tensor log_softmax(const Tensor& x) {
    if (x.rank() != 1 && x.rank() != 2) {
        throw DimensionError("log_softmax: expected rank 1 or 2, got " + shape_string(x.shape()));
    }
    const size_t rows = x.rank() == 2 ? x.shape()[0] : 1;
    const size_t cols = x.rank() == 2 ? x.shape()[1] : x.shape()[0];
    std::vector<float> out(x.size());
    for (size_t i = 0; i < rows; ++i) {
        const float* row = x.data() + i * cols;
        float mx = row[0];
        for (size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (size_t j = 0; j < cols; ++j) lse += std::exp(double(row[j]) - double(mx));
        const double log_z = double(mx) + std::log(lse);
        for (size_t j = 0; j < cols; ++j) out[i * cols + j] = float(double(row[j]) - log_z);
    }
    return op_output(x.shape(), std::move(out), {x}, [x, rows, cols](detail::TensorImpl* self) {
        return [x, rows, cols, self]() {
            // dX_j = dY_j - softmax_j * sum(dY)
            auto* xi = x.impl();
            xi->ensure_grad();
            for (size_t i = 0; i < rows; ++i) {
                const float* gy = self->grad.data() + i * cols;
                const float* y = self->data.data() + i * cols;
                double gsum = 0.0;
                for (size_t j = 0; j < cols; ++j) gsum += double(gy[j]);
                for (size_t j = 0; j < cols; ++j) {
                    xi->grad[i * cols + j] += float(double(gy[j]) - std::exp(double(y[j])) * gsum);
                }
            }
        };
    });
}

Tensor nll_mean(const Tensor& logp, const std::vector<size_t>& labels) {
    if (logp.rank() != 1 && logp.rank() != 2) {
        throw DimensionError("nll_mean: expected rank 1 or 2, got " + shape_string(logp.shape()));
    }
    const size_t rows = logp.rank() == 2 ? logp.shape()[0] : 1;
    const size_t cols = logp.rank() == 2 ? logp.shape()[1] : logp.shape()[0];
    if (labels.size() != rows) {
        throw DimensionError("nll_mean: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(rows) + " rows");
    }
    for (size_t i = 0; i < rows; ++i) {
        if (labels[i] >= cols) {
            throw IndexError("nll_mean: label " + std::to_string(labels[i]) +
                             " out of range for " + std::to_string(cols) + " classes");
        }
    }
    double acc = 0.0;
    for (size_t i = 0; i < rows; ++i) acc -= double(logp.data()[i * cols + labels[i]]);
    const float value = float(acc / double(rows));
    auto labels_copy = labels;
    return op_output({1}, {value}, {logp},
                     [logp, labels_copy, rows, cols](detail::TensorImpl* self) {
                         return [logp, labels_copy, rows, cols, self]() {
                             auto* li = logp.impl();
                             li->ensure_grad();
                             const float g = self->grad[0] / float(rows);
                             for (size_t i = 0; i < rows; ++i) {
                                 li->grad[i * cols + labels_copy[i]] -= g;
                             }
                         };
                     });
}

Tensor cross_entropy(const Tensor& logits, size_t label) {
    check_rank(logits, 1, "cross_entropy");
    if (label >= logits.shape()[0]) {
        throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(logits.shape()[0]) + " logits");
    }
    return nll_mean(log_softmax(logits), {label});
}

Tensor pairwise_sq_dist(const Tensor& queries, const Tensor& prototypes) {
    check_rank(queries, 2, "pairwise_sq_dist");
    check_rank(prototypes, 2, "pairwise_sq_dist");
    const size_t q = queries.shape()[0], d = queries.shape()[1];
    const size_t c = prototypes.shape()[0];
    if (prototypes.shape()[1] != d) {
        throw DimensionError("pairwise_sq_dist: feature dims disagree, " +
                             shape_string(queries.shape()) + " vs " +
                             shape_string(prototypes.shape()));
    }
    std::vector<float> out(q * c);
    for (size_t i = 0; i < q; ++i) {
        for (size_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (size_t t = 0; t < d; ++t) {
                const double diff = double(queries.data()[i * d + t]) -
                                    double(prototypes.data()[j * d + t]);
                acc += diff * diff;
            }
            out[i * c + j] = float(acc);
        }
    }
    return op_output({q, c}, std::move(out), {queries, prototypes},
                     [queries, prototypes, q, c, d](detail::TensorImpl* self) {
                         return [queries, prototypes, q, c, d, self]() {
                             const float* pq = queries.data();
                             const float* pp = prototypes.data();
                             if (wants_grad(queries)) {
                                 auto* qi = queries.impl();
                                 qi->ensure_grad();
                                 for (size_t i = 0; i < q; ++i) {
                                     for (size_t t = 0; t < d; ++t) {
                                         double acc = 0.0;
                                         for (size_t j = 0; j < c; ++j) {
                                             acc += double(self->grad[i * c + j]) * 2.0 *
                                                    (double(pq[i * d + t]) - double(pp[j * d + t]));
                                         }
                                         qi->grad[i * d + t] += float(acc);
                                     }
                                 }
                             }
                             if (wants_grad(prototypes)) {
                                 auto* pi = prototypes.impl();
                                 pi->ensure_grad();
                                 for (size_t j = 0; j < c; ++j) {
                                     for (size_t t = 0; t < d; ++t) {
                                         double acc = 0.0;
                                         for (size_t i = 0; i < q; ++i) {
                                             acc -= double(self->grad[i * c + j]) * 2.0 *
                                                    (double(pq[i * d + t]) - double(pp[j * d + t]));
                                         }
                                         pi->grad[j * d + t] += float(acc);
                                     }
                                 }
                             }
                         };
                     });
}

Tensor mean_rows(const Tensor& x) {
    check_rank(x, 2, "mean_rows");
    const size_t n = x.shape()[0], d = x.shape()[1];
    if (n == 0) throw ContractError("mean_rows: empty input");
    std::vector<float> out(d);
    for (size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += double(x.data()[i * d + j]);
        out[j] = float(acc / double(n));
    }
    return op_output({d}, std::move(out), {x}, [x, n, d](detail::TensorImpl* self) {
        return [x, n, d, self]() {
            auto* xi = x.impl();
            xi->ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                for (size_t j = 0; j < d; ++j) {
                    xi->grad[i * d + j] += self->grad[j] / float(n);
                }
            }
        };
    });
}

Tensor class_means(const Tensor& x, const std::vector<size_t>& labels, size_t n_classes) {
    check_rank(x, 2, "class_means");
    const size_t n = x.shape()[0], d = x.shape()[1];
    if (labels.size() != n) {
        throw DimensionError("class_means: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
    }
    std::vector<size_t> counts(n_classes, 0);
    for (size_t l : labels) {
        if (l >= n_classes) {
            throw IndexError("class_means: label " + std::to_string(l) + " out of range for " +
                             std::to_string(n_classes) + " classes");
        }
        counts[l]++;
    }
    for (size_t c = 0; c < n_classes; ++c) {
        if (counts[c] == 0) {
            throw ContractError("class_means: class " + std::to_string(c) + " has no rows");
        }
    }
    std::vector<double> acc(n_classes * d, 0.0);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < d; ++j) acc[labels[i] * d + j] += double(x.data()[i * d + j]);
    }
    std::vector<float> out(n_classes * d);
    for (size_t c = 0; c < n_classes; ++c) {
        for (size_t j = 0; j < d; ++j) out[c * d + j] = float(acc[c * d + j] / double(counts[c]));
    }
    auto labels_copy = labels;
    return op_output({n_classes, d}, std::move(out), {x},
                     [x, labels_copy, counts, n, d](detail::TensorImpl* self) {
                         return [x, labels_copy, counts, n, d, self]() {
                             auto* xi = x.impl();
                             xi->ensure_grad();
                             for (size_t i = 0; i < n; ++i) {
                                 const size_t c = labels_copy[i];
                                 for (size_t j = 0; j < d; ++j) {
                                     xi->grad[i * d + j] +=
                                         self->grad[c * d + j] / float(counts[c]);
                                 }
                             }
                         };
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    check_rank(x, 2, "layer_norm");
    check_rank(gamma, 1, "layer_norm");
    check_rank(beta, 1, "layer_norm");
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (gamma.shape()[0] != cols || beta.shape()[0] != cols) {
        throw DimensionError("layer_norm: affine shape " + shape_string(gamma.shape()) + "/" +
                             shape_string(beta.shape()) + " vs features " +
                             shape_string(x.shape()));
    }
    std::vector<float> out(x.size());
    // normalized activations and inverse stddevs are reused by backward
    auto xhat = std::make_shared<std::vector<float>>(x.size());
    auto inv_std = std::make_shared<std::vector<float>>(rows);
    for (size_t i = 0; i < rows; ++i) {
        const float* row = x.data() + i * cols;
        double mean = 0.0;
        for (size_t j = 0; j < cols; ++j) mean += double(row[j]);
        mean /= double(cols);
        double var = 0.0;
        for (size_t j = 0; j < cols; ++j) {
            const double dvi = double(row[j]) - mean;
            var += dvi * dvi;
        }
        var /= double(cols);
        const double istd = 1.0 / std::sqrt(var + double(eps));
        (*inv_std)[i] = float(istd);
        for (size_t j = 0; j < cols; ++j) {
            const float h = float((double(row[j]) - mean) * istd);
            (*xhat)[i * cols + j] = h;
            out[i * cols + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    return op_output(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat, inv_std, rows, cols](detail::TensorImpl* self) {
            return [x, gamma, beta, xhat, inv_std, rows, cols, self]() {
                const float* g = self->grad.data();
                if (wants_grad(gamma)) {
                    auto* gi = gamma.impl();
                    gi->ensure_grad();
                    for (size_t j = 0; j < cols; ++j) {
                        double acc = 0.0;
                        for (size_t i = 0; i < rows; ++i) {
                            acc += double(g[i * cols + j]) * double((*xhat)[i * cols + j]);
                        }
                        gi->grad[j] += float(acc);
                    }
                }
                if (wants_grad(beta)) {
                    auto* bi = beta.impl();
                    bi->ensure_grad();
                    for (size_t j = 0; j < cols; ++j) {
                        double acc = 0.0;
                        for (size_t i = 0; i < rows; ++i) acc += double(g[i * cols + j]);
                        bi->grad[j] += float(acc);
                    }
                }
                if (wants_grad(x)) {
                    auto* xi = x.impl();
                    xi->ensure_grad();
                    for (size_t i = 0; i < rows; ++i) {
                        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                        for (size_t j = 0; j < cols; ++j) {
                            const double dxh = double(g[i * cols + j]) * double(gamma.data()[j]);
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * double((*xhat)[i * cols + j]);
                        }
                        mean_dxhat /= double(cols);
                        mean_dxhat_xhat /= double(cols);
                        for (size_t j = 0; j < cols; ++j) {
                            const double dxh = double(g[i * cols + j]) * double(gamma.data()[j]);
                            xi->grad[i * cols + j] +=
                                float(double((*inv_std)[i]) *
                                      (dxh - mean_dxhat -
                                       double((*xhat)[i * cols + j]) * mean_dxhat_xhat));
                        }
                    }
                }
            };
        });
}

}  // namespace fspool
