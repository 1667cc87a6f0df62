// SPDX-License-Identifier: Apache-2.0
//
// Differentiable op set. No implicit broadcasting: every op checks shapes
// exactly, and row-vector arithmetic (bias add) is its own named op.
// All reductions run sequentially left to right so results are
// bit-reproducible.

#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "lgpool/numerics/autograd.hpp"

namespace lgp {

namespace kernel {

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T. B is transposed into scratch first so the
// inner loop runs over contiguous memory like gemm_nn.
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    std::vector<T> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm_nn(m, k, n, a, bt.data(), c);
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace kernel

namespace detail {

template <class T>
void require_matrix(const Var<T>& v, const char* op) {
    if (v.value().rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(v.shape()));
    }
}

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <class T>
Tensor<T>* grad_of(Node<T>& n, std::size_t i) {
    auto& p = *n.parents[i];
    return p.requires_grad ? &p.ensure_grad() : nullptr;
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
    if (b.value().dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor<T> out({m, n});
    kernel::gemm_nn(m, k, n, a.value().data().data(), b.value().data().data(), out.data().data());
    return make_op<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        const auto& A = self.parents[0]->value;
        const auto& B = self.parents[1]->value;
        if (auto* ga = detail::grad_of(self, 0))
            kernel::gemm_nt(m, n, k, self.grad.data().data(), B.data().data(), ga->data().data());
        if (auto* gb = detail::grad_of(self, 1))
            kernel::gemm_tn(m, k, n, A.data().data(), self.grad.data().data(), gb->data().data());
    });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
    detail::require_matrix(a, "transpose");
    return make_op<T>("transpose", transposed(a.value()), {a}, [](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            const auto gt = transposed(self.grad);
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += gt[i];
        }
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    return make_op<T>("reshape", a.value().reshaped(std::move(shape)), {a}, [](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "add");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return make_op<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p)
            if (auto* g = detail::grad_of(self, p))
                for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "sub");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return make_op<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "mul");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_op<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
        const auto& A = self.parents[0]->value;
        const auto& B = self.parents[1]->value;
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * B[i];
        if (auto* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * A[i];
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v *= s;
    return make_op<T>("scale", std::move(out), {a}, [s](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * s;
    });
}

/// x[n,d] + b[d] added to every row (bias add).
template <class T>
Var<T> add_row(const Var<T>& x, const Var<T>& b) {
    detail::require_matrix(x, "add_row");
    const std::size_t n = x.value().dim(0), d = x.value().dim(1);
    if (b.numel() != d) {
        throw ShapeError("add_row: row vector " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
    }
    Tensor<T> out = x.value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] += b.value()[j];
    return make_op<T>("add_row", std::move(out), {x, b}, [n, d](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j];
    });
}

template <class T>
Var<T> sum(const Var<T>& a) {
    T acc = 0;
    for (auto v : a.value().data()) acc += v;
    return make_op<T>("sum", Tensor<T>::scalar(acc), {a}, [](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (auto& v : g->data()) v += self.grad[0];
    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
    T acc = 0;
    for (auto v : a.value().data()) acc += v;
    const T n = static_cast<T>(a.numel());
    return make_op<T>("mean", Tensor<T>::scalar(acc / n), {a}, [n](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (auto& v : g->data()) v += self.grad[0] / n;
    });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    Tensor<T> out = a.value();
    for (auto& v : out.data()) {
        const double x = v;
        v = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    return make_op<T>("gelu", std::move(out), {a}, [](Node<T>& self) {
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        const auto& X = self.parents[0]->value;
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) {
                const double x = X[i];
                const double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
                (*g)[i] += static_cast<T>(self.grad[i] * d);
            }
    });
}

/// Row-wise softmax of a matrix.
template <class T>
Var<T> softmax_rows(const Var<T>& a) {
    detail::require_matrix(a, "softmax_rows");
    const std::size_t n = a.value().dim(0), d = a.value().dim(1);
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < n; ++i) {
        T* row = out.data().data() + i * d;
        T mx = row[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T z = 0;
        for (std::size_t j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (std::size_t j = 0; j < d; ++j) row[j] /= z;
    }
    Tensor<T> y = out;
    return make_op<T>("softmax_rows", std::move(out), {a}, [y = std::move(y), n, d](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < d; ++j) dot += self.grad[i * d + j] * y[i * d + j];
                for (std::size_t j = 0; j < d; ++j) (*g)[i * d + j] += y[i * d + j] * (self.grad[i * d + j] - dot);
            }
    });
}

namespace detail {

template <class T>
Tensor<T> log_softmax_values(const Tensor<T>& a) {
    const std::size_t n = a.dim(0), d = a.dim(1);
    Tensor<T> out = a;
    for (std::size_t i = 0; i < n; ++i) {
        T* row = out.data().data() + i * d;
        T mx = row[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T z = 0;
        for (std::size_t j = 0; j < d; ++j) z += std::exp(row[j] - mx);
        const T lse = mx + std::log(z);
        for (std::size_t j = 0; j < d; ++j) row[j] -= lse;
    }
    return out;
}

}  // namespace detail

template <class T>
Var<T> log_softmax_rows(const Var<T>& a) {
    detail::require_matrix(a, "log_softmax_rows");
    const std::size_t n = a.value().dim(0), d = a.value().dim(1);
    Tensor<T> out = detail::log_softmax_values(a.value());
    Tensor<T> y = out;
    return make_op<T>("log_softmax_rows", std::move(out), {a}, [y = std::move(y), n, d](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) {
                T s = 0;
                for (std::size_t j = 0; j < d; ++j) s += self.grad[i * d + j];
                for (std::size_t j = 0; j < d; ++j)
                    (*g)[i * d + j] += self.grad[i * d + j] - std::exp(y[i * d + j]) * s;
            }
    });
}

/// Row-wise layer normalization with affine gamma/beta of length d.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
    detail::require_matrix(x, "layer_norm");
    const std::size_t n = x.value().dim(0), d = x.value().dim(1);
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match " + shape_str(x.shape()));
    }
    Tensor<T> xhat({n, d});
    std::vector<T> inv_std(n);
    Tensor<T> out({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = x.value().data().data() + i * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        inv_std[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (row[j] - mu) * inv_std[i];
            out[i * d + j] = xhat[i * d + j] * gamma.value()[j] + beta.value()[j];
        }
    }
    return make_op<T>(
        "layer_norm", std::move(out), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](Node<T>& self) {
            const auto& G = self.parents[1]->value;
            const auto& dy = self.grad;
            if (auto* gx = detail::grad_of(self, 0)) {
                std::vector<T> dxhat(d);
                for (std::size_t i = 0; i < n; ++i) {
                    T m1 = 0, m2 = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        dxhat[j] = dy[i * d + j] * G[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[i * d + j];
                    }
                    m1 /= static_cast<T>(d);
                    m2 /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j)
                        (*gx)[i * d + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * d + j] * m2);
                }
            }
            if (auto* gg = detail::grad_of(self, 1))
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[i * d + j] * xhat[i * d + j];
            if (auto* gb = detail::grad_of(self, 2))
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[i * d + j];
        });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t count) {
    detail::require_matrix(a, "slice_rows");
    const std::size_t n = a.value().dim(0), d = a.value().dim(1);
    if (count == 0 || begin + count > n) {
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(a.shape()));
    }
    const auto src = a.value().data().subspan(begin * d, count * d);
    Tensor<T> out({count, d}, std::vector<T>(src.begin(), src.end()));
    return make_op<T>("slice_rows", std::move(out), {a}, [begin, d](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.grad.numel(); ++i) (*g)[begin * d + i] += self.grad[i];
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count) {
    detail::require_matrix(a, "slice_cols");
    const std::size_t n = a.value().dim(0), d = a.value().dim(1);
    if (count == 0 || begin + count > d) {
        throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(a.shape()));
    }
    Tensor<T> out({n, count});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.value()[i * d + begin + j];
    return make_op<T>("slice_cols", std::move(out), {a}, [n, d, begin, count](Node<T>& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < count; ++j) (*g)[i * d + begin + j] += self.grad[i * count + j];
    });
}

/// Stacks matrices with equal column counts vertically.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t d = parts[0].value().cols();
    std::size_t n = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_rows");
        if (p.value().dim(1) != d) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        n += p.value().dim(0);
    }
    std::vector<T> data;
    data.reserve(n * d);
    for (const auto& p : parts) data.insert(data.end(), p.value().vec().begin(), p.value().vec().end());
    return make_op<T>("concat_rows", Tensor<T>({n, d}, std::move(data)), parts, [](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
            const std::size_t len = self.parents[p]->value.numel();
            if (auto* g = detail::grad_of(self, p))
                for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[off + i];
            off += len;
        }
    });
}

/// Places matrices with equal row counts side by side.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t n = parts[0].value().rows();
    std::size_t d = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.value().dim(0) != n) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        d += p.value().dim(1);
    }
    Tensor<T> out({n, d});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.value().dim(1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * d + off + j] = p.value()[i * w + j];
        off += w;
    }
    return make_op<T>("concat_cols", std::move(out), parts, [n, d](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
            const std::size_t w = self.parents[p]->value.dim(1);
            if (auto* g = detail::grad_of(self, p))
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[i * d + off + j];
            off += w;
        }
    });
}

/// Mean squared error over all elements.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "mse");
    T acc = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const T r = a.value()[i] - b.value()[i];
        acc += r * r;
    }
    const T n = static_cast<T>(a.numel());
    return make_op<T>("mse", Tensor<T>::scalar(acc / n), {a, b}, [n](Node<T>& self) {
        const auto& A = self.parents[0]->value;
        const auto& B = self.parents[1]->value;
        const T c = T(2) * self.grad[0] / n;
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += c * (A[i] - B[i]);
        if (auto* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= c * (A[i] - B[i]);
    });
}

/// Mean over rows of -log softmax(logits)[label].
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    detail::require_matrix(logits, "cross_entropy");
    const std::size_t n = logits.value().dim(0), c = logits.value().dim(1);
    if (labels.size() != n) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
    }
    std::vector<int> lab(labels.begin(), labels.end());
    for (int y : lab)
        if (y < 0 || static_cast<std::size_t>(y) >= c) throw ValidationError("cross_entropy: label out of range");
    Tensor<T> logp = detail::log_softmax_values(logits.value());
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc -= logp[i * c + static_cast<std::size_t>(lab[i])];
    const T inv_n = T(1) / static_cast<T>(n);
    return make_op<T>("cross_entropy", Tensor<T>::scalar(acc * inv_n), {logits},
                      [logp = std::move(logp), lab = std::move(lab), n, c, inv_n](Node<T>& self) {
                          if (auto* g = detail::grad_of(self, 0))
                              for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < c; ++j) {
                                      const T onehot = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
                                      (*g)[i * c + j] += self.grad[0] * inv_n * (std::exp(logp[i * c + j]) - onehot);
                                  }
                      });
}

/// Mean over rows of -sum_c softmax(teacher/tau)_c * log softmax(student/tau)_c.
/// The teacher side is a constant; gradients flow only to the student.
template <class T>
Var<T> soft_cross_entropy(const Tensor<T>& teacher_logits, const Var<T>& student_logits, T tau) {
    detail::require_matrix(student_logits, "soft_cross_entropy");
    if (teacher_logits.shape() != student_logits.shape()) {
        throw ShapeError("soft_cross_entropy: teacher " + shape_str(teacher_logits.shape()) + " vs student " +
                         shape_str(student_logits.shape()));
    }
    if (!(tau > T(0))) throw ValidationError("soft_cross_entropy: tau must be positive");
    const std::size_t n = teacher_logits.dim(0), c = teacher_logits.dim(1);
    Tensor<T> ts = teacher_logits, ss = student_logits.value();
    for (auto& v : ts.data()) v /= tau;
    for (auto& v : ss.data()) v /= tau;
    Tensor<T> pt = detail::log_softmax_values(ts);
    for (auto& v : pt.data()) v = std::exp(v);
    Tensor<T> logq = detail::log_softmax_values(ss);
    T acc = 0;
    for (std::size_t i = 0; i < n * c; ++i) acc -= pt[i] * logq[i];
    const T inv_n = T(1) / static_cast<T>(n);
    return make_op<T>("soft_cross_entropy", Tensor<T>::scalar(acc * inv_n), {student_logits},
                      [pt = std::move(pt), logq = std::move(logq), n, c, inv_n, tau](Node<T>& self) {
                          if (auto* g = detail::grad_of(self, 0))
                              for (std::size_t i = 0; i < n * c; ++i)
                                  (*g)[i] += self.grad[0] * inv_n * (std::exp(logq[i]) - pt[i]) / tau;
                      });
}

}  // namespace lgp
