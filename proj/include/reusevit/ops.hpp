// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op computes its forward value, reports
// forward FLOPs, and, when a tape is active and an input requires a
// gradient, records the adjoint closure on that tape.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <unordered_set>
#include <vector>

#include "reusevit/error.hpp"
#include "reusevit/flops.hpp"
#include "reusevit/tensor.hpp"

namespace reusevit {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T, class... Ts>
Tape<T>* tape_for(const Ts&... inputs) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return nullptr;
  return (inputs.requires_grad() || ...) ? tape : nullptr;
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class T>
Tensor<T> result(Shape shape, std::vector<T> data, Tape<T>* tape) {
  return Tensor<T>(std::move(shape), std::move(data), tape != nullptr);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n, T{0});
  if (m > 0 && n > 0 && k > 0) {
    detail::MutMap<T>(out.data(), m, n).noalias() =
        detail::ConstMap<T>(a.data().data(), m, k) * detail::ConstMap<T>(b.data().data(), k, n);
  }
  record_flops(OpKind::matmul, m, k, n);
  auto* tape = detail::tape_for<T>(a, b);
  auto r = detail::result<T>({m, n}, std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), rn = r.node(), m, k, n] {
      if (rn->grad.empty() || m == 0 || n == 0 || k == 0) return;
      detail::ConstMap<T> g(rn->grad.data(), m, n);
      if (an->requires_grad)
        detail::MutMap<T>(an->grad_buffer(), m, k).noalias() += g * detail::ConstMap<T>(bn->data.data(), k, n).transpose();
      if (bn->requires_grad)
        detail::MutMap<T>(bn->grad_buffer(), k, n).noalias() += detail::ConstMap<T>(an->data.data(), m, k).transpose() * g;
    });
  }
  return r;
}

/// x[m x n] + b[n] broadcast over rows.
template <class T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_matrix(x, "add_row_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (b.numel() != n) throw ShapeError("add_row_bias: bias length mismatch");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  record_flops(OpKind::elementwise, m * n);
  auto* tape = detail::tape_for<T>(x, b);
  auto r = detail::result<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), bn = b.node(), rn = r.node(), m, n] {
      if (rn->grad.empty()) return;
      if (xn->requires_grad) {
        T* gx = xn->grad_buffer();
        for (std::size_t i = 0; i < m * n; ++i) gx[i] += rn->grad[i];
      }
      if (bn->requires_grad) {
        T* gb = bn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += rn->grad[i * n + j];
      }
    });
  }
  return r;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_row_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  record_flops(OpKind::elementwise, out.size());
  auto* tape = detail::tape_for<T>(a, b);
  auto r = detail::result<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), rn = r.node()] {
      if (rn->grad.empty()) return;
      for (auto* n : {an.get(), bn.get()})
        if (n->requires_grad) {
          T* g = n->grad_buffer();
          for (std::size_t i = 0; i < rn->grad.size(); ++i) g[i] += rn->grad[i];
        }
    });
  }
  return r;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  record_flops(OpKind::elementwise, out.size());
  auto* tape = detail::tape_for<T>(a, b);
  auto r = detail::result<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), rn = r.node()] {
      if (rn->grad.empty()) return;
      if (an->requires_grad) {
        T* g = an->grad_buffer();
        for (std::size_t i = 0; i < rn->grad.size(); ++i) g[i] += rn->grad[i];
      }
      if (bn->requires_grad) {
        T* g = bn->grad_buffer();
        for (std::size_t i = 0; i < rn->grad.size(); ++i) g[i] -= rn->grad[i];
      }
    });
  }
  return r;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  record_flops(OpKind::elementwise, out.size());
  auto* tape = detail::tape_for<T>(a, b);
  auto r = detail::result<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), rn = r.node()] {
      if (rn->grad.empty()) return;
      const auto n = rn->grad.size();
      if (an->requires_grad) {
        T* g = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += rn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        T* g = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += rn->grad[i] * an->data[i];
      }
    });
  }
  return r;
}

/// s * x + c
template <class T>
Tensor<T> affine(const Tensor<T>& x, T s, T c = T{0}) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i] + c;
  record_flops(OpKind::elementwise, out.size());
  auto* tape = detail::tape_for<T>(x);
  auto r = detail::result<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), rn = r.node(), s] {
      if (rn->grad.empty()) return;
      T* g = xn->grad_buffer();
      for (std::size_t i = 0; i < rn->grad.size(); ++i) g[i] += s * rn->grad[i];
    });
  }
  return r;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return affine(x, s);
}

namespace detail {

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, OpKind kind, F f, DF df_from_xy) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  record_flops(kind, out.size());
  auto* tape = tape_for<T>(x);
  auto r = result<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), rn = r.node(), df_from_xy] {
      if (rn->grad.empty()) return;
      T* g = xn->grad_buffer();
      for (std::size_t i = 0; i < rn->grad.size(); ++i)
        g[i] += rn->grad[i] * df_from_xy(xn->data[i], rn->data[i]);
    });
  }
  return r;
}

}  // namespace detail

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary(
      x, OpKind::gelu,
      [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        return cdf + v * pdf;
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, OpKind::sigmoid, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, OpKind::elementwise, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Elementwise max; on ties the gradient goes to `a`.
template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "maximum");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a[i], b[i]);
  record_flops(OpKind::elementwise, out.size());
  auto* tape = detail::tape_for<T>(a, b);
  auto r = detail::result<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), rn = r.node()] {
      if (rn->grad.empty()) return;
      for (std::size_t i = 0; i < rn->grad.size(); ++i) {
        const bool take_a = an->data[i] >= bn->data[i];
        auto& winner = take_a ? an : bn;
        if (winner->requires_grad) winner->accumulate(i, rn->grad[i]);
      }
    });
  }
  return r;
}

/// Scales row i of x[n x d] by s[i].
template <class T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_matrix(x, "row_scale");
  const std::size_t n = x.rows(), d = x.cols();
  if (s.numel() != n) throw ShapeError("row_scale: scale length must equal row count");
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] * s[i];
  record_flops(OpKind::elementwise, n * d);
  auto* tape = detail::tape_for<T>(x, s);
  auto r = detail::result<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), sn = s.node(), rn = r.node(), n, d] {
      if (rn->grad.empty()) return;
      for (std::size_t i = 0; i < n; ++i) {
        T gs = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const T g = rn->grad[i * d + j];
          if (xn->requires_grad) xn->accumulate(i * d + j, g * sn->data[i]);
          gs += g * xn->data[i * d + j];
        }
        if (sn->requires_grad) sn->accumulate(i, gs);
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.data()) s += v;
  record_flops(OpKind::elementwise, std::max<std::size_t>(x.numel(), 1));
  auto* tape = detail::tape_for<T>(x);
  auto r = detail::result<T>({1}, {s}, tape);
  if (tape) {
    tape->record([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty()) return;
      T* g = xn->grad_buffer();
      for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += rn->grad[0];
    });
  }
  return r;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Normalisation

/// Layer normalisation over the last dimension.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layernorm: parameter length mismatch");
  std::vector<T> out(n * d), xhat(n * d), inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data().data() + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * inv_std[i];
      out[i * d + j] = gamma[j] * xhat[i * d + j] + beta[j];
    }
  }
  record_flops(OpKind::layernorm, n, d);
  auto* tape = detail::tape_for<T>(x, gamma, beta);
  auto r = detail::result<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), gn = gamma.node(), bn = beta.node(), rn = r.node(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), n, d] {
      if (rn->grad.empty()) return;
      std::vector<T> dxhat(d);
      for (std::size_t i = 0; i < n; ++i) {
        const T* dy = rn->grad.data() + i * d;
        const T* xh = xhat.data() + i * d;
        T mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (std::size_t j = 0; j < d; ++j) {
          dxhat[j] = dy[j] * gn->data[j];
          mean_dxhat += dxhat[j];
          mean_dxhat_xhat += dxhat[j] * xh[j];
          if (gn->requires_grad) gn->accumulate(j, dy[j] * xh[j]);
          if (bn->requires_grad) bn->accumulate(j, dy[j]);
        }
        mean_dxhat /= static_cast<T>(d);
        mean_dxhat_xhat /= static_cast<T>(d);
        if (xn->requires_grad) {
          T* gx = xn->grad_buffer() + i * d;
          for (std::size_t j = 0; j < d; ++j)
            gx[j] += inv_std[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
      }
    });
  }
  return r;
}

/// Softmax along each row.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data().data() + i * d;
    const T mx = *std::max_element(row, row + d);
    T z = 0;
    for (std::size_t j = 0; j < d; ++j) z += (out[i * d + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= z;
  }
  record_flops(OpKind::softmax, n, d);
  auto* tape = detail::tape_for<T>(x);
  auto r = detail::result<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), rn = r.node(), n, d] {
      if (rn->grad.empty()) return;
      T* gx = xn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += rn->grad[i * d + j] * rn->data[i * d + j];
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += rn->data[i * d + j] * (rn->grad[i * d + j] - dot);
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Similarity

/// Cosine similarity of corresponding rows. A zero-norm row yields 0 with a
/// zero gradient.
template <class T>
Tensor<T> row_cosine(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "row_cosine");
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<T> out(n), na(n), nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    T dot = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T x = a[i * d + j], y = b[i * d + j];
      dot += x * y;
      aa += x * x;
      bb += y * y;
    }
    na[i] = std::sqrt(aa);
    nb[i] = std::sqrt(bb);
    out[i] = (na[i] == T(0) || nb[i] == T(0)) ? T(0) : dot / (na[i] * nb[i]);
  }
  record_flops(OpKind::cosine, n, d);
  auto* tape = detail::tape_for<T>(a, b);
  auto r = detail::result<T>(a.rank() == 2 ? Shape{n} : Shape{1}, std::move(out), tape);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), rn = r.node(), na = std::move(na), nb = std::move(nb), n, d] {
      if (rn->grad.empty()) return;
      for (std::size_t i = 0; i < n; ++i) {
        if (na[i] == T(0) || nb[i] == T(0)) continue;
        const T g = rn->grad[i], c = rn->data[i];
        for (std::size_t j = 0; j < d; ++j) {
          const T x = an->data[i * d + j], y = bn->data[i * d + j];
          if (an->requires_grad) an->accumulate(i * d + j, g * (y / (na[i] * nb[i]) - c * x / (na[i] * na[i])));
          if (bn->requires_grad) bn->accumulate(i * d + j, g * (x / (na[i] * nb[i]) - c * y / (nb[i] * nb[i])));
        }
      }
    });
  }
  return r;
}

/// Reshape that preserves gradient flow (identity adjoint).
template <class T>
Tensor<T> reshape_keep_grad(const Tensor<T>& x, Shape shape = {}) {
  if (shape.empty()) shape = {1, x.numel()};
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: element count mismatch");
  auto* tape = detail::tape_for<T>(x);
  auto r = detail::result<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), tape);
  if (tape) {
    tape->record([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty()) return;
      T* g = xn->grad_buffer();
      for (std::size_t i = 0; i < rn->grad.size(); ++i) g[i] += rn->grad[i];
    });
  }
  return r;
}

/// Cosine similarity of two tensors viewed as flat vectors; returns a scalar.
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.numel() != v.numel()) throw ShapeError("cosine_similarity: length mismatch");
  return row_cosine(reshape_keep_grad(u), reshape_keep_grad(v));
}

// ---------------------------------------------------------------------------
// Row movement (stream compaction building blocks)

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<T> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n)
      throw IndexError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " + std::to_string(n) +
                       " rows");
    std::copy_n(x.data().data() + idx[r] * d, d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  auto* tape = detail::tape_for<T>(x);
  auto r = detail::result<T>({idx.size(), d}, std::move(out), tape);
  if (tape) {
    tape->record([xn = x.node(), rn = r.node(), idx, d] {
      if (rn->grad.empty()) return;
      T* g = xn->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += rn->grad[r * d + j];
    });
  }
  return r;
}

/// Copy of `dst` whose rows `idx[r]` are replaced by `src` row r.
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& dst, const std::vector<std::size_t>& idx, const Tensor<T>& src) {
  detail::require_matrix(dst, "scatter_rows");
  const std::size_t n = dst.rows(), d = dst.cols();
  if (src.numel() != idx.size() * d || (idx.size() > 0 && src.cols() != d))
    throw ShapeError("scatter_rows: source shape " + shape_str(src.shape()) + " does not match " +
                     std::to_string(idx.size()) + " rows of width " + std::to_string(d));
  std::unordered_set<std::size_t> seen;
  std::vector<T> out(dst.data().begin(), dst.data().end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw IndexError("scatter_rows: index " + std::to_string(idx[r]) + " out of range");
    if (!seen.insert(idx[r]).second)
      throw ContractError("scatter_rows: duplicate index " + std::to_string(idx[r]));
    std::copy_n(src.data().data() + r * d, d, out.begin() + static_cast<std::ptrdiff_t>(idx[r] * d));
  }
  auto* tape = detail::tape_for<T>(dst, src);
  auto r = detail::result<T>(dst.shape(), std::move(out), tape);
  if (tape) {
    tape->record([dn = dst.node(), sn = src.node(), rn = r.node(), idx, n, d] {
      if (rn->grad.empty()) return;
      std::vector<char> replaced(n, 0);
      for (auto i : idx) replaced[i] = 1;
      if (dn->requires_grad)
        for (std::size_t i = 0; i < n; ++i)
          if (!replaced[i])
            for (std::size_t j = 0; j < d; ++j) dn->accumulate(i * d + j, rn->grad[i * d + j]);
      if (sn->requires_grad)
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) sn->accumulate(r * d + j, rn->grad[idx[r] * d + j]);
    });
  }
  return r;
}

/// Stacks matrices with equal column counts.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t n = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.cols() != d) throw ShapeError("concat_rows: column mismatch");
    n += p.rows();
    grad = grad || p.requires_grad();
  }
  std::vector<T> out;
  out.reserve(n * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tape<T>* tape = grad ? active_tape<T>() : nullptr;
  auto r = detail::result<T>({n, d}, std::move(out), tape);
  if (tape) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record([nodes = std::move(nodes), rn = r.node()] {
      if (rn->grad.empty()) return;
      std::size_t offset = 0;
      for (const auto& p : nodes) {
        if (p->requires_grad) {
          T* g = p->grad_buffer();
          for (std::size_t i = 0; i < p->data.size(); ++i) g[i] += rn->grad[offset + i];
        }
        offset += p->data.size();
      }
    });
  }
  return r;
}

/// Side-by-side concatenation of matrices (or rank-1 columns) with equal row counts.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t n = parts.front().rank() == 2 ? parts.front().rows() : parts.front().numel();
  std::vector<std::size_t> widths;
  bool grad = false;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t rows = p.rank() == 2 ? p.rows() : p.numel();
    if (rows != n) throw ShapeError("concat_cols: row mismatch");
    widths.push_back(p.rank() == 2 ? p.cols() : 1);
    total += widths.back();
    grad = grad || p.requires_grad();
  }
  std::vector<T> out(n * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + col + j] = parts[k][i * widths[k] + j];
    col += widths[k];
  }
  Tape<T>* tape = grad ? active_tape<T>() : nullptr;
  auto r = detail::result<T>({n, total}, std::move(out), tape);
  if (tape) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record([nodes = std::move(nodes), widths = std::move(widths), rn = r.node(), n, total] {
      if (rn->grad.empty()) return;
      std::size_t c = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k]->requires_grad)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j)
              nodes[k]->accumulate(i * widths[k] + j, rn->grad[i * total + c + j]);
        c += widths[k];
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention (fused)

template <class T>
struct AttentionResult {
  Tensor<T> out;         // [n x D] concatenated head outputs (before output projection)
  Tensor<T> cls_attention;  // [n-1] CLS-row weights on the other tokens, averaged over heads
};

/// Scaled dot-product attention over a packed [n x 3D] Q|K|V matrix. Row 0
/// is the class token; its attention row (excluding itself) is returned as
/// a per-token importance signal.
template <class T>
AttentionResult<T> attention(const Tensor<T>& qkv, std::size_t heads) {
  detail::require_matrix(qkv, "attention");
  const std::size_t n = qkv.rows();
  if (qkv.cols() % 3 != 0) throw ShapeError("attention: packed QKV width must be divisible by 3");
  const std::size_t dim = qkv.cols() / 3;
  if (heads == 0 || dim % heads != 0) throw ShapeError("attention: dim not divisible by heads");
  const std::size_t dh = dim / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  using Mat = detail::RowMat<T>;
  detail::ConstMap<T> packed(qkv.data().data(), n, 3 * dim);
  std::vector<T> out(n * dim);
  detail::MutMap<T> out_map(out.data(), n, dim);
  std::vector<Mat> probs(heads);
  std::vector<T> cls(n > 0 ? n - 1 : 0, T{0});
  for (std::size_t h = 0; h < heads; ++h) {
    const auto q = packed.middleCols(h * dh, dh);
    const auto k = packed.middleCols(dim + h * dh, dh);
    const auto v = packed.middleCols(2 * dim + h * dh, dh);
    Mat s = (q * k.transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      const T mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp().matrix();
      s.row(i) /= s.row(i).sum();
    }
    out_map.middleCols(h * dh, dh).noalias() = s * v;
    for (std::size_t j = 1; j < n; ++j) cls[j - 1] += s(0, static_cast<Eigen::Index>(j)) / static_cast<T>(heads);
    probs[h] = std::move(s);
  }
  record_flops(OpKind::matmul, heads * n, dh, n);  // Q K^T
  record_flops(OpKind::elementwise, heads * n * n);  // 1/sqrt(dh)
  record_flops(OpKind::softmax, heads * n, n);
  record_flops(OpKind::matmul, heads * n, n, dh);  // P V

  auto* tape = detail::tape_for<T>(qkv);
  const std::size_t cls_len = cls.size();
  AttentionResult<T> res{detail::result<T>({n, dim}, std::move(out), tape),
                         detail::result<T>({cls_len}, std::move(cls), tape)};
  if (tape) {
    tape->record([qn = qkv.node(), on = res.out.node(), cn = res.cls_attention.node(), probs = std::move(probs), n,
                  dim, dh, heads, inv_sqrt] {
      if (on->grad.empty() && cn->grad.empty()) return;
      detail::ConstMap<T> packed(qn->data.data(), n, 3 * dim);
      detail::MutMap<T> g(qn->grad_buffer(), n, 3 * dim);
      for (std::size_t h = 0; h < heads; ++h) {
        const auto q = packed.middleCols(h * dh, dh);
        const auto k = packed.middleCols(dim + h * dh, dh);
        const auto v = packed.middleCols(2 * dim + h * dh, dh);
        const Mat& p = probs[h];
        Mat dout = on->grad.empty() ? Mat(Mat::Zero(n, dh))
                                    : Mat(detail::ConstMap<T>(on->grad.data(), n, dim).middleCols(h * dh, dh));
        Mat dp = dout * v.transpose();
        if (!cn->grad.empty())
          for (std::size_t j = 1; j < n; ++j) dp(0, static_cast<Eigen::Index>(j)) += cn->grad[j - 1] / static_cast<T>(heads);
        g.middleCols(2 * dim + h * dh, dh).noalias() += p.transpose() * dout;
        Mat ds(n, n);
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
          const T dot = (dp.row(i).array() * p.row(i).array()).sum();
          ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
        }
        ds *= inv_sqrt;
        g.middleCols(h * dh, dh).noalias() += ds * k;
        g.middleCols(dim + h * dh, dh).noalias() += ds.transpose() * q;
      }
    });
  }
  return res;
}

}  // namespace reusevit
