#ifndef LOIRE_CORE_OPS_HPP_
#define LOIRE_CORE_OPS_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "loire/core/autograd.hpp"

// Differentiable tensor operations. Matrices are row-major [rows, cols];
// feature maps are [channels, height, width]; vectors used as matrix rows are
// [1, n].

namespace loire::ag {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

inline void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw ShapeError(std::string(op) + ": " + what);
}

template <typename T>
void require_matrix(const Var<T>& a, const char* op) {
  require(a.rank() == 2, op, "expected a matrix, got " + shape_str(a.shape()));
}

}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(b.dim(0) == k, "matmul",
                  "inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  MatMap<T>(out.data(), m, n).noalias() =
      CMatMap<T>(a.value().data(), m, k) * CMatMap<T>(b.value().data(), k, n);
  return make_node<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    CMatMap<T> g(self.grad.data(), m, n);
    if (pa.requires_grad)
      MatMap<T>(pa.grad.data(), m, k).noalias() += g * CMatMap<T>(pb.value.data(), k, n).transpose();
    if (pb.requires_grad)
      MatMap<T>(pb.grad.data(), k, n).noalias() += CMatMap<T>(pa.value.data(), m, k).transpose() * g;
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  detail::require_matrix(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.size());
  MatMap<T>(out.data(), n, m) = CMatMap<T>(a.value().data(), m, n).transpose();
  return make_node<T>({n, m}, std::move(out), {a}, [m, n](Node<T>& self) {
    MatMap<T>(self.parents[0]->grad.data(), m, n) += CMatMap<T>(self.grad.data(), n, m).transpose();
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  detail::require(shape_size(shape) == a.size(), "reshape",
                  shape_str(a.shape()) + " -> " + shape_str(shape));
  return make_node<T>(std::move(shape), a.value(), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_node<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "sub", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_node<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.parents[0]->grad[i] += self.grad[i];
    if (self.parents[1]->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.parents[1]->grad[i] -= self.grad[i];
  });
}

/// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_node<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
  });
}

/// scale * a + shift, elementwise.
template <typename T>
Var<T> affine(const Var<T>& a, T scale, T shift = T(0)) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * a[i] + shift;
  return make_node<T>(a.shape(), std::move(out), {a}, [scale](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * self.grad[i];
  });
}

/// a[m, n] + bias broadcast over rows; bias holds n values.
template <typename T>
Var<T> add_bias(const Var<T>& a, const Var<T>& bias) {
  detail::require_matrix(a, "add_bias");
  const int m = a.dim(0), n = a.dim(1);
  detail::require(static_cast<int>(bias.size()) == n, "add_bias", "bias size mismatch");
  std::vector<T> out(a.value());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[i * n + j] += bias[j];
  return make_node<T>(a.shape(), std::move(out), {a, bias}, [m, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) pb.grad[j] += self.grad[i * n + j];
  });
}

/// a[m, n] scaled column-wise by row[1, n]: out(i, j) = a(i, j) * row(j).
template <typename T>
Var<T> mul_row(const Var<T>& a, const Var<T>& row) {
  detail::require_matrix(a, "mul_row");
  const int m = a.dim(0), n = a.dim(1);
  detail::require(static_cast<int>(row.size()) == n, "mul_row", "row size mismatch");
  std::vector<T> out(a.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] * row[j];
  return make_node<T>(a.shape(), std::move(out), {a, row}, [m, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pr = *self.parents[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const T g = self.grad[i * n + j];
        if (pa.requires_grad) pa.grad[i * n + j] += g * pr.value[j];
        if (pr.requires_grad) pr.grad[j] += g * pa.value[i * n + j];
      }
  });
}

namespace detail {
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D df_from_out_and_in) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return make_node<T>(a.shape(), std::move(out), {a}, [df_from_out_and_in](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * df_from_out_and_in(self.value[i], p.value[i]);
  });
}
}  // namespace detail

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T y, T) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T y, T) { return y * (T(1) - y); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T, T x) { return x > T(0) ? T(1) : T(0); });
}

/// Tanh approximation of GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2 / pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T, T x) {
        const T u = c * (x + k * x * x * x);
        const T t = std::tanh(u);
        const T du = c * (T(1) + T(3) * k * x * x);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
      });
}

/**
 * Row-wise softmax. When key_mask is non-empty it must hold one flag per
 * column; columns with flag 0 receive probability exactly 0.
 */
template <typename T>
Var<T> softmax_rows(const Var<T>& a, const std::vector<char>& key_mask = {}) {
  detail::require_matrix(a, "softmax_rows");
  const int m = a.dim(0), n = a.dim(1);
  detail::require(key_mask.empty() || static_cast<int>(key_mask.size()) == n, "softmax_rows",
                  "mask size mismatch");
  std::vector<T> out(a.size(), T(0));
  for (int i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n; ++j)
      if (key_mask.empty() || key_mask[j]) mx = std::max(mx, a[i * n + j]);
    T sum = 0;
    for (int j = 0; j < n; ++j)
      if (key_mask.empty() || key_mask[j]) {
        out[i * n + j] = std::exp(a[i * n + j] - mx);
        sum += out[i * n + j];
      }
    for (int j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  return make_node<T>(a.shape(), std::move(out), {a}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (int i = 0; i < m; ++i) {
      T dot = 0;
      for (int j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      for (int j = 0; j < n; ++j) g[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

/// Per-row layer normalization with learned gain and shift.
template <typename T>
Var<T> layer_norm(const Var<T>& a, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::require_matrix(a, "layer_norm");
  const int m = a.dim(0), n = a.dim(1);
  detail::require(static_cast<int>(gamma.size()) == n && static_cast<int>(beta.size()) == n,
                  "layer_norm", "gain/shift size mismatch");
  std::vector<T> out(a.size());
  std::vector<T> xhat(a.size());
  std::vector<T> inv_std(m);
  for (int i = 0; i < m; ++i) {
    T mean = 0;
    for (int j = 0; j < n; ++j) mean += a[i * n + j];
    mean /= n;
    T var = 0;
    for (int j = 0; j < n; ++j) {
      const T d = a[i * n + j] - mean;
      var += d * d;
    }
    var /= n;
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) {
      xhat[i * n + j] = (a[i * n + j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gamma[j] + beta[j];
    }
  }
  return make_node<T>(a.shape(), std::move(out), {a, gamma, beta},
                      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                        auto& pa = *self.parents[0];
                        auto& pg = *self.parents[1];
                        auto& pb = *self.parents[2];
                        for (int i = 0; i < m; ++i) {
                          T sum_g = 0, sum_gx = 0;
                          for (int j = 0; j < n; ++j) {
                            const T gy = self.grad[i * n + j];
                            if (pg.requires_grad) pg.grad[j] += gy * xhat[i * n + j];
                            if (pb.requires_grad) pb.grad[j] += gy;
                            const T gx = gy * pg.value[j];
                            sum_g += gx;
                            sum_gx += gx * xhat[i * n + j];
                          }
                          if (!pa.requires_grad) continue;
                          for (int j = 0; j < n; ++j) {
                            const T gx = self.grad[i * n + j] * pg.value[j];
                            pa.grad[i * n + j] +=
                                inv_std[i] * (gx - sum_g / n - xhat[i * n + j] * sum_gx / n);
                          }
                        }
                      });
}

/// Row lookup: table[V, d] gathered at ids -> [ids.size(), d].
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  detail::require_matrix(table, "embedding");
  const int vocab = table.dim(0), d = table.dim(1);
  const int L = static_cast<int>(ids.size());
  std::vector<T> out(static_cast<std::size_t>(L) * d);
  for (int i = 0; i < L; ++i) {
    detail::require(ids[i] >= 0 && ids[i] < vocab, "embedding",
                    "id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    std::copy_n(table.value().begin() + static_cast<std::ptrdiff_t>(ids[i]) * d, d,
                out.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  return make_node<T>({L, d}, std::move(out), {table}, [ids, d](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[i]) * d + j] += self.grad[i * d + j];
  });
}

/// Rows [r0, r1) of a matrix.
template <typename T>
Var<T> rows(const Var<T>& a, int r0, int r1) {
  detail::require_matrix(a, "rows");
  const int n = a.dim(1);
  detail::require(0 <= r0 && r0 < r1 && r1 <= a.dim(0), "rows", "range out of bounds");
  std::vector<T> out(a.value().begin() + static_cast<std::ptrdiff_t>(r0) * n,
                     a.value().begin() + static_cast<std::ptrdiff_t>(r1) * n);
  return make_node<T>({r1 - r0, n}, std::move(out), {a}, [r0, n](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[static_cast<std::size_t>(r0) * n + i] += self.grad[i];
  });
}

/// Columns [c0, c1) of a matrix.
template <typename T>
Var<T> cols(const Var<T>& a, int c0, int c1) {
  detail::require_matrix(a, "cols");
  const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
  detail::require(0 <= c0 && c0 < c1 && c1 <= n, "cols", "range out of bounds");
  std::vector<T> out(static_cast<std::size_t>(m) * w);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out[i * w + j] = a[i * n + c0 + j];
  return make_node<T>({m, w}, std::move(out), {a}, [m, n, c0, w](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) g[i * n + c0 + j] += self.grad[i * w + j];
  });
}

/// Horizontal concatenation of matrices with equal row counts.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols", "no inputs");
  const int m = parts[0].dim(0);
  std::vector<int> widths;
  int total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    detail::require(p.dim(0) == m, "concat_cols", "row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<T> out(static_cast<std::size_t>(m) * total);
  int off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < widths[k]; ++j) out[i * total + off + j] = parts[k][i * widths[k] + j];
    off += widths[k];
  }
  return make_node<T>({m, total}, std::move(out), parts, [m, total, widths](Node<T>& self) {
    int off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      auto& p = *self.parents[k];
      if (p.requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < widths[k]; ++j) p.grad[i * widths[k] + j] += self.grad[i * total + off + j];
      off += widths[k];
    }
  });
}

/// Vertical concatenation of matrices with equal column counts.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows", "no inputs");
  const int n = parts[0].dim(1);
  int total = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    detail::require(p.dim(1) == n, "concat_rows", "column counts differ");
    total += p.dim(0);
    out.insert(out.end(), p.value().begin(), p.value().end());
  }
  return make_node<T>({total, n}, std::move(out), parts, [](Node<T>& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[off + i];
      off += p->value.size();
    }
  });
}

/// Mean over rows: [m, n] -> [1, n].
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  detail::require_matrix(a, "mean_rows");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(n, T(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j] += a[i * n + j];
  for (auto& v : out) v /= m;
  return make_node<T>({1, n}, std::move(out), {a}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g[i * n + j] += self.grad[j] / m;
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value()) s += v;
  return make_node<T>({1}, {s}, {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (auto& v : g) v += self.grad[0];
  });
}

/// Sum of a list of scalars.
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& terms) {
  detail::require(!terms.empty(), "add_n", "no inputs");
  T s = 0;
  for (const auto& t : terms) {
    detail::require(t.size() == 1, "add_n", "terms must be scalars");
    s += t[0];
  }
  return make_node<T>({1}, {s}, terms, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad[0] += self.grad[0];
  });
}

/// Euclidean norm of all entries. The subgradient at zero is taken as zero.
template <typename T>
Var<T> l2_norm(const Var<T>& a) {
  T s = 0;
  for (T v : a.value()) s += v * v;
  const T r = std::sqrt(s);
  return make_node<T>({1}, {r}, {a}, [](Node<T>& self) {
    const T r = self.value[0];
    if (r == T(0)) return;
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0] * p.value[i] / r;
  });
}

/// -log softmax(logits)[target] for a logit vector of any shape.
template <typename T>
Var<T> nll_from_logits(const Var<T>& logits, int target) {
  const int n = static_cast<int>(logits.size());
  detail::require(target >= 0 && target < n, "nll_from_logits", "target out of range");
  T mx = *std::max_element(logits.value().begin(), logits.value().end());
  T sum = 0;
  for (T v : logits.value()) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  return make_node<T>({1}, {lse - logits[target]}, {logits}, [target, lse](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      const T prob = std::exp(p.value[i] - lse);
      p.grad[i] += self.grad[0] * (prob - (static_cast<int>(i) == target ? T(1) : T(0)));
    }
  });
}

/// Mean row-wise cross-entropy of logits[m, V] against one target per row.
template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<int>& targets) {
  detail::require_matrix(logits, "cross_entropy_rows");
  const int m = logits.dim(0), V = logits.dim(1);
  detail::require(static_cast<int>(targets.size()) == m, "cross_entropy_rows", "target count");
  std::vector<T> probs(logits.size());
  T loss = 0;
  for (int i = 0; i < m; ++i) {
    detail::require(targets[i] >= 0 && targets[i] < V, "cross_entropy_rows", "target out of range");
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < V; ++j) mx = std::max(mx, logits[i * V + j]);
    T sum = 0;
    for (int j = 0; j < V; ++j) sum += std::exp(logits[i * V + j] - mx);
    const T lse = mx + std::log(sum);
    for (int j = 0; j < V; ++j) probs[i * V + j] = std::exp(logits[i * V + j] - lse);
    loss += lse - logits[i * V + targets[i]];
  }
  loss /= m;
  return make_node<T>({1}, {loss}, {logits}, [m, V, targets, probs = std::move(probs)](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    const T s = self.grad[0] / m;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < V; ++j)
        g[i * V + j] += s * (probs[i * V + j] - (j == targets[i] ? T(1) : T(0)));
  });
}

/// Inverted dropout. Identity when rate is zero.
template <typename T, typename Rng>
Var<T> dropout(const Var<T>& a, T rate, Rng& rng) {
  if (rate <= T(0)) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T scale = T(1) / (T(1) - rate);
  std::vector<T> mask(a.size());
  for (auto& v : mask) v = keep(rng) ? scale : T(0);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * mask[i];
  return make_node<T>(a.shape(), std::move(out), {a}, [mask = std::move(mask)](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

/**
 * 2-D convolution of a single feature map x[C, H, W] with weights
 * w[O, C, k, k] and bias b[O]; zero padding, square stride.
 * Lowered to im2col followed by one matrix product.
 */
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  detail::require(x.rank() == 3, "conv2d", "input must be [C,H,W], got " + shape_str(x.shape()));
  detail::require(w.rank() == 4, "conv2d", "weights must be [O,C,k,k]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), k = w.dim(2);
  detail::require(w.dim(1) == C && w.dim(3) == k, "conv2d",
                  "weights " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  detail::require(static_cast<int>(b.size()) == O, "conv2d", "bias size mismatch");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  detail::require(Ho > 0 && Wo > 0, "conv2d", "empty output");
  const int K = C * k * k, P = Ho * Wo;

  // col[K, P]; index map keeps the lowering reversible for the backward pass.
  std::vector<T> col(static_cast<std::size_t>(K) * P, T(0));
  std::vector<int> src(static_cast<std::size_t>(K) * P, -1);
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int row = (c * k + ky) * k + kx;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const int s = (c * H + iy) * W + ix;
            src[static_cast<std::size_t>(row) * P + oy * Wo + ox] = s;
            col[static_cast<std::size_t>(row) * P + oy * Wo + ox] = x[s];
          }
        }
      }
  std::vector<T> out(static_cast<std::size_t>(O) * P);
  MatMap<T> om(out.data(), O, P);
  om.noalias() = CMatMap<T>(w.value().data(), O, K) * CMatMap<T>(col.data(), K, P);
  for (int o = 0; o < O; ++o)
    for (int p = 0; p < P; ++p) out[static_cast<std::size_t>(o) * P + p] += b[o];

  return make_node<T>(
      {O, Ho, Wo}, std::move(out), {x, w, b},
      [O, K, P, col = std::move(col), src = std::move(src)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        CMatMap<T> g(self.grad.data(), O, P);
        if (pw.requires_grad)
          MatMap<T>(pw.grad.data(), O, K).noalias() += g * CMatMap<T>(col.data(), K, P).transpose();
        if (pb.requires_grad)
          for (int o = 0; o < O; ++o)
            for (int p = 0; p < P; ++p) pb.grad[o] += self.grad[static_cast<std::size_t>(o) * P + p];
        if (px.requires_grad) {
          std::vector<T> dcol(static_cast<std::size_t>(K) * P);
          MatMap<T>(dcol.data(), K, P).noalias() = CMatMap<T>(pw.value.data(), O, K).transpose() * g;
          for (std::size_t i = 0; i < dcol.size(); ++i)
            if (src[i] >= 0) px.grad[src[i]] += dcol[i];
        }
      });
}

}  // namespace loire::ag

#endif  // LOIRE_CORE_OPS_HPP_
