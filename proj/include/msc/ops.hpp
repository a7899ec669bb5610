// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every function returns a fresh tensor and, when
// recording, a backward rule that accumulates into its inputs' gradients.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "msc/error.hpp"
#include "msc/rng.hpp"
#include "msc/tensor.hpp"

namespace msc {

/// Boolean keep-mask broadcastable against the tensor it masks (true = attend).
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> keep;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For every element of `out`, the flat offset of the element of `in` it reads.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (r - in.size());
    stride[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t e = 0; e < n; ++e) {
    idx[e] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      off += stride[d];
      if (counter[d] < out[d]) break;
      off -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

/// Elementwise binary op with numpy-style broadcasting.
/// f(x, y) -> value; dfx/dfy(x, y, out) -> partial derivatives.
template <class F, class DX, class DY>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DX dfx, DY dfy) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(out_shape);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  std::vector<double> out(n);

  enum class Kind { same, suffix_b, general } kind = Kind::general;
  if (a.shape() == out_shape && b.shape() == out_shape) {
    kind = Kind::same;
  } else if (a.shape() == out_shape && is_suffix(b.shape(), out_shape)) {
    kind = Kind::suffix_b;
  }
  std::vector<std::size_t> ia, ib;
  if (kind == Kind::general) {
    ia = broadcast_index(a.shape(), out_shape);
    ib = broadcast_index(b.shape(), out_shape);
  }
  const std::size_t nb = bv.size();
  auto ja = [&](std::size_t e) { return kind == Kind::general ? ia[e] : e; };
  auto jb = [&](std::size_t e) {
    return kind == Kind::same ? e : (kind == Kind::suffix_b ? e % nb : ib[e]);
  };
  for (std::size_t e = 0; e < n; ++e) out[e] = f(av[ja(e)], bv[jb(e)]);

  return make_result(out_shape, std::move(out), {a, b},
                     [kind, nb, ia = std::move(ia), ib = std::move(ib), dfx, dfy](Node& self) {
                       const auto& x = self.inputs[0]->value;
                       const auto& y = self.inputs[1]->value;
                       double* gx = self.input_grad(0);
                       double* gy = self.input_grad(1);
                       const std::size_t n = self.value.size();
                       for (std::size_t e = 0; e < n; ++e) {
                         const std::size_t i = kind == Kind::general ? ia[e] : e;
                         const std::size_t j =
                             kind == Kind::same ? e : (kind == Kind::suffix_b ? e % nb : ib[e]);
                         const double g = self.grad[e];
                         if (gx) gx[i] += g * dfx(x[i], y[j], self.value[e]);
                         if (gy) gy[j] += g * dfy(x[i], y[j], self.value[e]);
                       }
                     });
}

/// Elementwise unary op; df(x, out) -> derivative.
template <class F, class DF>
Tensor unary_op(const Tensor& x, F f, DF df) {
  const auto& xv = x.vec();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    double* gx = self.input_grad(0);
    if (!gx) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int k = axis < 0 ? r + axis : axis;
  if (k < 0 || k >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(k);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

/// alpha * x + beta
inline Tensor affine(const Tensor& x, double alpha, double beta) {
  return detail::unary_op(
      x, [alpha, beta](double v) { return alpha * v + beta; }, [alpha](double, double) { return alpha; });
}

inline Tensor scale(const Tensor& x, double c) { return affine(x, c, 0.0); }
inline Tensor one_minus(const Tensor& x) { return affine(x, -1.0, 1.0); }

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// Identity node. Consumers that read a shared tensor through their own route
/// can later have their gradient channel blocked with set_gradient_stop().
inline Tensor route(const Tensor& x) {
  return make_result(x.shape(), x.vec(), {x}, [](detail::Node& self) {
    double* gx = self.input_grad(0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.vec()) s += v;
  return make_result({1}, {s}, {x}, [](detail::Node& self) {
    double* gx = self.input_grad(0);
    if (!gx) return;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) gx[i] += g;
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Sum of squared entries.
inline Tensor sum_squares(const Tensor& x) {
  double s = 0.0;
  for (double v : x.vec()) s += v * v;
  return make_result({1}, {s}, {x}, [](detail::Node& self) {
    double* gx = self.input_grad(0);
    if (!gx) return;
    const double g = self.grad[0];
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += 2.0 * g * xv[i];
  });
}

// ---------------------------------------------------------------------------
// shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_result(std::move(shape), x.vec(), {x}, [](detail::Node& self) {
    double* gx = self.input_grad(0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

/// out.shape[i] = x.shape[perm[i]]
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(in));
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r) throw DimensionError("permute: bad axis");
    out_shape[i] = in[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t e = 0; e < n; ++e) {
    src[e] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      off += stride[d];
      if (counter[d] < out_shape[d]) break;
      off -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto& xv = x.vec();
  for (std::size_t e = 0; e < n; ++e) out[e] = xv[src[e]];
  return make_result(out_shape, std::move(out), {x}, [src = std::move(src)](detail::Node& self) {
    double* gx = self.input_grad(0);
    if (!gx) return;
    for (std::size_t e = 0; e < src.size(); ++e) gx[src[e]] += self.grad[e];
  });
}

/// Swaps the last two dimensions.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

// ---------------------------------------------------------------------------
// matmul

/// a[..., m, k] x b[..., k, n] -> [..., m, n]; batch dimensions broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  const Eigen::Index M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
                     N = static_cast<Eigen::Index>(n);

  if (bbatch.empty()) {
    // one GEMM over all leading rows of a
    const std::size_t rows = a.numel() / k;
    Shape out_shape = abatch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(rows * n);
    const Eigen::Index R = static_cast<Eigen::Index>(rows);
    MatMap(out.data(), R, N).noalias() = ConstMatMap(a.vec().data(), R, K) * ConstMatMap(b.vec().data(), K, N);
    return make_result(std::move(out_shape), std::move(out), {a, b}, [R, K, N](detail::Node& self) {
      ConstMatMap g(self.grad.data(), R, N);
      if (double* ga = self.input_grad(0)) {
        MatMap(ga, R, K).noalias() += g * ConstMatMap(self.inputs[1]->value.data(), K, N).transpose();
      }
      if (double* gb = self.input_grad(1)) {
        MatMap(gb, K, N).noalias() += ConstMatMap(self.inputs[0]->value.data(), R, K).transpose() * g;
      }
    });
  }

  const Shape batch = detail::broadcast_shapes(abatch, bbatch, "matmul");
  const std::size_t nbatch = shape_numel(batch);
  std::vector<std::size_t> ia = detail::broadcast_index(abatch.empty() ? Shape{1} : abatch, batch);
  std::vector<std::size_t> ib = detail::broadcast_index(bbatch, batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(nbatch * m * n);
  for (std::size_t t = 0; t < nbatch; ++t) {
    MatMap(out.data() + t * m * n, M, N).noalias() =
        ConstMatMap(a.vec().data() + ia[t] * m * k, M, K) * ConstMatMap(b.vec().data() + ib[t] * k * n, K, N);
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [M, K, N, ia = std::move(ia), ib = std::move(ib)](detail::Node& self) {
                       const std::size_t mk = static_cast<std::size_t>(M * K);
                       const std::size_t kn = static_cast<std::size_t>(K * N);
                       const std::size_t mn = static_cast<std::size_t>(M * N);
                       double* ga = self.input_grad(0);
                       double* gb = self.input_grad(1);
                       const double* av = self.inputs[0]->value.data();
                       const double* bv = self.inputs[1]->value.data();
                       for (std::size_t t = 0; t < ia.size(); ++t) {
                         ConstMatMap g(self.grad.data() + t * mn, M, N);
                         if (ga) MatMap(ga + ia[t] * mk, M, K).noalias() += g * ConstMatMap(bv + ib[t] * kn, K, N).transpose();
                         if (gb) MatMap(gb + ib[t] * kn, K, N).noalias() += ConstMatMap(av + ia[t] * mk, M, K).transpose() * g;
                       }
                     });
}

// ---------------------------------------------------------------------------
// normalization

/// Softmax along `axis` with max subtraction. Masked positions get exactly 0;
/// a slice with every position masked is all zeros.
inline Tensor softmax(const Tensor& x, int axis = -1, const Mask* mask = nullptr) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];

  std::vector<std::size_t> mi;
  if (mask) {
    if (shape_numel(mask->shape) != mask->keep.size()) throw DimensionError("softmax: malformed mask");
    if (mask->shape.size() > s.size()) throw DimensionError("softmax: mask rank exceeds input rank");
    const std::size_t off = s.size() - mask->shape.size();
    for (std::size_t i = off; i < s.size(); ++i) {
      if (mask->shape[i - off] != 1 && mask->shape[i - off] != s[i]) {
        throw DimensionError("softmax: mask " + shape_str(mask->shape) + " does not broadcast to " + shape_str(s));
      }
    }
    mi = detail::broadcast_index(mask->shape, s);
  }
  const auto& xv = x.vec();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t e = base + j * inner;
        if (mask && !mask->keep[mi[e]]) continue;
        mx = std::max(mx, xv[e]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t e = base + j * inner;
        if (mask && !mask->keep[mi[e]]) continue;
        out[e] = std::exp(xv[e] - mx);
        z += out[e];
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result(s, std::move(out), {x}, [outer, inner, len](detail::Node& self) {
    double* gx = self.input_grad(0);
    if (!gx) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t e = base + j * inner;
          gx[e] += y[e] * (g[e] - dot);
        }
      }
    }
  });
}

/// Normalizes the last dimension to zero mean / unit variance, then gamma * . + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match input " + shape_str(x.shape()));
  }
  if (!(eps >= 0.0)) throw ContractViolation("layer_norm: eps must be non-negative");
  const std::size_t rows = x.numel() / d;
  const auto& xv = x.vec();
  const auto& gv = gamma.vec();
  const auto& bv = beta.vec();
  std::vector<double> xhat(xv.size()), rstd(rows), out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double denom = std::sqrt(var + eps);
    rstd[r] = denom > 0.0 ? 1.0 / denom : 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
                       double* gx = self.input_grad(0);
                       double* gg = self.input_grad(1);
                       double* gb = self.input_grad(2);
                       const auto& gamma = self.inputs[1]->value;
                       const double dd = static_cast<double>(d);
                       std::vector<double> dxhat(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * d;
                         const double* xh = xhat.data() + r * d;
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           if (gg) gg[j] += g[j] * xh[j];
                           if (gb) gb[j] += g[j];
                           dxhat[j] = g[j] * gamma[j];
                           s1 += dxhat[j];
                           s2 += dxhat[j] * xh[j];
                         }
                         if (gx) {
                           for (std::size_t j = 0; j < d; ++j) {
                             gx[r * d + j] += rstd[r] / dd * (dd * dxhat[j] - s1 - xh[j] * s2);
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// lookup / regularization

/// Rows of `table` [V, d] for each id; output shape is ids_shape + [d].
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::int32_t>& ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + shape_str(table.shape()));
  if (shape_numel(ids_shape) != ids.size()) throw DimensionError("embedding: ids do not match their shape");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " is outside vocabulary of size " + std::to_string(vocab));
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  std::vector<double> out(ids.size() * d);
  const auto& tv = table.vec();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  return make_result(std::move(out_shape), std::move(out), {table}, [ids, d](detail::Node& self) {
    double* gt = self.input_grad(0);
    if (!gt) return;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* row = gt + static_cast<std::size_t>(ids[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
    }
  });
}

/// Inverted dropout. Rate 0 returns `x` itself.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractViolation("dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> m(x.numel());
  for (double& v : m) v = rng.uniform() < rate ? 0.0 : keep_scale;
  const auto& xv = x.vec();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * m[i];
  return make_result(x.shape(), std::move(out), {x}, [m = std::move(m)](detail::Node& self) {
    double* gx = self.input_grad(0);
    if (!gx) return;
    for (std::size_t i = 0; i < m.size(); ++i) gx[i] += self.grad[i] * m[i];
  });
}

}  // namespace msc
