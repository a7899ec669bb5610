// SPDX-License-Identifier: Apache-2.0
//
// Parameterized building blocks: multi-head attention, position-wise FFN,
// the context GRU cell, and token embedding with sinusoidal positions.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "msc/error.hpp"
#include "msc/ops.hpp"
#include "msc/rng.hpp"
#include "msc/tensor.hpp"

namespace msc {

enum class ParamKind { matrix, bias, norm_gain, norm_bias, embedding };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
};

/// Named, ordered set of leaf tensors.
class ParamStore {
 public:
  Tensor& add(const ParamSpec& spec, Tensor value) {
    if (index_.count(spec.name)) throw ContractViolation("duplicate parameter " + spec.name);
    if (value.shape() != spec.shape) {
      throw DimensionError("parameter " + spec.name + " expects " + shape_str(spec.shape) + ", got " +
                           shape_str(value.shape()));
    }
    index_.emplace(spec.name, tensors_.size());
    specs_.push_back(spec);
    tensors_.push_back(std::move(value));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter " + name);
    return tensors_[it->second];
  }
  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter " + name);
    return tensors_[it->second];
  }

  std::size_t size() const { return tensors_.size(); }
  const ParamSpec& spec(std::size_t i) const { return specs_[i]; }
  const Tensor& at(std::size_t i) const { return tensors_[i]; }
  Tensor& at(std::size_t i) { return tensors_[i]; }
  const std::vector<ParamSpec>& specs() const { return specs_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& t : tensors_) t.zero_grad();
  }

  /// Overwrites values (not identity) of every parameter `other` shares by name.
  std::size_t copy_shared_from(const ParamStore& other) {
    std::size_t copied = 0;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& name = specs_[i].name;
      if (!other.contains(name)) continue;
      const Tensor& src = other.get(name);
      if (src.shape() != tensors_[i].shape()) throw DimensionError("shape mismatch copying " + name);
      auto dst = tensors_[i].mutable_values();
      std::copy(src.values().begin(), src.values().end(), dst.begin());
      ++copied;
    }
    return copied;
  }

 private:
  std::vector<ParamSpec> specs_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Xavier-uniform matrices and embeddings, zero biases, unit norm gains.
inline Tensor initial_value(const ParamSpec& spec, Rng& rng) {
  std::vector<double> v(shape_numel(spec.shape), 0.0);
  switch (spec.kind) {
    case ParamKind::matrix:
    case ParamKind::embedding: {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
      for (double& x : v) x = rng.uniform(-bound, bound);
      break;
    }
    case ParamKind::norm_gain:
      std::fill(v.begin(), v.end(), 1.0);
      break;
    case ParamKind::bias:
    case ParamKind::norm_bias:
      break;
  }
  return Tensor::from(spec.shape, std::move(v), true);
}

// ---------------------------------------------------------------------------
// parameter groups

struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // each (d_model x d_model)
  std::size_t heads = 1;

  static std::vector<ParamSpec> specs(const std::string& prefix, std::size_t d) {
    return {{prefix + ".w_q", {d, d}, ParamKind::matrix},
            {prefix + ".w_k", {d, d}, ParamKind::matrix},
            {prefix + ".w_v", {d, d}, ParamKind::matrix},
            {prefix + ".w_o", {d, d}, ParamKind::matrix}};
  }
  static AttentionParams from(const ParamStore& s, const std::string& prefix, std::size_t heads) {
    return {s.get(prefix + ".w_q"), s.get(prefix + ".w_k"), s.get(prefix + ".w_v"), s.get(prefix + ".w_o"), heads};
  }
};

struct FfnParams {
  Tensor w_1, b_1, w_2, b_2;

  static std::vector<ParamSpec> specs(const std::string& prefix, std::size_t d, std::size_t d_ffn) {
    return {{prefix + ".w_1", {d, d_ffn}, ParamKind::matrix},
            {prefix + ".b_1", {d_ffn}, ParamKind::bias},
            {prefix + ".w_2", {d_ffn, d}, ParamKind::matrix},
            {prefix + ".b_2", {d}, ParamKind::bias}};
  }
  static FfnParams from(const ParamStore& s, const std::string& prefix) {
    return {s.get(prefix + ".w_1"), s.get(prefix + ".b_1"), s.get(prefix + ".w_2"), s.get(prefix + ".b_2")};
  }
};

/// W_* act on the block input, U_* on the carried context state.
struct GruParams {
  Tensor w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h;

  static std::vector<ParamSpec> specs(const std::string& prefix, std::size_t d) {
    std::vector<ParamSpec> out;
    for (const char* m : {"w_z", "w_r", "w_h", "u_z", "u_r", "u_h"}) {
      out.push_back({prefix + "." + m, {d, d}, ParamKind::matrix});
    }
    for (const char* b : {"b_z", "b_r", "b_h"}) out.push_back({prefix + "." + b, {d}, ParamKind::bias});
    return out;
  }
  static GruParams from(const ParamStore& s, const std::string& p) {
    return {s.get(p + ".w_z"), s.get(p + ".w_r"), s.get(p + ".w_h"), s.get(p + ".u_z"), s.get(p + ".u_r"),
            s.get(p + ".u_h"), s.get(p + ".b_z"), s.get(p + ".b_r"), s.get(p + ".b_h")};
  }
};

struct NormParams {
  Tensor gain, bias;

  static std::vector<ParamSpec> specs(const std::string& prefix, std::size_t d) {
    return {{prefix + ".gain", {d}, ParamKind::norm_gain}, {prefix + ".bias", {d}, ParamKind::norm_bias}};
  }
  static NormParams from(const ParamStore& s, const std::string& prefix) {
    return {s.get(prefix + ".gain"), s.get(prefix + ".bias")};
  }
};

inline constexpr double kLayerNormEps = 1e-6;

inline Tensor apply_norm(const Tensor& x, const NormParams& p) { return layer_norm(x, p.gain, p.bias, kLayerNormEps); }

// ---------------------------------------------------------------------------
// attention

struct AttentionOutput {
  Tensor output;   // [b, t_q, d]
  Tensor weights;  // [b, heads, t_q, t_k], before attention dropout
};

/// Scaled dot-product attention over `heads` heads with scale 1/sqrt(d/heads).
/// `mask` broadcasts against [b, heads, t_q, t_k].
inline AttentionOutput multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                                            const Mask* mask, const AttentionParams& p, double attn_dropout = 0.0,
                                            Rng* rng = nullptr) {
  if (q_in.rank() != 3 || k_in.rank() != 3 || v_in.rank() != 3) {
    throw DimensionError("attention inputs must be [b, t, d]: got " + shape_str(q_in.shape()) + ", " +
                         shape_str(k_in.shape()) + ", " + shape_str(v_in.shape()));
  }
  const std::size_t b = q_in.dim(0), tq = q_in.dim(1), d = q_in.dim(2);
  const std::size_t tk = k_in.dim(1);
  if (k_in.dim(0) != b || v_in.dim(0) != b || v_in.dim(1) != tk || k_in.dim(2) != d || v_in.dim(2) != d) {
    throw DimensionError("attention: inconsistent shapes " + shape_str(q_in.shape()) + ", " +
                         shape_str(k_in.shape()) + ", " + shape_str(v_in.shape()));
  }
  if (p.heads == 0 || d % p.heads != 0) {
    throw ContractViolation("attention: heads " + std::to_string(p.heads) + " must divide d_model " + std::to_string(d));
  }
  const std::size_t h = p.heads, dh = d / h;
  auto split = [&](const Tensor& x, std::size_t t) { return permute(reshape(x, {b, t, h, dh}), {0, 2, 1, 3}); };
  Tensor q = split(matmul(q_in, p.w_q), tq);
  Tensor k = split(matmul(k_in, p.w_k), tk);
  Tensor v = split(matmul(v_in, p.w_v), tk);
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = softmax(scores, -1, mask);
  Tensor attn = weights;
  if (attn_dropout > 0.0 && rng != nullptr) attn = dropout(weights, attn_dropout, *rng);
  Tensor ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, tq, d});
  return {matmul(ctx, p.w_o), weights};
}

// ---------------------------------------------------------------------------
// feed-forward and context cell

inline Tensor ffn(const Tensor& x, const FfnParams& p) {
  return add(matmul(relu(add(matmul(x, p.w_1), p.b_1)), p.w_2), p.b_2);
}

/// One GRU update applied independently at every position:
///   z = sig(x W_z + c U_z + b_z), r = sig(x W_r + c U_r + b_r)
///   h = tanh(x W_h + (r * c) U_h + b_h),  c' = (1 - z) * c + z * h
inline Tensor gru_cell(const Tensor& c, const Tensor& x, const GruParams& p) {
  if (c.shape() != x.shape()) {
    throw DimensionError("gru_cell: state " + shape_str(c.shape()) + " and input " + shape_str(x.shape()) +
                         " differ");
  }
  Tensor z = sigmoid(add(add(matmul(x, p.w_z), matmul(c, p.u_z)), p.b_z));
  Tensor r = sigmoid(add(add(matmul(x, p.w_r), matmul(c, p.u_r)), p.b_r));
  Tensor h = msc::tanh(add(add(matmul(x, p.w_h), matmul(mul(r, c), p.u_h)), p.b_h));
  return add(mul(one_minus(z), c), mul(z, h));
}

// ---------------------------------------------------------------------------
// embeddings

/// Sinusoidal table [len, d]: even dims sin(pos / 10000^(i/d)), odd dims cos.
inline Tensor positional_encoding(std::size_t len, std::size_t d) {
  std::vector<double> v(len * d);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double expo = static_cast<double>(i - i % 2) / static_cast<double>(d);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
      v[pos * d + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({len, d}, std::move(v));
}

/// Row-major token ids with shape [batch, length].
struct TokenMatrix {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
};

/// table[id] * sqrt(d) + PE(position).
inline Tensor embed(const TokenMatrix& tokens, const Tensor& table) {
  if (tokens.batch == 0 || tokens.length == 0) throw ContractViolation("embed: empty token matrix");
  const std::size_t d = table.dim(1);
  Tensor e = scale(embedding_lookup(table, tokens.ids, {tokens.batch, tokens.length}),
                   std::sqrt(static_cast<double>(d)));
  return add(e, positional_encoding(tokens.length, d));
}

}  // namespace msc
