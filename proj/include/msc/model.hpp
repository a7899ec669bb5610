// SPDX-License-Identifier: Apache-2.0
//
// Encoder/decoder assembly for the four stacking modes:
//
//   baseline, plain_deep  flat pre-norm stack; every decoder layer attends the
//                         normalized encoder top.
//   bsc                   encoder split into N blocks of M_n layers; decoder
//                         block n attends the (normalized) output of encoder
//                         block n.
//   msc                   bsc plus a context state C^n = Q(C^{n-1}, B_e^n)
//                         fused by gated attention into every encoder layer of
//                         block n+1 and into decoder block n.
//
// Block and layer indices are zero-based here.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "msc/config.hpp"
#include "msc/error.hpp"
#include "msc/layers.hpp"
#include "msc/ops.hpp"
#include "msc/rng.hpp"
#include "msc/tensor.hpp"

namespace msc {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kUnkId = 3;

struct ForwardOptions {
  bool train = false;  // enables dropout
  Rng* rng = nullptr;  // dropout stream; required when train and a rate is nonzero
};

/// Encoder block output and the context state entering the next block.
struct BlockState {
  Tensor encoder_out;  // B_e^n
  Tensor context;      // C^n; undefined without contextual collaboration
  std::size_t block = 0;
};

/// Intermediate tensors of one forward pass, kept for analysis.
struct ForwardTrace {
  /// Identity routes through which each consumer reads B_e^n.
  struct Routes {
    Tensor next_block;  // first layer of encoder block n+1
    Tensor decoder;     // cross-attention memory of decoder block n
    Tensor context;     // context cell update producing C^n
  };
  std::vector<std::vector<Tensor>> encoder_layers;  // [n][l] = H_e^{n,l}
  std::vector<Tensor> block_outputs;                // B_e^n
  std::vector<Routes> routes;
  std::vector<Tensor> contexts;       // C^0 .. C^N
  std::vector<Tensor> cross_weights;  // per decoder block, [b, heads, t_tgt, t_src]
  std::vector<Tensor> encoder_gates;
  std::vector<Tensor> decoder_gates;
};

/// What the decoder needs from the encoder.
struct EncoderOutput {
  std::vector<Tensor> memory;   // per decoder block: normalized keys/values
  std::vector<Tensor> context;  // per decoder block: C^n, or empty
  Mask src_mask;                // [b, 1, 1, t_src]
  std::size_t batch = 0;
  std::size_t src_len = 0;
};

inline Mask padding_mask(const TokenMatrix& t) {
  Mask m{{t.batch, 1, 1, t.length}, std::vector<std::uint8_t>(t.ids.size())};
  for (std::size_t i = 0; i < t.ids.size(); ++i) m.keep[i] = t.ids[i] != kPadId;
  return m;
}

/// Causal mask combined with target padding, [b, 1, t, t].
inline Mask causal_mask(const TokenMatrix& t) {
  const std::size_t len = t.length;
  Mask m{{t.batch, 1, len, len}, std::vector<std::uint8_t>(t.batch * len * len, 0)};
  for (std::size_t b = 0; b < t.batch; ++b)
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.keep[(b * len + i) * len + j] = t.at(b, j) != kPadId;
  return m;
}

class MscModel {
 public:
  MscModel(const MscConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, "init");
    for (const auto& spec : parameter_specs(cfg_)) params_.add(spec, initial_value(spec, rng));
  }

  const MscConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  static std::string layer_prefix(std::size_t n, std::size_t l) {
    return "enc." + std::to_string(n) + "." + std::to_string(l);
  }

  /// Every parameter the config needs, in initialization order.
  static std::vector<ParamSpec> parameter_specs(const MscConfig& c) {
    const std::size_t d = c.d_model;
    std::vector<ParamSpec> out;
    auto append = [&out](std::vector<ParamSpec> v) { out.insert(out.end(), v.begin(), v.end()); };
    out.push_back({"embed.table", {c.vocab_size, d}, ParamKind::embedding});
    const bool ctx = c.uses_context();
    const bool gated = !c.ablations.fusion_additive;
    for (std::size_t n = 0; n < c.n_blocks; ++n) {
      for (std::size_t l = 0; l < c.layers_per_block[n]; ++l) {
        const std::string p = layer_prefix(n, l);
        append(NormParams::specs(p + ".ln_att", d));
        append(AttentionParams::specs(p + ".self", d));
        if (ctx) {
          append(AttentionParams::specs(p + ".ctx", d));
          if (gated) append(gate_specs(p + ".gate", d));
        }
        append(NormParams::specs(p + ".ln_ffn", d));
        append(FfnParams::specs(p + ".ffn", d, c.d_ffn));
      }
      if (c.block_scale() || n + 1 == c.n_blocks) {
        append(NormParams::specs("enc." + std::to_string(n) + ".out_ln", d));
      }
    }
    if (ctx) {
      if (c.ablations.context_cell_as_ffn) {
        append(NormParams::specs("ctx.ln", d));
        append(FfnParams::specs("ctx.ffn", d, c.d_ffn));
      } else if (c.ablations.per_block_gru) {
        for (std::size_t n = 0; n < c.n_blocks; ++n) append(GruParams::specs("ctx." + std::to_string(n) + ".gru", d));
      } else {
        append(GruParams::specs("ctx.gru", d));
      }
    }
    const bool dec_ctx = ctx && !c.ablations.remove_cxt_enc_attention;
    for (std::size_t n = 0; n < c.n_blocks; ++n) {
      const std::string p = "dec." + std::to_string(n);
      append(NormParams::specs(p + ".ln_self", d));
      append(AttentionParams::specs(p + ".self", d));
      append(NormParams::specs(p + ".ln_cross", d));
      append(AttentionParams::specs(p + ".cross", d));
      if (dec_ctx) {
        append(AttentionParams::specs(p + ".ctx", d));
        if (gated) append(gate_specs(p + ".gate", d));
      }
      append(NormParams::specs(p + ".ln_ffn", d));
      append(FfnParams::specs(p + ".ffn", d, c.d_ffn));
    }
    append(NormParams::specs("dec.out_ln", d));
    return out;
  }

  static std::size_t count_params(const MscConfig& c) {
    std::size_t n = 0;
    for (const auto& s : parameter_specs(c)) n += shape_numel(s.shape);
    return n;
  }

  // -------------------------------------------------------------------------
  // encoder

  /// One pre-norm encoder layer. With `ctx`, the attention sublayer becomes
  ///   O = g * Attn_h(Ln H) + (1 - g) * Attn_c(Ln H, C, C) + H,
  ///   g = sigmoid(Attn_h W_1 + Attn_c W_2 + b),
  /// followed by H' = Ffn(Ln O) + O.
  Tensor fused_encoder_layer(const Tensor& h_prev, const Tensor* ctx, std::size_t n, std::size_t l,
                             const Mask& src_mask, const ForwardOptions& opt, ForwardTrace* trace = nullptr) const {
    const std::string p = layer_prefix(n, l);
    Tensor q = apply_norm(h_prev, NormParams::from(params_, p + ".ln_att"));
    Rng* rng = dropout_rng(opt);
    Tensor branch = multi_head_attention(q, q, q, &src_mask, attention(p + ".self"), attn_rate(opt), rng).output;
    if (ctx != nullptr) {
      Tensor a_c = multi_head_attention(q, *ctx, *ctx, &src_mask, attention(p + ".ctx"), attn_rate(opt), rng).output;
      branch = fuse(branch, a_c, p + ".gate", trace ? &trace->encoder_gates : nullptr);
    }
    Tensor o = add(h_prev, residual_dropout(branch, opt));
    Tensor f = ffn(apply_norm(o, NormParams::from(params_, p + ".ln_ffn")), FfnParams::from(params_, p + ".ffn"));
    return add(o, residual_dropout(f, opt));
  }

  /// Iterates the block's M_n layers starting from B_e^{n-1}.
  Tensor encoder_block_forward(const Tensor& b_prev, const Tensor* ctx_prev, std::size_t n, const Mask& src_mask,
                               const ForwardOptions& opt, ForwardTrace* trace = nullptr) const {
    if (n >= cfg_.n_blocks) throw ContractViolation("encoder block index out of range");
    if (cfg_.uses_context() && ctx_prev == nullptr) {
      throw ConfigError("mode", "msc encoder block " + std::to_string(n + 1) + " needs the context state");
    }
    const Tensor* ctx = cfg_.uses_context() ? ctx_prev : nullptr;
    Tensor h = b_prev;
    std::vector<Tensor> layers;
    for (std::size_t l = 0; l < cfg_.layers_per_block[n]; ++l) {
      h = fused_encoder_layer(h, ctx, n, l, src_mask, opt, trace);
      layers.push_back(h);
    }
    if (trace) trace->encoder_layers.push_back(std::move(layers));
    return h;
  }

  /// C^n = Q(C^{n-1}, B_e^n): the GRU cell, or Ffn(Ln(C + B)) + C under the
  /// context_cell_as_ffn ablation.
  Tensor context_update(const Tensor& c_prev, const Tensor& b_e, std::size_t n) const {
    if (!cfg_.uses_context()) throw ContractViolation("context_update called without contextual collaboration");
    if (cfg_.ablations.context_cell_as_ffn) {
      Tensor mixed = apply_norm(add(c_prev, b_e), NormParams::from(params_, "ctx.ln"));
      return add(ffn(mixed, FfnParams::from(params_, "ctx.ffn")), c_prev);
    }
    const std::string p = cfg_.ablations.per_block_gru ? "ctx." + std::to_string(n) + ".gru" : "ctx.gru";
    return gru_cell(c_prev, b_e, GruParams::from(params_, p));
  }

  EncoderOutput encode(const TokenMatrix& src, const ForwardOptions& opt, ForwardTrace* trace = nullptr) const {
    if (src.batch == 0 || src.length == 0) throw ContractViolation("empty source batch");
    EncoderOutput out;
    out.batch = src.batch;
    out.src_len = src.length;
    out.src_mask = padding_mask(src);
    const std::size_t nb = cfg_.n_blocks;
    Tensor emb = residual_dropout(embed(src, params_.get("embed.table")), opt);
    Tensor h = emb;
    Tensor ctx;
    if (cfg_.uses_context()) {
      ctx = emb;
      if (trace) trace->contexts.push_back(ctx);
    }
    for (std::size_t n = 0; n < nb; ++n) {
      Tensor b = encoder_block_forward(h, ctx.defined() ? &ctx : nullptr, n, out.src_mask, opt, trace);
      if (trace) trace->block_outputs.push_back(b);
      if (!cfg_.block_scale()) {
        h = b;
        if (trace) trace->routes.push_back({});
        continue;
      }
      ForwardTrace::Routes r;
      r.decoder = route(b);
      out.memory.push_back(apply_norm(r.decoder, NormParams::from(params_, "enc." + std::to_string(n) + ".out_ln")));
      if (cfg_.uses_context()) {
        r.context = route(b);
        ctx = context_update(ctx, r.context, n);
        out.context.push_back(ctx);
        if (trace) trace->contexts.push_back(ctx);
      }
      if (n + 1 < nb) {
        r.next_block = route(b);
        h = r.next_block;
      }
      if (trace) trace->routes.push_back(std::move(r));
    }
    if (!cfg_.block_scale()) {
      Tensor top = apply_norm(h, NormParams::from(params_, "enc." + std::to_string(nb - 1) + ".out_ln"));
      out.memory.assign(nb, top);
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // decoder

  /// Self-attention sublayer, cross-attention to `memory` (fused with the
  /// context attention when `ctx` is given), then the FFN sublayer.
  Tensor decoder_block_forward(const Tensor& b_d_prev, const Tensor& memory, const Tensor* ctx, std::size_t n,
                               const Mask& self_mask, const Mask& src_mask, const ForwardOptions& opt,
                               ForwardTrace* trace = nullptr) const {
    if (n >= cfg_.n_blocks) throw ContractViolation("decoder block index out of range");
    const bool fuse_ctx = cfg_.uses_context() && !cfg_.ablations.remove_cxt_enc_attention;
    if (fuse_ctx && ctx == nullptr) {
      throw ConfigError("mode", "msc decoder block " + std::to_string(n + 1) + " needs the context state");
    }
    const std::string p = "dec." + std::to_string(n);
    Rng* rng = dropout_rng(opt);
    Tensor q = apply_norm(b_d_prev, NormParams::from(params_, p + ".ln_self"));
    Tensor s = multi_head_attention(q, q, q, &self_mask, attention(p + ".self"), attn_rate(opt), rng).output;
    Tensor o = add(b_d_prev, residual_dropout(s, opt));

    Tensor qc = apply_norm(o, NormParams::from(params_, p + ".ln_cross"));
    AttentionOutput cross = multi_head_attention(qc, memory, memory, &src_mask, attention(p + ".cross"), attn_rate(opt), rng);
    if (trace) trace->cross_weights.push_back(cross.weights);
    Tensor branch = cross.output;
    if (fuse_ctx) {
      Tensor a_c = multi_head_attention(qc, *ctx, *ctx, &src_mask, attention(p + ".ctx"), attn_rate(opt), rng).output;
      branch = fuse(branch, a_c, p + ".gate", trace ? &trace->decoder_gates : nullptr);
    }
    Tensor sd = add(o, residual_dropout(branch, opt));
    Tensor f = ffn(apply_norm(sd, NormParams::from(params_, p + ".ln_ffn")), FfnParams::from(params_, p + ".ffn"));
    return add(sd, residual_dropout(f, opt));
  }

  /// Next-token logits [b, t_tgt, vocab] given encoder output and the
  /// BOS-prefixed target input.
  Tensor decode(const EncoderOutput& enc, const TokenMatrix& tgt_in, const ForwardOptions& opt,
                ForwardTrace* trace = nullptr) const {
    if (tgt_in.batch == 0 || tgt_in.length == 0) throw ContractViolation("empty target batch");
    if (tgt_in.batch != enc.batch) throw DimensionError("source and target batch sizes differ");
    const Tensor& table = params_.get("embed.table");
    Mask self_mask = causal_mask(tgt_in);
    Tensor x = residual_dropout(embed(tgt_in, table), opt);
    for (std::size_t n = 0; n < cfg_.n_blocks; ++n) {
      const Tensor* ctx = enc.context.empty() ? nullptr : &enc.context[n];
      x = decoder_block_forward(x, enc.memory[n], ctx, n, self_mask, enc.src_mask, opt, trace);
    }
    Tensor out = apply_norm(x, NormParams::from(params_, "dec.out_ln"));
    return matmul(out, transpose(table));
  }

  Tensor forward(const TokenMatrix& src, const TokenMatrix& tgt_in, const ForwardOptions& opt = {},
                 ForwardTrace* trace = nullptr) const {
    EncoderOutput enc = encode(src, opt, trace);
    return decode(enc, tgt_in, opt, trace);
  }

 private:
  static std::vector<ParamSpec> gate_specs(const std::string& prefix, std::size_t d) {
    return {{prefix + ".w_1", {d, d}, ParamKind::matrix},
            {prefix + ".w_2", {d, d}, ParamKind::matrix},
            {prefix + ".b", {d}, ParamKind::bias}};
  }

  AttentionParams attention(const std::string& prefix) const {
    return AttentionParams::from(params_, prefix, cfg_.heads);
  }

  Tensor fuse(const Tensor& a_h, const Tensor& a_c, const std::string& gate_prefix, std::vector<Tensor>* gates) const {
    if (cfg_.ablations.fusion_additive) return add(a_h, a_c);
    Tensor g = sigmoid(add(add(matmul(a_h, params_.get(gate_prefix + ".w_1")),
                               matmul(a_c, params_.get(gate_prefix + ".w_2"))),
                           params_.get(gate_prefix + ".b")));
    if (gates) gates->push_back(g);
    return add(mul(g, a_h), mul(one_minus(g), a_c));
  }

  Rng* dropout_rng(const ForwardOptions& opt) const {
    if (!opt.train || (cfg_.dp_a <= 0.0 && cfg_.dp_r <= 0.0)) return nullptr;
    if (opt.rng == nullptr) throw ContractViolation("training forward with dropout needs an rng");
    return opt.rng;
  }
  double attn_rate(const ForwardOptions& opt) const { return opt.train ? cfg_.dp_a : 0.0; }

  Tensor residual_dropout(const Tensor& x, const ForwardOptions& opt) const {
    Rng* rng = dropout_rng(opt);
    if (rng == nullptr || cfg_.dp_r <= 0.0) return x;
    return dropout(x, cfg_.dp_r, *rng);
  }

  MscConfig cfg_;
  ParamStore params_;
};

/// Pads a list of id sequences into a [batch, max_len] matrix.
inline TokenMatrix pad_sequences(const std::vector<std::vector<std::int32_t>>& seqs) {
  TokenMatrix m;
  m.batch = seqs.size();
  for (const auto& s : seqs) m.length = std::max(m.length, s.size());
  m.ids.assign(m.batch * m.length, kPadId);
  for (std::size_t b = 0; b < seqs.size(); ++b) std::copy(seqs[b].begin(), seqs[b].end(), m.ids.begin() + b * m.length);
  return m;
}

}  // namespace msc
