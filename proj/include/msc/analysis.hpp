// SPDX-License-Identifier: Apache-2.0
//
// Gradient-norm tracing, per-consumer gradient decomposition, difficulty
// scoring, attention export, corpus BLEU, and the finite-difference suite.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msc/data.hpp"
#include "msc/error.hpp"
#include "msc/gradcheck.hpp"
#include "msc/model.hpp"
#include "msc/training.hpp"

namespace msc {

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// gradient norms

struct GradNormRecord {
  std::size_t step = 0;
  std::size_t block = 0;  // 1-based
  std::size_t layer = 0;  // 1-based within the block
  double act_grad_norm = 0.0;
  double param_grad_norm = 0.0;
};

/// Per encoder layer: ||dL/dH_e^{n,l}|| and the norm of the layer's
/// concatenated parameter gradients. Needs a completed backward pass.
inline std::vector<GradNormRecord> record_grad_norms(const MscModel& model, const Tape& tape,
                                                     const ForwardTrace& trace, std::size_t step) {
  if (!tape.backward_done()) throw ContractViolation("record_grad_norms called before backward");
  if (trace.encoder_layers.size() != model.config().n_blocks) {
    throw ContractViolation("record_grad_norms needs a trace of the encoder layers");
  }
  const ParamStore& p = model.params();
  std::vector<GradNormRecord> out;
  for (std::size_t n = 0; n < trace.encoder_layers.size(); ++n) {
    for (std::size_t l = 0; l < trace.encoder_layers[n].size(); ++l) {
      const Tensor& h = trace.encoder_layers[n][l];
      GradNormRecord r{step, n + 1, l + 1, h.has_grad() ? l2_norm(h.grad_span()) : 0.0, 0.0};
      const std::string prefix = MscModel::layer_prefix(n, l) + ".";
      double sq = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.spec(i).name.rfind(prefix, 0) != 0 || !p.at(i).has_grad()) continue;
        for (double g : p.at(i).grad_span()) sq += g * g;
      }
      r.param_grad_norm = std::sqrt(sq);
      out.push_back(r);
    }
  }
  return out;
}

inline void write_grad_norms_csv(const std::string& path, const std::vector<GradNormRecord>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot write gradient-norm trace");
  out << "step,block,layer,act_grad_norm,param_grad_norm\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.block << ',' << r.layer << ',' << format_double(r.act_grad_norm) << ','
        << format_double(r.param_grad_norm) << '\n';
  }
}

/// Gradient norms of one loss evaluation at the model's current parameters.
inline std::vector<GradNormRecord> grad_norms_at(MscModel& model, const Batch& batch, double label_smoothing,
                                                 std::size_t step = 0) {
  model.params().zero_grads();
  Tape tape;
  ForwardTrace trace;
  {
    TapeScope scope(tape);
    Tensor logits = model.forward(batch.src, batch.tgt_in, {}, &trace);
    tape.backward(label_smoothed_cross_entropy(logits, batch.tgt_out, label_smoothing));
  }
  auto rows = record_grad_norms(model, tape, trace, step);
  model.params().zero_grads();
  return rows;
}

/// min / max of the per-layer activation-gradient norms.
inline double balance_ratio(const std::vector<GradNormRecord>& rows) {
  if (rows.empty()) throw ContractViolation("balance_ratio: no records");
  double lo = rows.front().act_grad_norm, hi = lo;
  for (const auto& r : rows) {
    lo = std::min(lo, r.act_grad_norm);
    hi = std::max(hi, r.act_grad_norm);
  }
  return hi > 0.0 ? lo / hi : 1.0;
}

// ---------------------------------------------------------------------------
// gradient-path decomposition

struct Decomposition {
  std::size_t block = 0;                          // 1-based
  std::vector<double> full;                       // dL/dB_e^n
  std::map<std::string, std::vector<double>> by_consumer;
  double relative_residual = 0.0;                 // ||full - sum|| / ||full||
};

/// Names of the consumers reading B_e^n (zero-based n).
inline std::vector<std::string> block_consumers(const MscConfig& c, std::size_t n) {
  std::vector<std::string> out;
  if (n + 1 < c.n_blocks) out.push_back("next_block");
  out.push_back("decoder");
  if (c.uses_context()) out.push_back("context");
  return out;
}

namespace detail {

inline Tensor& route_of(ForwardTrace::Routes& r, const std::string& name) {
  if (name == "next_block") return r.next_block;
  if (name == "decoder") return r.decoder;
  return r.context;
}

}  // namespace detail

/// Splits dL/dB_e^n by consumer: one backward pass per consumer with the
/// other consumers' identity routes gradient-stopped. `block` is 1-based.
inline Decomposition grad_path_decompose(const MscModel& model, const Batch& batch, std::size_t block,
                                         double label_smoothing = 0.0) {
  const MscConfig& c = model.config();
  if (!c.block_scale()) throw ConfigError("mode", "decomposition needs bsc or msc mode");
  if (block < 1 || block > c.n_blocks) {
    throw IndexError("block " + std::to_string(block) + " outside [1, " + std::to_string(c.n_blocks) + "]");
  }
  const std::size_t n = block - 1;
  const auto consumers = block_consumers(c, n);

  // open: consumers whose route stays connected; returns dL/dB_e^n
  auto run = [&](const std::vector<std::string>& open) {
    Tape tape;
    ForwardTrace trace;
    TapeScope scope(tape);
    Tensor logits = model.forward(batch.src, batch.tgt_in, {}, &trace);
    Tensor loss = label_smoothed_cross_entropy(logits, batch.tgt_out, label_smoothing);
    for (const auto& name : consumers) {
      const bool keep = std::find(open.begin(), open.end(), name) != open.end();
      set_gradient_stop(detail::route_of(trace.routes[n], name), !keep);
    }
    tape.backward(loss);
    return trace.block_outputs[n].grad();
  };

  Decomposition d;
  d.block = block;
  d.full = run(consumers);
  std::vector<double> total(d.full.size(), 0.0);
  for (const auto& name : consumers) {
    auto g = run({name});
    for (std::size_t i = 0; i < g.size(); ++i) total[i] += g[i];
    d.by_consumer.emplace(name, std::move(g));
  }
  std::vector<double> diff(total.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = d.full[i] - total[i];
  const double full_norm = l2_norm(d.full);
  d.relative_residual = full_norm > 0.0 ? l2_norm(diff) / full_norm : l2_norm(diff);
  return d;
}

/// dL/dB_e^n with every consumer route stopped (expected zero).
inline std::vector<double> grad_with_all_consumers_stopped(const MscModel& model, const Batch& batch,
                                                           std::size_t block) {
  const std::size_t n = block - 1;
  Tape tape;
  ForwardTrace trace;
  TapeScope scope(tape);
  Tensor logits = model.forward(batch.src, batch.tgt_in, {}, &trace);
  Tensor loss = label_smoothed_cross_entropy(logits, batch.tgt_out, 0.0);
  for (const auto& name : block_consumers(model.config(), n)) set_gradient_stop(detail::route_of(trace.routes[n], name), true);
  tape.backward(loss);
  return trace.block_outputs[n].grad();
}

// ---------------------------------------------------------------------------
// difficulty

struct DifficultyRecord {
  std::size_t id = 0;
  double mean_nll = 0.0;
  double std_nll = 0.0;
  double score = 0.0;
  std::string label;
};

inline const std::vector<std::string>& difficulty_labels() {
  static const std::vector<std::string> labels{"Simple", "Ordinary", "Difficult", "Challenging"};
  return labels;
}

/// mean + population std of per-checkpoint NLLs. Values are summed in sorted
/// order so the result ignores checkpoint order.
inline DifficultyRecord difficulty_score(std::vector<double> nlls, std::size_t id = 0) {
  if (nlls.empty()) throw ContractViolation("difficulty_score: no checkpoints");
  std::sort(nlls.begin(), nlls.end());
  const double k = static_cast<double>(nlls.size());
  // offsets from the minimum keep identical inputs exact
  double s = 0.0;
  for (double x : nlls) s += x - nlls.front();
  const double mean = nlls.front() + s / k;
  std::vector<double> sq;
  sq.reserve(nlls.size());
  for (double x : nlls) sq.push_back((x - mean) * (x - mean));
  std::sort(sq.begin(), sq.end());
  double v = 0.0;
  for (double x : sq) v += x;
  const double sd = std::sqrt(v / k);
  return {id, mean, sd, mean + sd, ""};
}

/// Sorts by score (ties by original position), cuts into `parts` contiguous
/// groups whose sizes differ by at most one (larger groups first) and labels them.
inline std::vector<std::vector<DifficultyRecord>> split_by_difficulty(const std::vector<DifficultyRecord>& records,
                                                                      std::size_t parts = 4) {
  if (parts == 0) throw ContractViolation("split_by_difficulty: parts must be positive");
  if (records.size() < parts) {
    throw ContractViolation("split_by_difficulty: " + std::to_string(records.size()) + " records for " +
                            std::to_string(parts) + " parts");
  }
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].score < records[b].score; });
  std::vector<std::vector<DifficultyRecord>> out(parts);
  const std::size_t base = records.size() / parts, extra = records.size() % parts;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < parts; ++g) {
    const std::size_t size = base + (g < extra ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i) {
      DifficultyRecord r = records[order[pos++]];
      r.label = parts == 4 ? difficulty_labels()[g] : "part" + std::to_string(g + 1);
      out[g].push_back(std::move(r));
    }
  }
  return out;
}

/// Sequence NLL (sum over target tokens, no smoothing) of every pair under each model.
inline std::vector<DifficultyRecord> score_corpus(const std::vector<const MscModel*>& models,
                                                  const std::vector<Pair>& data, std::size_t batch_rows = 32) {
  if (models.empty()) throw ContractViolation("score_corpus: no checkpoints");
  NoGradScope no_grad;
  std::vector<std::vector<double>> nll(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch_rows) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_rows); ++i) rows.push_back(i);
    Batch b = make_batch(data, rows);
    for (const MscModel* m : models) {
      auto v = sequence_nll(m->forward(b.src, b.tgt_in), b.tgt_out);
      for (std::size_t i = 0; i < rows.size(); ++i) nll[rows[i]].push_back(v[i]);
    }
  }
  std::vector<DifficultyRecord> out;
  for (std::size_t i = 0; i < data.size(); ++i) out.push_back(difficulty_score(nll[i], i));
  return out;
}

inline void write_difficulty_tsv(const std::string& path, const std::vector<DifficultyRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot write difficulty table");
  out << "id\tmean_nll\tstd_nll\tscore\tlabel\n";
  for (const auto& r : records) {
    out << r.id << '\t' << format_double(r.mean_nll) << '\t' << format_double(r.std_nll) << '\t'
        << format_double(r.score) << '\t' << r.label << '\n';
  }
}

// ---------------------------------------------------------------------------
// attention export

struct AttentionLayer {
  std::size_t block = 0;  // 1-based decoder block
  std::vector<std::vector<std::vector<float>>> heads;  // [head][tgt][src]
  std::vector<std::vector<float>> head_avg;            // [tgt][src]
};

struct AttentionDump {
  std::vector<std::string> src_tokens;
  std::vector<std::string> tgt_tokens;
  std::vector<AttentionLayer> layers;
};

/// Teacher-forced cross-attention weights of the top decoder block, or of
/// every block when `all_layers`.
inline AttentionDump export_attention(const MscModel& model, const Vocab& vocab, const std::vector<std::string>& src,
                                      const std::vector<std::string>& tgt, bool all_layers = false) {
  TokenIds s, t;
  for (const auto& w : src) s.push_back(vocab.strict_id(w));
  for (const auto& w : tgt) t.push_back(vocab.strict_id(w));
  if (s.empty()) throw ContractViolation("export_attention: empty source");
  Batch b = make_batch({Pair{s, t}}, {0});
  ForwardTrace trace;
  {
    NoGradScope no_grad;
    model.forward(b.src, b.tgt_in, {}, &trace);
  }
  AttentionDump dump;
  dump.src_tokens = src;
  dump.tgt_tokens = {"<bos>"};
  dump.tgt_tokens.insert(dump.tgt_tokens.end(), tgt.begin(), tgt.end());
  const std::size_t nb = trace.cross_weights.size();
  for (std::size_t n = all_layers ? 0 : nb - 1; n < nb; ++n) {
    const Tensor& w = trace.cross_weights[n];  // [1, h, tt, ts]
    const std::size_t h = w.dim(1), tt = w.dim(2), ts = w.dim(3);
    AttentionLayer layer;
    layer.block = n + 1;
    layer.heads.assign(h, std::vector<std::vector<float>>(tt, std::vector<float>(ts)));
    layer.head_avg.assign(tt, std::vector<float>(ts));
    for (std::size_t i = 0; i < tt; ++i) {
      for (std::size_t j = 0; j < ts; ++j) {
        double avg = 0.0;
        for (std::size_t k = 0; k < h; ++k) {
          const double v = w.at({0, k, i, j});
          layer.heads[k][i][j] = static_cast<float>(v);
          avg += v;
        }
        layer.head_avg[i][j] = static_cast<float>(avg / static_cast<double>(h));
      }
    }
    dump.layers.push_back(std::move(layer));
  }
  return dump;
}

inline std::string attention_json(const AttentionDump& d) {
  nlohmann::json j;
  j["src_tokens"] = d.src_tokens;
  j["tgt_tokens"] = d.tgt_tokens;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : d.layers) j["layers"].push_back({{"block", l.block}, {"heads", l.heads}, {"head_avg", l.head_avg}});
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// BLEU

/// Corpus BLEU on token sequences: geometric mean of clipped n-gram
/// precisions (n = 1..max_n) times exp(min(0, 1 - ref_len / hyp_len)), in [0, 100].
template <typename Tok>
double corpus_bleu(const std::vector<std::vector<Tok>>& hyps, const std::vector<std::vector<Tok>>& refs,
                   std::size_t max_n = 4) {
  if (hyps.empty()) throw ContractViolation("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) {
    throw DimensionError("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                         std::to_string(refs.size()) + " references");
  }
  std::vector<std::size_t> matches(max_n, 0), totals(max_n, 0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& r = refs[s];
    hyp_len += h.size();
    ref_len += r.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      std::map<std::vector<Tok>, std::size_t> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[std::vector<Tok>(r.begin() + i, r.begin() + i + n)];
      std::map<std::vector<Tok>, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[std::vector<Tok>(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, cnt] : hyp_counts) {
        auto it = ref_counts.find(gram);
        matches[n - 1] += std::min(cnt, it == ref_counts.end() ? std::size_t{0} : it->second);
        totals[n - 1] += cnt;
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (matches[n] == 0 || totals[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  const double bp = std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * std::exp(log_p / static_cast<double>(max_n) + bp);
}

// ---------------------------------------------------------------------------
// finite-difference suite

/// Central-difference checks of every primitive op, the layer building
/// blocks, the loss, and the full model loss for `model_cfg`.
inline std::vector<GradCheckResult> gradcheck_suite(const MscConfig& model_cfg, std::uint64_t seed,
                                                    std::size_t model_entries_per_param = 4) {
  Rng rng(seed, "gradcheck-data");
  auto rnd = [&](Shape s, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(s));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(s), std::move(v), grad);
  };
  auto probe = [](const Tensor& y, const Tensor& w) { return sum(mul(y, w)); };
  GradCheckOptions opt;
  opt.seed = seed;
  std::vector<GradCheckResult> out;
  auto check = [&](const std::string& name, std::function<Tensor()> f, std::vector<Tensor> in) {
    out.push_back(check_gradients(name, f, std::move(in), opt));
  };

  auto a = rnd({2, 3, 4});
  auto b = rnd({4, 5});
  auto bb = rnd({2, 4, 3});
  auto w35 = rnd({2, 3, 5}, false), w33 = rnd({2, 3, 3}, false), w34 = rnd({2, 3, 4}, false);
  auto w53 = rnd({2, 5, 3}, false);
  auto v4 = rnd({4});
  auto g4 = rnd({4}, true, 0.5, 1.5);
  check("matmul", [&] { return probe(matmul(a, b), w35); }, {a, b});
  check("batched_matmul", [&] { return probe(matmul(a, bb), w33); }, {a, bb});
  check("add", [&] { return probe(add(a, v4), w34); }, {a, v4});
  check("sub", [&] { return probe(sub(a, mul(a, a)), w34); }, {a});
  check("mul", [&] { return probe(mul(a, v4), w34); }, {a, v4});
  check("affine", [&] { return probe(one_minus(scale(a, 0.3)), w34); }, {a});
  check("relu", [&] { return probe(relu(a), w34); }, {a});
  check("sigmoid", [&] { return probe(sigmoid(scale(a, 3.0)), w34); }, {a});
  check("tanh", [&] { return probe(msc::tanh(scale(a, 2.0)), w34); }, {a});
  check("softmax", [&] { return probe(softmax(scale(a, 2.0), -1), w34); }, {a});
  Mask m{{2, 1, 4}, {1, 0, 1, 1, 0, 1, 1, 0}};
  check("softmax_masked", [&] { return probe(softmax(a, -1, &m), w34); }, {a});
  check("layer_norm", [&] { return probe(layer_norm(a, g4, v4, 1e-6), w34); }, {a, g4, v4});
  check("transpose", [&] { return probe(transpose(matmul(a, b)), w53); }, {a, b});
  check("reshape_permute",
        [&] { return probe(permute(reshape(a, {2, 3, 2, 2}), {0, 2, 1, 3}), reshape(w34, {2, 2, 3, 2})); }, {a});
  check("sum_squares", [&] { return sum_squares(a); }, {a});
  check("mean", [&] { return mean(mul(a, a)); }, {a});
  auto table = rnd({5, 4});
  check("embedding", [&] { return probe(embedding_lookup(table, {0, 3, 3, 1, 4, 0}, {2, 3}), w34); }, {table});

  AttentionParams ap{rnd({4, 4}), rnd({4, 4}), rnd({4, 4}), rnd({4, 4}), 2};
  auto kv = rnd({2, 2, 4});
  Mask km{{2, 1, 1, 2}, {1, 1, 1, 0}};
  check("attention", [&] { return probe(multi_head_attention(a, kv, kv, &km, ap).output, w34); },
        {a, kv, ap.w_q, ap.w_k, ap.w_v, ap.w_o});
  GruParams gp{rnd({4, 4}), rnd({4, 4}), rnd({4, 4}), rnd({4, 4}), rnd({4, 4}),
               rnd({4, 4}), rnd({4}),    rnd({4}),    rnd({4})};
  auto c0 = rnd({2, 3, 4});
  check("gru_cell", [&] { return probe(gru_cell(c0, a, gp), w34); },
        {c0, a, gp.w_z, gp.w_r, gp.w_h, gp.u_z, gp.u_r, gp.u_h, gp.b_z, gp.b_r, gp.b_h});
  TokenMatrix gold{2, 3, {1, 3, 0, 2, 2, 1}};
  check("label_smoothed_ce", [&] { return label_smoothed_cross_entropy(a, gold, 0.1); }, {a});

  MscModel model(model_cfg, seed);
  TokenMatrix src{2, 4, {}}, tgt_in{2, 3, {}}, tgt_out{2, 3, {}};
  const auto content = static_cast<std::int32_t>(model_cfg.vocab_size - 4);
  for (std::size_t i = 0; i < 8; ++i) src.ids.push_back(4 + static_cast<std::int32_t>(rng.below(content)));
  src.ids[7] = kPadId;
  for (std::size_t i = 0; i < 6; ++i) tgt_out.ids.push_back(4 + static_cast<std::int32_t>(rng.below(content)));
  for (std::size_t r = 0; r < 2; ++r) {
    tgt_in.ids.push_back(kBosId);
    tgt_in.ids.push_back(tgt_out.ids[r * 3]);
    tgt_in.ids.push_back(tgt_out.ids[r * 3 + 1]);
  }
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < model.params().size(); ++i) params.push_back(model.params().at(i));
  GradCheckOptions mopt = opt;
  mopt.max_entries_per_input = model_entries_per_param;
  out.push_back(check_gradients(
      "model_loss",
      [&] { return label_smoothed_cross_entropy(model.forward(src, tgt_in), tgt_out, 0.1); }, params, mopt));
  return out;
}

}  // namespace msc
