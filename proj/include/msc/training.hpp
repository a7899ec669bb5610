// SPDX-License-Identifier: Apache-2.0
//
// Loss, learning-rate schedule, Adam, L2 penalty, checkpoints and the
// training loop.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "msc/config.hpp"
#include "msc/data.hpp"
#include "msc/error.hpp"
#include "msc/model.hpp"
#include "msc/tensor.hpp"

namespace msc {

// ---------------------------------------------------------------------------
// loss

/// Mean over non-pad targets of -sum_i q_i log softmax(logits)_i, where q puts
/// 1 - eps on the gold token and eps / (V - 1) on every other token.
inline Tensor label_smoothed_cross_entropy(const Tensor& logits, const TokenMatrix& targets, double eps,
                                           std::int32_t pad_id = kPadId) {
  if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("label_smoothing", "must lie in [0, 1)");
  if (logits.rank() != 3 || logits.dim(0) != targets.batch || logits.dim(1) != targets.length) {
    throw DimensionError("cross entropy: logits " + shape_str(logits.shape()) + " do not match targets (" +
                         std::to_string(targets.batch) + "," + std::to_string(targets.length) + ")");
  }
  const std::size_t vocab = logits.dim(2);
  if (vocab < 2) throw DimensionError("cross entropy needs at least 2 classes");
  const std::size_t rows = targets.ids.size();
  const auto& x = logits.values();
  const double off = eps / static_cast<double>(vocab - 1);
  std::vector<double> probs(rows * vocab, 0.0);
  std::vector<char> active(rows, 0);
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t gold = targets.ids[r];
    if (gold == pad_id) continue;
    if (gold < 0 || static_cast<std::size_t>(gold) >= vocab) {
      throw IndexError("target id " + std::to_string(gold) + " at position " + std::to_string(r) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    active[r] = 1;
    ++count;
    const double* row = &x[r * vocab];
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t i = 0; i < vocab; ++i) z += std::exp(row[i] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t i = 0; i < vocab; ++i) {
      const double logp = row[i] - log_z;
      probs[r * vocab + i] = std::exp(logp);
      const double q = static_cast<std::size_t>(gold) == i ? 1.0 - eps : off;
      if (q != 0.0) total -= q * logp;
    }
  }
  if (count == 0) throw ContractViolation("cross entropy: every target is padding");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<std::int32_t> gold_ids = targets.ids;
  return make_result({1}, {total * inv}, {logits},
                     [probs = std::move(probs), active = std::move(active), gold_ids = std::move(gold_ids), vocab, eps,
                      off, inv](detail::Node& self) {
                       double* g = self.input_grad(0);
                       if (!g) return;
                       const double up = self.grad[0] * inv;
                       for (std::size_t r = 0; r < active.size(); ++r) {
                         if (!active[r]) continue;
                         for (std::size_t i = 0; i < vocab; ++i) {
                           const double q = static_cast<std::size_t>(gold_ids[r]) == i ? 1.0 - eps : off;
                           g[r * vocab + i] += up * (probs[r * vocab + i] - q);
                         }
                       }
                     });
}

/// Negative log-likelihood of each row's non-pad targets, summed per row.
inline std::vector<double> sequence_nll(const Tensor& logits, const TokenMatrix& targets) {
  const std::size_t vocab = logits.dim(2);
  const auto& x = logits.values();
  std::vector<double> out(targets.batch, 0.0);
  for (std::size_t b = 0; b < targets.batch; ++b) {
    for (std::size_t t = 0; t < targets.length; ++t) {
      const std::int32_t gold = targets.at(b, t);
      if (gold == kPadId) continue;
      const double* row = &x[(b * targets.length + t) * vocab];
      const double mx = *std::max_element(row, row + vocab);
      double z = 0.0;
      for (std::size_t i = 0; i < vocab; ++i) z += std::exp(row[i] - mx);
      out[b] -= row[gold] - mx - std::log(z);
    }
  }
  return out;
}

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Teacher-forced argmax accuracy over non-pad targets (ties go to the lower id).
inline Accuracy token_accuracy(const Tensor& logits, const TokenMatrix& targets) {
  const std::size_t vocab = logits.dim(2);
  const auto& x = logits.values();
  Accuracy acc;
  for (std::size_t r = 0; r < targets.ids.size(); ++r) {
    if (targets.ids[r] == kPadId) continue;
    const double* row = &x[r * vocab];
    const auto best = static_cast<std::int32_t>(std::max_element(row, row + vocab) - row);
    acc.correct += best == targets.ids[r];
    ++acc.total;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// schedule, optimizer, regularization

/// d^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double lr_schedule(std::size_t step, std::size_t d_model, std::size_t warmup) {
  if (step == 0) throw ContractViolation("lr_schedule: step counts from 1");
  if (warmup == 0) throw ConfigError("warmup_steps", "must be at least 1");
  const double s = static_cast<double>(step);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;

  static OptimState zeros_like(const ParamStore& p) {
    OptimState s;
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m.emplace_back(p.at(i).numel(), 0.0);
      s.v.emplace_back(p.at(i).numel(), 0.0);
    }
    return s;
  }
};

/// One bias-corrected Adam update from the gradients stored on `params`.
inline void adam_step(ParamStore& params, OptimState& state, double lr, double beta1, double beta2, double eps) {
  if (state.m.size() != params.size()) throw ContractViolation("optimizer state does not match parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.at(i).has_grad() && !all_finite(params.at(i).grad_span())) {
      throw NumericError("non-finite gradient in parameter " + params.spec(i).name);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params.at(i);
    if (!p.has_grad()) continue;
    auto g = p.grad_span();
    auto w = p.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }
}

/// Encoder-side weight matrices: encoder layers and the context cell.
inline bool receives_l2(const ParamSpec& s) {
  return s.kind == ParamKind::matrix && (s.name.rfind("enc.", 0) == 0 || s.name.rfind("ctx.", 0) == 0);
}

inline Tensor l2_penalty(const ParamStore& params, double lambda) {
  if (lambda < 0.0) throw ConfigError("l2_lambda", "must be non-negative");
  Tensor total = Tensor::scalar(0.0);
  if (lambda == 0.0) return total;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (receives_l2(params.spec(i))) total = add(total, sum_squares(params.at(i)));
  }
  return scale(total, lambda);
}

// ---------------------------------------------------------------------------
// checkpoints
//
// Little-endian: "MSCK", version u32, config length u64, config text, tensor
// count u32, then per tensor: name length u16, name, rank u8, dims u64 each,
// float32 data.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  MscConfig model;
  TrainConfig train;
  std::size_t step = 0;
  std::vector<std::string> vocab;  // extra tokens beyond the reserved ids
  std::string rng_state;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline std::string checkpoint_config_text(const Checkpoint& c) {
  std::ostringstream os;
  os << to_text(c.model) << to_text(c.train) << "step=" << c.step << '\n' << "vocab=";
  for (std::size_t i = 0; i < c.vocab.size(); ++i) os << (i ? " " : "") << c.vocab[i];
  os << '\n' << "rng=" << c.rng_state << '\n';
  return os.str();
}

inline void parse_checkpoint_config(Checkpoint& c, const std::string& text) {
  for (const auto& [k, v] : parse_key_values(text)) {
    if (apply_model_key(c.model, k, v) || apply_train_key(c.train, k, v)) continue;
    if (k == "step") c.step = detail::parse_size(k, v);
    else if (k == "vocab") c.vocab = split_words(v);
    else if (k == "rng") c.rng_state = v;
    else throw FormatError("checkpoint config has unknown key '" + k + "'");
  }
  c.model.validate();
}

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError(path_ + ": truncated checkpoint");
  }
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out = "MSCK";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = checkpoint_config_text(c);
  detail::put_le<std::uint64_t>(out, cfg.size());
  out += cfg;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long: " + t.name.substr(0, 32));
    if (t.shape.size() > 0xff) throw FormatError("tensor rank too large: " + t.name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::put_le<std::uint64_t>(out, d);
    for (float f : t.data) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  if (r.bytes(4) != "MSCK") throw FormatError(path + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  const auto cfg_len = r.get<std::uint64_t>();
  parse_checkpoint_config(c, r.bytes(cfg_len));
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint64_t>());
    t.data.resize(shape_numel(t.shape));
    for (float& f : t.data) f = std::bit_cast<float>(r.get<std::uint32_t>());
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError(path + ": trailing bytes after last tensor");
  return c;
}

/// Writes through a temporary file and rename so readers never see a partial file.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp, "cannot write checkpoint");
    const std::string bytes = serialize_checkpoint(c);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(tmp, "short write");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path, "rename failed: " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open checkpoint");
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), path);
}

inline NamedTensor to_named(const std::string& name, const Shape& shape, std::span<const double> v) {
  NamedTensor t{name, shape, std::vector<float>(v.size())};
  for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
  return t;
}

inline std::string rng_state_text(const Rng& rng) {
  std::ostringstream os;
  os << rng.engine();
  return os.str();
}

inline Checkpoint make_checkpoint(const MscModel& model, const TrainConfig& train, const OptimState* optim,
                                  std::size_t step, const Vocab& vocab, const Rng* rng = nullptr) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  c.step = step;
  c.vocab.assign(vocab.tokens().begin() + 4, vocab.tokens().end());
  if (rng) c.rng_state = rng_state_text(*rng);
  const ParamStore& p = model.params();
  for (std::size_t i = 0; i < p.size(); ++i) c.tensors.push_back(to_named(p.spec(i).name, p.spec(i).shape, p.at(i).values()));
  if (optim) {
    for (std::size_t i = 0; i < p.size(); ++i) c.tensors.push_back(to_named("adam.m." + p.spec(i).name, p.spec(i).shape, optim->m[i]));
    for (std::size_t i = 0; i < p.size(); ++i) c.tensors.push_back(to_named("adam.v." + p.spec(i).name, p.spec(i).shape, optim->v[i]));
  }
  return c;
}

inline Vocab checkpoint_vocab(const Checkpoint& c) { return Vocab::build(c.vocab); }

/// Model with the checkpoint's config and parameter values.
inline MscModel model_from_checkpoint(const Checkpoint& c) {
  MscModel m(c.model, 0);
  ParamStore& p = m.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const NamedTensor* t = c.find(p.spec(i).name);
    if (!t) throw FormatError("checkpoint lacks parameter " + p.spec(i).name);
    if (t->shape != p.spec(i).shape) {
      throw FormatError("checkpoint parameter " + t->name + " has shape " + shape_str(t->shape) + ", expected " +
                        shape_str(p.spec(i).shape));
    }
    auto dst = p.at(i).mutable_values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = t->data[k];
  }
  return m;
}

/// Adam moments stored in the checkpoint; zeros when absent.
inline OptimState optim_from_checkpoint(const Checkpoint& c, const ParamStore& p) {
  OptimState s = OptimState::zeros_like(p);
  s.step = c.step;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const NamedTensor* m = c.find("adam.m." + p.spec(i).name);
    const NamedTensor* v = c.find("adam.v." + p.spec(i).name);
    if (!m || !v) continue;
    std::copy(m->data.begin(), m->data.end(), s.m[i].begin());
    std::copy(v->data.begin(), v->data.end(), s.v[i].begin());
  }
  return s;
}

/// Elementwise arithmetic mean of every tensor. Each element's values are
/// summed in sorted order, so the result does not depend on argument order.
inline Checkpoint average_checkpoints(const std::vector<Checkpoint>& in) {
  if (in.empty()) throw ContractViolation("average_checkpoints: no checkpoints");
  const Checkpoint& first = in.front();
  const std::string model_text = to_text(first.model);
  for (const auto& c : in) {
    if (to_text(c.model) != model_text) throw ContractViolation("average_checkpoints: model configs differ");
    if (c.vocab != first.vocab) throw ContractViolation("average_checkpoints: vocabularies differ");
    if (c.tensors.size() != first.tensors.size()) throw DimensionError("average_checkpoints: tensor counts differ");
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
      if (c.tensors[i].name != first.tensors[i].name || c.tensors[i].shape != first.tensors[i].shape) {
        throw DimensionError("average_checkpoints: tensor " + std::to_string(i) + " is " + c.tensors[i].name +
                             shape_str(c.tensors[i].shape) + " vs " + first.tensors[i].name +
                             shape_str(first.tensors[i].shape));
      }
    }
  }
  Checkpoint out;
  out.model = first.model;
  out.train = first.train;
  out.vocab = first.vocab;
  for (const auto& c : in) out.step = std::max(out.step, c.step);
  // a sampler state only survives when every input carries the same one
  if (std::all_of(in.begin(), in.end(), [&](const Checkpoint& c) { return c.rng_state == first.rng_state; })) {
    out.rng_state = first.rng_state;
  }
  std::vector<double> vals(in.size());
  for (std::size_t t = 0; t < first.tensors.size(); ++t) {
    NamedTensor avg{first.tensors[t].name, first.tensors[t].shape, std::vector<float>(first.tensors[t].data.size())};
    for (std::size_t k = 0; k < avg.data.size(); ++k) {
      for (std::size_t j = 0; j < in.size(); ++j) vals[j] = in[j].tensors[t].data[k];
      std::sort(vals.begin(), vals.end());
      double s = 0.0;
      for (double v : vals) s += v;
      avg.data[k] = static_cast<float>(s / static_cast<double>(in.size()));
    }
    out.tensors.push_back(std::move(avg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// training loop

struct MetricRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t tokens = 0;
};

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot write metrics");
  out << "step,loss,lr,tokens\n";
  for (const auto& r : rows) out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.lr) << ',' << r.tokens << '\n';
}

/// What one training step exposes to observers after backward.
struct StepView {
  std::size_t step;
  const MscModel& model;
  const Tape& tape;
  const ForwardTrace& trace;
  const Batch& batch;
  double loss;
};

struct TrainOptions {
  std::string out_dir;  // empty: no files written
  Vocab vocab;
  std::function<void(const StepView&)> on_backward;
  bool keep_trace = false;  // collect a ForwardTrace for on_backward
};

struct TrainResult {
  std::vector<MetricRow> metrics;
  std::vector<std::string> checkpoints;  // retained files, oldest first
  std::size_t steps = 0;
};

inline std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%07zu.msck", step);
  return buf;
}

/// Runs max_steps optimizer steps, cycling over token-bucketed batches that
/// are reshuffled every epoch. A non-finite loss raises NumericError; files
/// already written stay in place.
inline TrainResult train_loop(MscModel& model, const TrainConfig& cfg, const std::vector<Pair>& data,
                              const TrainOptions& opt = {}) {
  cfg.validate();
  if (data.empty()) throw ContractViolation("train_loop: empty dataset");
  namespace fs = std::filesystem;
  TrainResult res;
  OptimState optim = OptimState::zeros_like(model.params());
  Rng dropout_rng(cfg.seed, "dropout");

  auto checkpoint = [&](std::size_t step) {
    if (opt.out_dir.empty()) return;
    fs::create_directories(opt.out_dir);
    const std::string path = (fs::path(opt.out_dir) / checkpoint_name(step)).string();
    save_checkpoint(path, make_checkpoint(model, cfg, &optim, step, opt.vocab, &dropout_rng));
    res.checkpoints.push_back(path);
    while (cfg.keep_last > 0 && res.checkpoints.size() > cfg.keep_last) {
      fs::remove(res.checkpoints.front());
      res.checkpoints.erase(res.checkpoints.begin());
    }
  };
  auto flush_metrics = [&] {
    if (!opt.out_dir.empty()) write_metrics_csv((fs::path(opt.out_dir) / "metrics.csv").string(), res.metrics);
  };

  if (cfg.max_steps == 0) {
    checkpoint(0);
    flush_metrics();
    return res;
  }

  std::size_t epoch = 0;
  std::vector<Batch> batches = batch_by_tokens(data, cfg.tokens_per_batch, derive_seed(cfg.seed, "epoch0"));
  std::size_t cursor = 0;
  const std::size_t d = model.config().d_model;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    if (cursor == batches.size()) {
      ++epoch;
      batches = batch_by_tokens(data, cfg.tokens_per_batch, derive_seed(cfg.seed, "epoch" + std::to_string(epoch)));
      cursor = 0;
    }
    const Batch& batch = batches[cursor++];
    const double lr = cfg.lr_scale * lr_schedule(step, d, cfg.warmup_steps);
    model.params().zero_grads();
    Tape tape;
    ForwardTrace trace;
    double loss_value = 0.0;
    {
      TapeScope scope(tape);
      Tensor logits = model.forward(batch.src, batch.tgt_in, {true, &dropout_rng}, opt.keep_trace ? &trace : nullptr);
      Tensor loss = label_smoothed_cross_entropy(logits, batch.tgt_out, cfg.label_smoothing);
      if (cfg.l2_lambda > 0.0) loss = add(loss, l2_penalty(model.params(), cfg.l2_lambda));
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        flush_metrics();
        throw NumericError("non-finite loss at step " + std::to_string(step));
      }
      tape.backward(loss);
    }
    if (opt.on_backward) opt.on_backward(StepView{step, model, tape, trace, batch, loss_value});
    adam_step(model.params(), optim, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    res.metrics.push_back({step, loss_value, lr, batch.target_tokens()});
    res.steps = step;
    if (step % cfg.checkpoint_every == 0 || step == cfg.max_steps) {
      checkpoint(step);
      flush_metrics();
    }
  }
  return res;
}

}  // namespace msc
