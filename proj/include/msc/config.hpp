// SPDX-License-Identifier: Apache-2.0
//
// Model and training configuration, read from flat `key=value` text.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "msc/error.hpp"

namespace msc {

enum class Mode { baseline, plain_deep, bsc, msc };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::baseline: return "baseline";
    case Mode::plain_deep: return "plain_deep";
    case Mode::bsc: return "bsc";
    case Mode::msc: return "msc";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "baseline") return Mode::baseline;
  if (s == "plain_deep") return Mode::plain_deep;
  if (s == "bsc") return Mode::bsc;
  if (s == "msc") return Mode::msc;
  throw ConfigError("mode", "unknown mode '" + s + "' (expected baseline, plain_deep, bsc or msc)");
}

struct Ablations {
  bool fusion_additive = false;           // A_h + A_c instead of the gated sum
  bool context_cell_as_ffn = false;       // context update through an FFN instead of the GRU
  bool remove_cxt_enc_attention = false;  // decoder cross-attention ignores the context
  bool remove_contextual = false;         // no context state at all (reduces to bsc)
  bool per_block_gru = false;             // one GRU parameter set per block transition
};

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"fusion_additive", "context_cell_as_ffn",
                                                 "remove_cxt_enc_attention", "remove_contextual", "per_block_gru"};
  return names;
}

struct MscConfig {
  std::size_t n_blocks = 2;
  std::vector<std::size_t> layers_per_block = {2, 2};
  std::size_t d_model = 16;
  std::size_t d_ffn = 32;
  std::size_t heads = 2;
  double dp_a = 0.0;
  double dp_r = 0.0;
  Mode mode = Mode::msc;
  Ablations ablations;
  std::size_t vocab_size = 16;
  std::size_t max_len = 64;

  std::size_t encoder_depth() const {
    return std::accumulate(layers_per_block.begin(), layers_per_block.end(), std::size_t{0});
  }
  std::size_t decoder_depth() const { return n_blocks; }
  /// Decoder block n attends encoder block n (rather than the encoder top).
  bool block_scale() const { return mode == Mode::bsc || mode == Mode::msc; }
  /// Carries the context state C^n between blocks.
  bool uses_context() const { return mode == Mode::msc && !ablations.remove_contextual; }

  bool& ablation(const std::string& name) {
    if (name == "fusion_additive") return ablations.fusion_additive;
    if (name == "context_cell_as_ffn") return ablations.context_cell_as_ffn;
    if (name == "remove_cxt_enc_attention") return ablations.remove_cxt_enc_attention;
    if (name == "remove_contextual") return ablations.remove_contextual;
    if (name == "per_block_gru") return ablations.per_block_gru;
    throw ConfigError(name, "unknown ablation flag");
  }

  void validate() const {
    if (n_blocks == 0) throw ConfigError("n_blocks", "must be positive");
    if (layers_per_block.size() != n_blocks) {
      throw ConfigError("layers_per_block", "needs exactly n_blocks=" + std::to_string(n_blocks) + " entries");
    }
    for (std::size_t m : layers_per_block) {
      if (m == 0) throw ConfigError("layers_per_block", "every block needs at least one layer");
    }
    if (d_model == 0) throw ConfigError("d_model", "must be positive");
    if (d_ffn == 0) throw ConfigError("d_ffn", "must be positive");
    if (heads == 0 || d_model % heads != 0) throw ConfigError("heads", "must be positive and divide d_model");
    if (!(dp_a >= 0.0 && dp_a < 1.0)) throw ConfigError("dp_a", "must lie in [0, 1)");
    if (!(dp_r >= 0.0 && dp_r < 1.0)) throw ConfigError("dp_r", "must lie in [0, 1)");
    if (vocab_size < 5) throw ConfigError("vocab_size", "must exceed the 4 reserved ids");
    if (max_len == 0) throw ConfigError("max_len", "must be positive");
  }
};

struct TrainConfig {
  double label_smoothing = 0.1;
  std::size_t warmup_steps = 4000;
  std::size_t max_steps = 1000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double l2_lambda = 0.0;
  std::size_t tokens_per_batch = 2048;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 100;
  std::size_t keep_last = 5;
  double lr_scale = 1.0;  // multiplies the warmup schedule

  void validate() const {
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      throw ConfigError("label_smoothing", "must lie in [0, 1)");
    }
    if (warmup_steps == 0) throw ConfigError("warmup_steps", "must be at least 1");
    if (!(l2_lambda >= 0.0)) throw ConfigError("l2_lambda", "must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1", "must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2", "must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps", "must be positive");
    if (tokens_per_batch == 0) throw ConfigError("tokens_per_batch", "must be positive");
    if (keep_last == 0) throw ConfigError("keep_last", "must be positive");
    if (!(lr_scale > 0.0)) throw ConfigError("lr_scale", "must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

inline std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace detail

/// Ordered key=value pairs; '#' starts a comment line.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected key=value, got '" + t + "'");
    }
    kv.emplace_back(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return kv;
}

/// Applies one key to the model config; false when the key is not a model field.
inline bool apply_model_key(MscConfig& c, const std::string& k, const std::string& v) {
  using namespace detail;
  if (k == "n_blocks") {
    c.n_blocks = parse_size(k, v);
  } else if (k == "layers_per_block") {
    c.layers_per_block.clear();
    std::istringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) c.layers_per_block.push_back(parse_size(k, trim(item)));
  } else if (k == "d_model") {
    c.d_model = parse_size(k, v);
  } else if (k == "d_ffn") {
    c.d_ffn = parse_size(k, v);
  } else if (k == "heads") {
    c.heads = parse_size(k, v);
  } else if (k == "dp_a") {
    c.dp_a = parse_double(k, v);
  } else if (k == "dp_r") {
    c.dp_r = parse_double(k, v);
  } else if (k == "mode") {
    c.mode = parse_mode(v);
  } else if (k == "vocab_size") {
    c.vocab_size = parse_size(k, v);
  } else if (k == "max_len") {
    c.max_len = parse_size(k, v);
  } else {
    for (const auto& name : ablation_names()) {
      if (k == name) {
        c.ablation(name) = parse_bool(k, v);
        return true;
      }
    }
    return false;
  }
  return true;
}

inline bool apply_train_key(TrainConfig& c, const std::string& k, const std::string& v) {
  using namespace detail;
  if (k == "label_smoothing") c.label_smoothing = parse_double(k, v);
  else if (k == "warmup_steps") c.warmup_steps = parse_size(k, v);
  else if (k == "max_steps") c.max_steps = parse_size(k, v);
  else if (k == "adam_beta1") c.adam_beta1 = parse_double(k, v);
  else if (k == "adam_beta2") c.adam_beta2 = parse_double(k, v);
  else if (k == "adam_eps") c.adam_eps = parse_double(k, v);
  else if (k == "l2_lambda") c.l2_lambda = parse_double(k, v);
  else if (k == "tokens_per_batch") c.tokens_per_batch = parse_size(k, v);
  else if (k == "seed") c.seed = parse_size(k, v);
  else if (k == "checkpoint_every") c.checkpoint_every = parse_size(k, v);
  else if (k == "keep_last") c.keep_last = parse_size(k, v);
  else if (k == "lr_scale") c.lr_scale = parse_double(k, v);
  else return false;
  return true;
}

struct RunConfig {
  MscConfig model;
  TrainConfig train;
};

/// Parses model and training keys from one text; unknown keys are errors.
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  for (const auto& [k, v] : parse_key_values(text)) {
    if (apply_model_key(rc.model, k, v)) continue;
    if (apply_train_key(rc.train, k, v)) continue;
    throw ConfigError(k, "unknown configuration key");
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

inline std::string to_text(const MscConfig& c) {
  std::ostringstream os;
  os << "n_blocks=" << c.n_blocks << '\n' << "layers_per_block=";
  for (std::size_t i = 0; i < c.layers_per_block.size(); ++i) os << (i ? "," : "") << c.layers_per_block[i];
  os << '\n'
     << "d_model=" << c.d_model << '\n'
     << "d_ffn=" << c.d_ffn << '\n'
     << "heads=" << c.heads << '\n'
     << "dp_a=" << detail::fmt_double(c.dp_a) << '\n'
     << "dp_r=" << detail::fmt_double(c.dp_r) << '\n'
     << "mode=" << mode_name(c.mode) << '\n';
  MscConfig copy = c;
  for (const auto& name : ablation_names()) os << name << '=' << (copy.ablation(name) ? "true" : "false") << '\n';
  os << "vocab_size=" << c.vocab_size << '\n' << "max_len=" << c.max_len << '\n';
  return os.str();
}

inline std::string to_text(const TrainConfig& c) {
  using detail::fmt_double;
  std::ostringstream os;
  os << "label_smoothing=" << fmt_double(c.label_smoothing) << '\n'
     << "warmup_steps=" << c.warmup_steps << '\n'
     << "max_steps=" << c.max_steps << '\n'
     << "adam_beta1=" << fmt_double(c.adam_beta1) << '\n'
     << "adam_beta2=" << fmt_double(c.adam_beta2) << '\n'
     << "adam_eps=" << fmt_double(c.adam_eps) << '\n'
     << "l2_lambda=" << fmt_double(c.l2_lambda) << '\n'
     << "tokens_per_batch=" << c.tokens_per_batch << '\n'
     << "seed=" << c.seed << '\n'
     << "checkpoint_every=" << c.checkpoint_every << '\n'
     << "keep_last=" << c.keep_last << '\n'
     << "lr_scale=" << fmt_double(c.lr_scale) << '\n';
  return os.str();
}

}  // namespace msc
