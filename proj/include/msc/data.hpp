// SPDX-License-Identifier: Apache-2.0
//
// Toy sequence-to-sequence tasks, the joint vocabulary, and token-budget
// batching.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "msc/error.hpp"
#include "msc/model.hpp"
#include "msc/rng.hpp"

namespace msc {

using TokenIds = std::vector<std::int32_t>;

/// Token <-> id bijection; ids 0..3 are pad, bos, eos, unk.
class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
  }

  /// Reserved ids followed by `extra` in order.
  static Vocab build(const std::vector<std::string>& extra) {
    Vocab v;
    for (const auto& t : extra) v.add(t);
    return v;
  }

  /// w4 .. w{size-1}, so that token "w<k>" has id k.
  static Vocab toy(std::size_t size) {
    if (size < 4) throw ConfigError("vocab_size", "must cover the 4 reserved ids");
    Vocab v;
    for (std::size_t i = 4; i < size; ++i) v.add("w" + std::to_string(i));
    return v;
  }

  /// Every distinct token of the corpus, ordered by (length, text).
  static Vocab from_corpus(const std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>>& pairs) {
    std::unordered_set<std::string> seen;
    for (const auto& [s, t] : pairs) {
      seen.insert(s.begin(), s.end());
      seen.insert(t.begin(), t.end());
    }
    Vocab base;
    std::vector<std::string> extra;
    for (const auto& t : seen)
      if (!base.contains(t)) extra.push_back(t);
    std::sort(extra.begin(), extra.end(), [](const std::string& a, const std::string& b) {
      return a.size() != b.size() ? a.size() < b.size() : a < b;
    });
    return build(extra);
  }

  void add(const std::string& token) {
    if (token.empty() || token.find_first_of(" \t\r\n") != std::string::npos) {
      throw ContractViolation("vocabulary token '" + token + "' is empty or contains whitespace");
    }
    if (index_.count(token)) throw ContractViolation("duplicate vocabulary token '" + token + "'");
    index_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(token);
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& t) const { return index_.count(t) != 0; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::int32_t id(const std::string& t) const {
    auto it = index_.find(t);
    return it == index_.end() ? kUnkId : it->second;
  }
  /// Like id() but unknown tokens are errors.
  std::int32_t strict_id(const std::string& t) const {
    auto it = index_.find(t);
    if (it == index_.end()) throw ContractViolation("token '" + t + "' is not in the vocabulary");
    return it->second;
  }
  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenIds encode(const std::vector<std::string>& words) const {
    TokenIds out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }
  std::vector<std::string> decode(const TokenIds& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (auto i : ids) out.push_back(token(i));
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

inline std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// tasks

enum class TaskKind { copy, reverse, sort, substitution_translation };

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "sort") return TaskKind::sort;
  if (s == "substitution_translation") return TaskKind::substitution_translation;
  throw ConfigError("task", "unknown task kind '" + s + "'");
}

struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  std::size_t vocab_size = 16;
  std::size_t min_len = 1;
  std::size_t max_len = 8;
  std::size_t train_size = 1000;
  std::size_t valid_size = 100;
  std::size_t test_size = 100;
  std::uint64_t seed = 1;
};

struct Pair {
  TokenIds src;
  TokenIds tgt;
};

struct TaskData {
  std::vector<Pair> train, valid, test;
  TokenIds mapping;  // substitution table indexed by id; empty for other tasks
};

/// Maps every token through `mapping`, then swaps positions (0,1), (2,3), ...
inline TokenIds substitute_and_swap(const TokenIds& src, const TokenIds& mapping) {
  TokenIds out;
  out.reserve(src.size());
  for (auto id : src) {
    if (id < 0 || static_cast<std::size_t>(id) >= mapping.size()) {
      throw IndexError("substitution: id " + std::to_string(id) + " has no mapping");
    }
    out.push_back(mapping[static_cast<std::size_t>(id)]);
  }
  for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
  return out;
}

/// Seeded bijection over the content ids; reserved ids map to themselves.
inline TokenIds substitution_mapping(std::size_t vocab_size, std::uint64_t seed) {
  TokenIds content(vocab_size - 4);
  std::iota(content.begin(), content.end(), 4);
  Rng rng(seed, "substitution");
  rng.shuffle(content);
  TokenIds mapping{0, 1, 2, 3};
  mapping.insert(mapping.end(), content.begin(), content.end());
  return mapping;
}

inline TokenIds task_target(TaskKind kind, const TokenIds& src, const TokenIds& mapping) {
  switch (kind) {
    case TaskKind::copy:
      return src;
    case TaskKind::reverse:
      return TokenIds(src.rbegin(), src.rend());
    case TaskKind::sort: {
      TokenIds t = src;
      std::sort(t.begin(), t.end());
      return t;
    }
    case TaskKind::substitution_translation:
      return substitute_and_swap(src, mapping);
  }
  return src;
}

/// Deterministic train/valid/test corpora. Valid and test sources never
/// repeat a train source (nor each other).
inline TaskData generate_task(const TaskSpec& spec) {
  if (spec.vocab_size < 6) throw ConfigError("vocab_size", "needs at least two content tokens beyond the 4 reserved ids");
  if (spec.min_len < 1 || spec.max_len < spec.min_len) throw ConfigError("min_len", "need 1 <= min_len <= max_len");
  TaskData data;
  if (spec.kind == TaskKind::substitution_translation) data.mapping = substitution_mapping(spec.vocab_size, spec.seed);
  Rng rng(spec.seed, "task");
  const std::size_t content = spec.vocab_size - 4;
  auto sample = [&] {
    const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    TokenIds s(len);
    for (auto& id : s) id = static_cast<std::int32_t>(4 + rng.below(content));
    return s;
  };
  auto key = [](const TokenIds& s) { return std::string(reinterpret_cast<const char*>(s.data()), s.size() * 4); };

  std::unordered_set<std::string> held_out;
  for (std::size_t i = 0; i < spec.train_size; ++i) {
    TokenIds s = sample();
    data.train.push_back({s, task_target(spec.kind, s, data.mapping)});
  }
  std::unordered_set<std::string> train_keys;
  for (const auto& p : data.train) train_keys.insert(key(p.src));
  auto fill = [&](std::vector<Pair>& out, std::size_t n) {
    std::size_t attempts = 0;
    while (out.size() < n) {
      if (++attempts > 100 * (n + 10)) throw ConfigError("test_size", "cannot draw enough sequences unseen in training");
      TokenIds s = sample();
      const std::string k = key(s);
      if (train_keys.count(k) || !held_out.insert(k).second) continue;
      out.push_back({s, task_target(spec.kind, s, data.mapping)});
    }
  };
  fill(data.valid, spec.valid_size);
  fill(data.test, spec.test_size);
  return data;
}

// ---------------------------------------------------------------------------
// batching

struct Batch {
  TokenMatrix src;      // [b, t_s], padded
  TokenMatrix tgt_in;   // [b, t_t], <bos> y
  TokenMatrix tgt_out;  // [b, t_t], y <eos>
  std::vector<std::size_t> rows;  // dataset indices

  std::size_t target_tokens() const {
    return static_cast<std::size_t>(std::count_if(tgt_out.ids.begin(), tgt_out.ids.end(),
                                                  [](std::int32_t id) { return id != kPadId; }));
  }
};

inline Batch make_batch(const std::vector<Pair>& data, const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw ContractViolation("make_batch: no rows");
  std::vector<TokenIds> src, tin, tout;
  for (std::size_t r : rows) {
    const Pair& p = data.at(r);
    if (p.src.empty()) throw ContractViolation("pair " + std::to_string(r) + " has an empty source");
    src.push_back(p.src);
    TokenIds in{kBosId};
    in.insert(in.end(), p.tgt.begin(), p.tgt.end());
    TokenIds out = p.tgt;
    out.push_back(kEosId);
    tin.push_back(std::move(in));
    tout.push_back(std::move(out));
  }
  return {pad_sequences(src), pad_sequences(tin), pad_sequences(tout), rows};
}

/// Length of a pair for the token budget: max of the raw source and target lengths.
inline std::size_t pair_length(const Pair& p) { return std::max(p.src.size(), p.tgt.size()); }

/// Sorts by length, fills batches while rows * max_len <= tokens_per_batch,
/// then shuffles batch order with `seed`.
inline std::vector<Batch> batch_by_tokens(const std::vector<Pair>& data, std::size_t tokens_per_batch,
                                          std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i : order) {
    if (pair_length(data[i]) > tokens_per_batch) {
      throw ContractViolation("pair " + std::to_string(i) + " has length " + std::to_string(pair_length(data[i])) +
                              " above tokens_per_batch " + std::to_string(tokens_per_batch));
    }
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (data[a].src.size() != data[b].src.size()) return data[a].src.size() < data[b].src.size();
    return data[a].tgt.size() < data[b].tgt.size();
  });
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> cur;
  std::size_t cur_max = 0;
  for (std::size_t i : order) {
    const std::size_t len = pair_length(data[i]);
    const std::size_t next_max = std::max(cur_max, len);
    if (!cur.empty() && (cur.size() + 1) * next_max > tokens_per_batch) {
      groups.push_back(std::move(cur));
      cur.clear();
      cur_max = 0;
    }
    cur.push_back(i);
    cur_max = std::max(cur_max, len);
  }
  if (!cur.empty()) groups.push_back(std::move(cur));
  Rng rng(seed, "batches");
  rng.shuffle(groups);
  std::vector<Batch> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(make_batch(data, g));
  return out;
}

// ---------------------------------------------------------------------------
// files: one pair per line, "src tokens<TAB>tgt tokens"

using TextPair = std::pair<std::vector<std::string>, std::vector<std::string>>;

inline std::vector<TextPair> read_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open dataset");
  std::vector<TextPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'src<TAB>tgt'");
    }
    out.emplace_back(split_words(line.substr(0, tab)), split_words(line.substr(tab + 1)));
  }
  return out;
}

inline void write_tsv(const std::string& path, const std::vector<Pair>& data, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot write dataset");
  for (const auto& p : data) out << join_words(vocab.decode(p.src)) << '\t' << join_words(vocab.decode(p.tgt)) << '\n';
}

inline std::vector<Pair> encode_pairs(const std::vector<TextPair>& text, const Vocab& vocab) {
  std::vector<Pair> out;
  out.reserve(text.size());
  for (const auto& [s, t] : text) out.push_back({vocab.encode(s), vocab.encode(t)});
  return out;
}

}  // namespace msc
