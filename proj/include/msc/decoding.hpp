// SPDX-License-Identifier: Apache-2.0
//
// Greedy and beam-search decoding with the ((5 + len) / 6)^alpha length
// penalty. Lengths count generated tokens including a final <eos>.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "msc/error.hpp"
#include "msc/model.hpp"

namespace msc {

struct Hypothesis {
  std::vector<std::int32_t> tokens;  // generated ids, ending in <eos> when it was emitted
  double log_prob = 0.0;
  bool finished = false;
  double score = 0.0;  // log_prob / length_penalty

  /// Tokens without the terminal <eos>.
  std::vector<std::int32_t> translation() const {
    std::vector<std::int32_t> t = tokens;
    if (!t.empty() && t.back() == kEosId) t.pop_back();
    return t;
  }
};

inline double length_penalty(std::size_t len, double alpha) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

inline double hypothesis_score(double log_prob, std::size_t len, double alpha) {
  return log_prob / length_penalty(len, alpha);
}

namespace detail {

/// Log-softmax of the last position's logits for one prefix.
inline std::vector<double> next_log_probs(const MscModel& model, const EncoderOutput& enc,
                                          const std::vector<std::int32_t>& prefix) {
  TokenMatrix tgt{1, prefix.size() + 1, {}};
  tgt.ids.push_back(kBosId);
  tgt.ids.insert(tgt.ids.end(), prefix.begin(), prefix.end());
  Tensor logits = model.decode(enc, tgt, {});
  const std::size_t vocab = logits.dim(2);
  const double* row = &logits.values()[(tgt.length - 1) * vocab];
  const double mx = *std::max_element(row, row + vocab);
  double z = 0.0;
  for (std::size_t i = 0; i < vocab; ++i) z += std::exp(row[i] - mx);
  const double log_z = mx + std::log(z);
  std::vector<double> out(vocab);
  for (std::size_t i = 0; i < vocab; ++i) out[i] = row[i] - log_z;
  return out;
}

inline EncoderOutput encode_one(const MscModel& model, const std::vector<std::int32_t>& src) {
  if (src.empty()) throw ContractViolation("cannot decode an empty source");
  return model.encode(TokenMatrix{1, src.size(), src}, {});
}

// Higher score first; equal scores go to the lexicographically lower sequence.
inline bool ranks_before(double sa, const std::vector<std::int32_t>& a, double sb, const std::vector<std::int32_t>& b) {
  if (sa != sb) return sa > sb;
  return a < b;
}

}  // namespace detail

/// Argmax token per step (lowest id on ties) until <eos> or max_len tokens.
inline Hypothesis greedy_decode(const MscModel& model, const std::vector<std::int32_t>& src, std::size_t max_len,
                                double alpha = 0.0) {
  if (max_len == 0) throw ContractViolation("max_len must be at least 1");
  NoGradScope no_grad;
  EncoderOutput enc = detail::encode_one(model, src);
  Hypothesis h;
  while (h.tokens.size() < max_len) {
    auto lp = detail::next_log_probs(model, enc, h.tokens);
    const auto best = static_cast<std::int32_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.tokens.push_back(best);
    h.log_prob += lp[static_cast<std::size_t>(best)];
    if (best == kEosId) break;
  }
  h.finished = true;
  h.score = hypothesis_score(h.log_prob, h.tokens.size(), alpha);
  return h;
}

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> nbest;  // every finished hypothesis, best first
};

/// Beam search. Each step expands the active hypotheses and keeps the top
/// (beam - finished) continuations by log-probability; continuations ending
/// in <eos>, or reaching max_len, move to the finished pool. Search stops once
/// no active hypothesis can still beat the best finished score.
inline BeamResult beam_search(const MscModel& model, const std::vector<std::int32_t>& src, std::size_t beam,
                              double alpha, std::size_t max_len) {
  if (beam == 0) throw ContractViolation("beam must be at least 1");
  if (max_len == 0) throw ContractViolation("max_len must be at least 1");
  NoGradScope no_grad;
  EncoderOutput enc = detail::encode_one(model, src);

  struct Candidate {
    std::vector<std::int32_t> tokens;
    double log_prob;
  };
  std::vector<Candidate> active{{{}, 0.0}};
  std::vector<Hypothesis> finished;
  const double best_possible_lp = length_penalty(max_len, alpha);

  while (!active.empty() && finished.size() < beam) {
    std::vector<Candidate> cands;
    for (const auto& a : active) {
      auto lp = detail::next_log_probs(model, enc, a.tokens);
      for (std::size_t id = 0; id < lp.size(); ++id) {
        Candidate c{a.tokens, a.log_prob + lp[id]};
        c.tokens.push_back(static_cast<std::int32_t>(id));
        cands.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(beam - finished.size(), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        return detail::ranks_before(a.log_prob, a.tokens, b.log_prob, b.tokens);
                      });
    cands.resize(keep);
    active.clear();
    for (auto& c : cands) {
      if (c.tokens.back() == kEosId || c.tokens.size() >= max_len) {
        Hypothesis h{c.tokens, c.log_prob, true, hypothesis_score(c.log_prob, c.tokens.size(), alpha)};
        finished.push_back(std::move(h));
      } else {
        active.push_back(std::move(c));
      }
    }
    if (!finished.empty() && !active.empty()) {
      double best_done = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_done = std::max(best_done, f.score);
      // log-probs only fall as tokens are added and the penalty is largest at
      // max_len, so log_prob / lp(max_len) bounds every future score
      double bound = -std::numeric_limits<double>::infinity();
      for (const auto& a : active) {
        const double lp_now = length_penalty(a.tokens.size() + 1, alpha);
        bound = std::max(bound, a.log_prob / std::max(lp_now, best_possible_lp));
      }
      if (bound <= best_done) break;
    }
  }
  std::sort(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return detail::ranks_before(a.score, a.tokens, b.score, b.tokens);
  });
  BeamResult r;
  r.best = finished.front();
  r.nbest = std::move(finished);
  return r;
}

}  // namespace msc
