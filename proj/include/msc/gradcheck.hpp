// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "msc/rng.hpp"
#include "msc/tensor.hpp"

namespace msc {

struct GradCheckOptions {
  double step = 1e-5;       // central-difference half width
  double tolerance = 1e-6;  // max allowed relative error
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // near-zero gradients from turning round-off into large ratios.
  double floor = 1e-3;
  std::size_t max_entries_per_input = 0;  // 0 checks every entry
  std::uint64_t seed = 0;                 // picks entries when sampling
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the tape gradient of `loss_fn` with respect to each of `inputs`
/// (leaves with requires_grad) against central finite differences.
inline GradCheckResult check_gradients(std::string name, const std::function<Tensor()>& loss_fn,
                                       std::vector<Tensor> inputs, const GradCheckOptions& opt = {}) {
  GradCheckResult res;
  res.name = std::move(name);
  for (auto& t : inputs) t.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  Rng pick(opt.seed, "gradcheck");
  NoGradScope no_grad;
  for (auto& t : inputs) {
    const std::vector<double> analytic = t.grad();
    std::vector<std::size_t> entries(t.numel());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (opt.max_entries_per_input > 0 && entries.size() > opt.max_entries_per_input) {
      pick.shuffle(entries);
      entries.resize(opt.max_entries_per_input);
    }
    auto vals = t.mutable_values();
    for (std::size_t i : entries) {
      const double orig = vals[i];
      vals[i] = orig + opt.step;
      const double fp = loss_fn().item();
      vals[i] = orig - opt.step;
      const double fm = loss_fn().item();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[i], numeric, opt.floor));
      ++res.entries;
    }
    t.zero_grad();
  }
  res.passed = std::isfinite(res.max_rel_error) && res.max_rel_error < opt.tolerance;
  return res;
}

}  // namespace msc
