// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors of doubles with a reverse-mode tape.
//
// Operations record a node on the thread's active Tape (see TapeScope) when at
// least one input requires a gradient. Without an active tape nothing is
// recorded, which is how inference runs.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "msc/error.hpp"

namespace msc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<char> edge_stopped;  // per input; a stopped edge carries no gradient
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }

  /// Gradient buffer of input i, or nullptr when the edge carries no gradient.
  double* input_grad(std::size_t i) {
    if (edge_stopped[i] || !inputs[i]->requires_grad) return nullptr;
    inputs[i]->ensure_grad();
    return inputs[i]->grad.data();
  }
};

}  // namespace detail

/// Handle to a tensor node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  /// Extent of dimension i; negative i counts from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) throw DimensionError("dimension index out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(k)];
  }

  std::span<const double> values() const { return node_->value; }
  /// In-place access for leaves (optimizer updates, checkpoint loading).
  std::span<double> mutable_values() { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient; all zeros when no gradient has reached this node.
  std::vector<double> grad() const {
    return node_->grad.empty() ? std::vector<double>(numel(), 0.0) : node_->grad;
  }
  std::span<const double> grad_span() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    if (numel() != 1) throw ContractViolation("item() on a tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t i = 0;
    for (std::size_t ix : index) {
      if (ix >= node_->shape[i]) throw IndexError("index out of range for " + shape_str(shape()));
      off = off * node_->shape[i] + ix;
      ++i;
    }
    return node_->value[off];
  }

  /// Deep copy of the values with no tape history.
  Tensor detach_copy(bool requires_grad = false) const { return from(shape(), vec(), requires_grad); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(detail::Node&)>);
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of operations. backward() walks it once, newest first.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<detail::Node> n) {
    nodes_.push_back(std::move(n));
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Gradients accumulate into
  /// whatever is already stored; call zero_grads() between independent passes.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractViolation("backward() needs a scalar loss, got shape " +
                              (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (nodes_.empty()) throw ContractViolation("backward() on an empty tape");
    if (!loss.requires_grad()) throw ContractViolation("loss does not depend on any parameter");
    detail::Node* l = loss.node();
    l->ensure_grad();
    l->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (!n.grad.empty() && n.backward) n.backward(n);
    }
    backward_done_ = true;
  }

  /// Clears gradients of every recorded (non-leaf) node.
  void zero_grads() {
    for (auto& n : nodes_) n->grad.clear();
    backward_done_ = false;
  }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

  static Tape*& current() {
    thread_local Tape* active = nullptr;
    return active;
  }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool backward_done_ = false;
};

/// Makes `tape` the active tape of this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(Tape::current()) { Tape::current() = &tape; }
  ~TapeScope() { Tape::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Disables recording for the scope's lifetime.
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape::current()) { Tape::current() = nullptr; }
  ~NoGradScope() { Tape::current() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

/// Builds an op result. The node is recorded with `backward` only when a tape
/// is active and some input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  Tape* tape = Tape::current();
  bool needs = false;
  if (tape != nullptr) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->edge_stopped.assign(node->inputs.size(), 0);
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

/// Blocks (or re-opens) every incoming edge of `t`. Used on identity routes to
/// isolate the gradient arriving through one consumer.
inline void set_gradient_stop(const Tensor& t, bool stopped) {
  auto* n = t.node();
  for (auto& e : n->edge_stopped) e = stopped ? 1 : 0;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace msc
