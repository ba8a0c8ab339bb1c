// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "tdmoe/tensor.hpp"

namespace tdmoe {

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // unset until the first accumulation
  bool requires_grad = false;
  std::function<void(const Tensor<S>&)> backward;

  /// Gradient storage, zero-filled on first use.
  Tensor<S>& grad_buffer() {
    if (grad.empty()) grad = Tensor<S>(value.shape());
    return grad;
  }
};

/// Shared handle to a value in the computation. Parameters are leaves that
/// keep their gradient across backward passes until `zero_grad`.
template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<S> value) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<S> value) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor<S>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<S>(); }

  Node<S>* node() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<Node<S>> node_;
};

/// Ordered record of differentiable operations.
///
/// Operations append themselves when recording is on and any input requires a
/// gradient; recording order is a topological order by construction, so
/// `backward` walks the tape once in reverse.
template <typename S>
class Graph {
 public:
  using Backward = std::function<void(const Tensor<S>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// A graph that never records; ops evaluate values only.
  static Graph inference() {
    Graph g;
    g.recording_ = false;
    return g;
  }
  Graph(Graph&&) = default;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return tape_.size(); }

  /// True when an op over `inputs` must be recorded.
  bool needs_grad(std::initializer_list<const Var<S>*> inputs) const {
    if (!recording_) return false;
    for (const Var<S>* v : inputs) {
      if (v->requires_grad()) return true;
    }
    return false;
  }

  /// Wraps `value` as an op output. `make_backward` is only invoked when the
  /// op is recorded; it receives the output node so rules can read the result.
  template <typename MakeBackward>
  Var<S> record(Tensor<S> value, bool track, MakeBackward&& make_backward) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    if (track) {
      n->requires_grad = true;
      n->backward = make_backward(n.get());
      tape_.push_back(n);
    }
    return Var<S>(std::move(n));
  }

  void backward(const Var<S>& loss);

 private:
  bool recording_ = true;
  std::vector<std::shared_ptr<Node<S>>> tape_;
};

/// Adds `delta` into v's gradient when v requires one.
template <typename S>
void accumulate_grad(const Var<S>& v, const Tensor<S>& delta) {
  if (!v.requires_grad()) return;
  Tensor<S>& g = v.node()->grad_buffer();
  S* dst = g.data();
  const S* src = delta.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

}  // namespace tdmoe
