// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>

#include "tdmoe/autodiff.hpp"

namespace tdmoe {

enum class Activation { silu, relu };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

template <typename S>
inline S sigmoid(S x) {
  if (x >= S{0}) return S{1} / (S{1} + std::exp(-x));
  const S e = std::exp(x);
  return e / (S{1} + e);
}

/// sigma(x); the single definition every forward path goes through.
template <typename S>
inline S activate(S x, Activation a) {
  if (a == Activation::relu) return x > S{0} ? x : S{0};
  return x * sigmoid(x);
}

template <typename S>
inline S activate_derivative(S x, Activation a) {
  if (a == Activation::relu) return x > S{0} ? S{1} : S{0};
  const S s = sigmoid(x);
  return s + x * s * (S{1} - s);
}

template <typename S>
void activate_inplace(Tensor<S>& t, Activation a) {
  for (S& v : t.values()) v = activate(v, a);
}

// Differentiable operations. All matrices are row-major; rank-3 inputs are
// treated as (rows x last-dim) matrices.

/// a [m x k] times b [k x n].
template <typename S>
Var<S> matmul(Graph<S>& g, const Var<S>& a, const Var<S>& b);

/// x [m x k] times the transpose of w [n x k]; the projection used by every
/// weight matrix stored as (out x in).
template <typename S>
Var<S> linear(Graph<S>& g, const Var<S>& x, const Var<S>& w);

template <typename S>
Var<S> add(Graph<S>& g, const Var<S>& a, const Var<S>& b);

/// Elementwise product.
template <typename S>
Var<S> mul(Graph<S>& g, const Var<S>& a, const Var<S>& b);

template <typename S>
Var<S> scale(Graph<S>& g, const Var<S>& a, S factor);

/// Sum of all elements, left to right, as a shape-[1] scalar.
template <typename S>
Var<S> sum(Graph<S>& g, const Var<S>& a);

template <typename S>
Var<S> activation(Graph<S>& g, const Var<S>& x, Activation a);

/// Row-wise RMS normalization with a learned per-column gain.
template <typename S>
Var<S> rms_norm(Graph<S>& g, const Var<S>& x, const Var<S>& gain, S eps = S(1e-5));

/// Gathers rows of `table` [V x D]; ids outside [0, V) raise IndexError.
template <typename S>
Var<S> embedding(Graph<S>& g, const Var<S>& table, std::span<const int> ids);

/// Multi-head causal self-attention over q, k, v of shape (batch*seq) x D.
template <typename S>
Var<S> causal_attention(Graph<S>& g, const Var<S>& q, const Var<S>& k, const Var<S>& v,
                        std::size_t batch, std::size_t seq, std::size_t heads);

/// Mean over rows of -log softmax(logits)[target], max-stabilized.
template <typename S>
Var<S> cross_entropy(Graph<S>& g, const Var<S>& logits, std::span<const int> targets);

template <typename S>
Var<S> select_rows(Graph<S>& g, const Var<S>& x, std::span<const std::size_t> rows);

/// Same value, cut from the graph.
template <typename S>
Var<S> detach(const Var<S>& x) {
  return Var<S>::constant(x.value());
}

/// Column vector [B x 1] of softmax(logits[b])[cols[b]].
template <typename S>
Var<S> softmax_pick(Graph<S>& g, const Var<S>& logits, std::span<const int> cols);

/// Scales row b of x by factors[b] (factors is B x 1).
template <typename S>
Var<S> scale_rows(Graph<S>& g, const Var<S>& x, const Var<S>& factors);

}  // namespace tdmoe
