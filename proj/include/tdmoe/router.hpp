// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string_view>

#include "tdmoe/autodiff.hpp"
#include "tdmoe/rng.hpp"

namespace tdmoe {

enum class RouterNonlinearity { relu, none };

RouterNonlinearity parse_router_nonlinearity(std::string_view name);
std::string_view router_nonlinearity_name(RouterNonlinearity n);

/// Biasless two-projection classifier D -> U -> E.
template <typename S>
struct Router {
  Var<S> w1;  // U x D
  Var<S> w2;  // E x U
  RouterNonlinearity nonlinearity = RouterNonlinearity::relu;

  std::size_t embed_dim() const { return w1.value().cols(); }
  std::size_t hidden_dim() const { return w1.value().rows(); }
  std::size_t num_experts() const { return w2.value().rows(); }
};

/// w1 ~ N(0, 1/D) keeps the hidden layer at unit scale on normalized input;
/// w2 ~ N(0, 0.02^2) starts the classifier near uniform.
template <typename S>
Router<S> init_router(std::size_t embed_dim, std::size_t hidden_dim, std::size_t num_experts,
                      RouterNonlinearity nonlinearity, Rng& rng);

/// logits = rho(x . w1^T) . w2^T, shape B x E.
template <typename S>
Var<S> router_forward(Graph<S>& g, const Router<S>& router, const Var<S>& x);

/// Mean cross-entropy of logits against expert labels.
template <typename S>
Var<S> router_loss(Graph<S>& g, const Var<S>& logits, std::span<const int> labels);

/// Argmax with ties toward the smaller (cheaper) expert.
template <typename S>
int predict_expert(std::span<const S> logits_row);

template <typename S>
std::vector<int> predict_experts(const Tensor<S>& logits);

std::uint64_t router_param_count(std::uint64_t embed_dim, std::uint64_t hidden_dim,
                                 std::uint64_t num_experts, std::uint64_t num_layers);

}  // namespace tdmoe
