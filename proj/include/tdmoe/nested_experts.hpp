// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tdmoe/model.hpp"

namespace tdmoe {

/// Expert widths floor((e+1)/E * H) for e in [0, E). Strictly increasing and
/// ending at H whenever E <= H; E > H raises ConfigError.
std::vector<std::size_t> expert_widths(std::size_t hidden, std::size_t experts);

/// One MLP layer viewed as E nested experts. Expert e uses the first
/// widths[e] rows of w_in and the first widths[e] columns of w_out, so every
/// expert's weights are a prefix of the next one's.
template <typename S>
struct NestedMlp {
  Tensor<S> w_in;   // H x D
  Tensor<S> w_out;  // D x H
  std::vector<std::size_t> widths;
  Activation activation = Activation::silu;

  static NestedMlp create(Tensor<S> w_in, Tensor<S> w_out, std::size_t num_experts,
                          Activation activation);

  std::size_t num_experts() const noexcept { return widths.size(); }
  std::size_t hidden_dim() const noexcept { return w_in.rows(); }
  std::size_t embed_dim() const noexcept { return w_in.cols(); }
};

/// Per-layer neuron importance: sum over calibration tokens of the absolute
/// post-activation hidden value of each of the H units.
struct ImportanceScores {
  std::vector<double> scores;
  std::uint64_t token_count = 0;
};

template <typename S>
void accumulate_importance(ImportanceScores& acc, const Tensor<S>& hidden);

/// Runs the dense model over `calibration` and scores every layer's hidden
/// units. An empty calibration set raises ContractError.
template <typename S>
std::vector<ImportanceScores> importance_scores(const DenseLm<S>& model,
                                                std::span<const TokenBatch> calibration);

/// Hidden-unit order by descending score, ties by ascending original index.
std::vector<std::size_t> importance_order(const ImportanceScores& scores);

/// Permutes w_in rows and w_out columns into importance order. The full-width
/// function is unchanged up to summation order.
template <typename S>
NestedMlp<S> reorder_mlp(const NestedMlp<S>& mlp, const ImportanceScores& scores);

/// Reorders every layer of `model` in place and marks it reordered.
template <typename S>
void reorder_model(DenseLm<S>& model, std::span<const ImportanceScores> scores);

/// Y_e = sigma(X . w_in[0:H_e, :]^T) . w_out[:, 0:H_e]^T, computing only the slice.
template <typename S>
Tensor<S> expert_forward(const NestedMlp<S>& mlp, const Tensor<S>& x, std::size_t expert);

/// All E expert outputs from one full hidden pass. Output e is the running
/// prefix sum over hidden units [0, H_e); it is bit-identical to
/// expert_forward(mlp, x, e) because the kernels accumulate in hidden-unit
/// order and the prefix simply pauses at each width.
template <typename S>
std::vector<Tensor<S>> all_expert_outputs(const NestedMlp<S>& mlp, const Tensor<S>& x);

// Building blocks shared by training and routed inference.

/// sigma(x . w_in[0:width, :]^T), shape B x width.
template <typename S>
Tensor<S> hidden_activations(const Tensor<S>& x, const Tensor<S>& w_in, std::size_t width,
                             Activation activation);

/// Prefix outputs at every width from a full B x H hidden tensor.
template <typename S>
std::vector<Tensor<S>> prefix_outputs(const Tensor<S>& hidden, const Tensor<S>& w_out,
                                      std::span<const std::size_t> widths);

/// hidden [B x width] . w_out[:, 0:width]^T.
template <typename S>
Tensor<S> sliced_output(const Tensor<S>& hidden, const Tensor<S>& w_out, std::size_t width);

/// Differentiable per-token expert selection. Row b of the result is
/// outputs[choices[b]] row b (precomputed by prefix_outputs from `hidden`);
/// gradients reach only the first widths[choices[b]] hidden units of that row
/// and the matching columns of w_out.
template <typename S>
Var<S> nested_select(Graph<S>& g, const Var<S>& hidden, const Var<S>& w_out,
                     std::span<const std::size_t> widths, std::span<const int> choices,
                     const std::vector<Tensor<S>>& outputs);

}  // namespace tdmoe
