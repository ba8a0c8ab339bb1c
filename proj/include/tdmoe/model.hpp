// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tdmoe/corpus.hpp"
#include "tdmoe/ops.hpp"

namespace tdmoe {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 128;
  std::size_t hidden_dim = 512;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t max_seq_len = 64;
  Activation activation = Activation::silu;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the first bad field. `num_experts` is checked
  /// against hidden_dim so every nested expert has a nonzero width.
  void validate(std::size_t num_experts = 1) const;
};

/// Pre-norm decoder block. Weights are stored (out x in); the MLP pair is the
/// two-matrix form w_out . sigma(w_in . x) with w_in [H x D], w_out [D x H].
template <typename S>
struct TransformerBlock {
  Var<S> attn_norm;
  Var<S> wq, wk, wv, wo;
  Var<S> mlp_norm;
  Var<S> w_in;
  Var<S> w_out;
};

template <typename S>
struct DenseLm {
  ModelConfig config;
  Vocabulary vocab;
  Var<S> token_embedding;     // V x D
  Var<S> position_embedding;  // max_seq_len x D
  std::vector<TransformerBlock<S>> blocks;
  Var<S> final_norm;  // D
  Var<S> head;        // V x D
  /// Set once MLP hidden units have been sorted by importance.
  bool reordered = false;

  /// Stable names, in a fixed order, e.g. "layers.2.mlp.w_in".
  std::vector<std::pair<std::string, Var<S>>> named_parameters() const;

  /// Deep copy; the parameters of a plain copy are shared handles.
  DenseLm clone() const;
};

template <typename S>
DenseLm<S> init_dense_lm(const ModelConfig& config, Vocabulary vocab);

template <typename S>
using HiddenObserver = std::function<void(std::size_t layer, const Tensor<S>& hidden)>;

template <typename S>
Var<S> embed_tokens(Graph<S>& g, const DenseLm<S>& model, const TokenBatch& tokens);

/// x + attention(norm(x)) for one block.
template <typename S>
Var<S> attention_residual(Graph<S>& g, const TransformerBlock<S>& block, const Var<S>& x,
                          const ModelConfig& config, std::size_t batch, std::size_t seq);

template <typename S>
Var<S> output_logits(Graph<S>& g, const DenseLm<S>& model, const Var<S>& x);

/// Causal decoder logits, (B*T) x V, with every MLP at full width. The
/// observer, when given, sees each layer's post-activation MLP hidden units.
template <typename S>
Var<S> forward_dense(Graph<S>& g, const DenseLm<S>& model, const TokenBatch& tokens,
                     const HiddenObserver<S>* observer = nullptr);

/// Logits shaped B x T x V, no gradient recording.
template <typename S>
Tensor<S> forward_dense(const DenseLm<S>& model, const TokenBatch& tokens);

/// Next-token cross-entropy averaged over B x (T-1) positions.
template <typename S>
Var<S> lm_loss(Graph<S>& g, const Var<S>& logits, const TokenBatch& tokens);

/// Mean next-token loss over evaluation batches, position-weighted.
template <typename S>
double evaluate_loss(const DenseLm<S>& model, std::span<const TokenBatch> batches);

std::uint64_t dense_param_count(const ModelConfig& config);

}  // namespace tdmoe
