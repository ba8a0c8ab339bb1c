// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "tdmoe/difficulty_labels.hpp"
#include "tdmoe/nested_experts.hpp"
#include "tdmoe/router.hpp"

namespace tdmoe {

struct AdaptConfig {
  double theta = 0.8;
  double lambda_llm = 0.2;
  double lambda_router = 1.0;
  std::size_t steps = 2000;
  std::size_t batch = 16;
  double lr = 3e-4;
  double weight_decay = 0.0;
  bool freeze_attention = true;
  /// Train without router loss: route by prediction and scale the chosen
  /// expert's output by its router probability.
  bool ablation_mode = false;
  /// Reorder an unreordered base before adapting instead of rejecting it.
  bool auto_reorder = true;
  std::size_t num_experts = 4;
  std::size_t router_hidden = 64;
  RouterNonlinearity router_nonlinearity = RouterNonlinearity::relu;
  /// Leading training tokens used to score hidden units for reordering.
  std::size_t calibration_tokens = 16384;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// A dense model whose MLPs are read as nested experts, plus one router per layer.
template <typename S>
struct AdaptedLm {
  DenseLm<S> base;
  std::vector<std::size_t> widths;
  std::vector<Router<S>> routers;
  AdaptConfig config;

  std::size_t num_experts() const noexcept { return widths.size(); }
  double theta() const noexcept { return config.theta; }

  std::vector<std::pair<std::string, Var<S>>> named_parameters() const;
  AdaptedLm clone() const;
};

/// Wraps a reordered base with fresh routers seeded from `config.seed`.
template <typename S>
AdaptedLm<S> init_adapted(DenseLm<S> base, const AdaptConfig& config);

enum class RoutingMode {
  label,              // teacher forcing by the derived label
  prediction,         // router argmax
  prediction_scaled,  // router argmax, output scaled by its probability
  forced,             // one fixed expert for every token
};

template <typename S>
struct AdaptForward {
  Var<S> logits;       // (B*T) x V
  Var<S> router_loss;  // mean over layers of per-layer mean cross-entropy
  DifficultyLabels labels;
  std::vector<std::vector<int>> predictions;  // [layer][token]
  std::vector<std::vector<int>> choices;      // expert actually applied
};

/// Full-width training forward. Every layer computes all expert outputs, the
/// similarity labels at the model's theta and router logits on the detached
/// normalized MLP input; the expert picked by `mode` feeds the residual stream.
template <typename S>
AdaptForward<S> adapt_forward(Graph<S>& g, const AdaptedLm<S>& model, const TokenBatch& tokens,
                              RoutingMode mode, int forced_expert = -1);

/// lambda_llm * llm_loss + lambda_router * router_loss.
template <typename S>
Var<S> combined_loss(Graph<S>& g, const Var<S>& llm_loss, const Var<S>& router_loss,
                     const AdaptConfig& config);

struct AdaptLogRow {
  std::size_t step = 0;
  double llm_loss = 0.0;
  double router_loss = 0.0;
  double router_acc = 0.0;
};

template <typename S>
struct AdaptResult {
  AdaptedLm<S> model;
  std::vector<AdaptLogRow> log;
  /// Label counts over every training token and layer, for baselines.
  std::vector<std::uint64_t> label_counts;
};

/// Importance-reorders `base` using the leading calibration tokens of `train`.
template <typename S>
DenseLm<S> reorder_for_adaptation(const DenseLm<S>& base, std::span<const int> train,
                                  const AdaptConfig& config);

/// Fine-tunes MLPs and routers. Embeddings, norms and the head stay frozen,
/// attention too when freeze_attention is set. Writes a
/// `step,llm_loss,router_loss,router_acc` CSV to `log_csv` when given.
template <typename S>
AdaptResult<S> adapt(const DenseLm<S>& base, const Corpus& corpus, const AdaptConfig& config,
                     std::ostream* log_csv = nullptr);

/// One independent adaptation per theta from a shared reordered base.
template <typename S>
std::vector<AdaptResult<S>> build_family(const DenseLm<S>& base, const Corpus& corpus,
                                         std::span<const double> thetas,
                                         const AdaptConfig& config,
                                         std::vector<std::ostream*> log_csvs = {});

}  // namespace tdmoe
