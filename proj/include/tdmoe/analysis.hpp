// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tdmoe/adaptation.hpp"

namespace tdmoe {

enum class RouteSource {
  router,  // router argmax
  forced,  // one fixed expert for every token
  oracle,  // the derived label at the model's theta
};

struct RouteOptions {
  RouteSource source = RouteSource::router;
  int forced_expert = -1;
};

template <typename S>
struct RoutedOutput {
  Tensor<S> logits;                       // (B*T) x V
  std::vector<std::vector<int>> choices;  // [layer][b * T + t]
  std::uint64_t mlp_macs = 0;             // multiply-accumulates spent in MLPs
  std::size_t batch = 0;
  std::size_t seq = 0;

  int choice(std::size_t layer, std::size_t b, std::size_t t) const {
    return choices[layer][b * seq + t];
  }
};

/// Inference forward that computes only the chosen expert's weight slice for
/// each token. Tokens are grouped per expert; results are bit-identical to the
/// full-width training forward routed the same way.
template <typename S>
RoutedOutput<S> routed_forward(const AdaptedLm<S>& model, const TokenBatch& tokens,
                               const RouteOptions& options = {});

/// Rows are derived labels, columns router predictions.
struct ConfusionMatrix {
  std::size_t num_experts = 0;
  std::vector<std::uint64_t> counts;  // row-major E x E

  explicit ConfusionMatrix(std::size_t experts = 0)
      : num_experts(experts), counts(experts * experts, 0) {}

  void add(int label, int prediction);
  std::uint64_t at(std::size_t label, std::size_t prediction) const {
    return counts[label * num_experts + prediction];
  }
  std::uint64_t total() const;
  std::uint64_t correct() const;
  std::uint64_t row_total(std::size_t label) const;
  double accuracy() const;
  /// Share of errors with |prediction - label| == 1; 1.0 when there are no errors.
  double adjacent_error_fraction() const;
  bool has_errors() const { return correct() != total(); }
  /// Frequency of the most common label, the accuracy of always guessing it.
  double majority_baseline() const;
  std::vector<std::vector<double>> row_normalized() const;
  /// Every populated row peaks on its diagonal entry.
  bool diagonal_dominant() const;
};

ConfusionMatrix tabulate_confusion(std::span<const int> labels, std::span<const int> predictions,
                                   std::size_t num_experts);

/// Labels at `theta` against router predictions over every layer and token,
/// on the forward routed by `mode`.
template <typename S>
ConfusionMatrix confusion(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                          double theta, RoutingMode mode = RoutingMode::label);

struct UsageReport {
  std::vector<std::vector<double>> fractions;  // [layer][expert]
  std::vector<double> entropy;                 // nats, per layer
  double mean_entropy = 0.0;
  double activated_params = 0.0;
};

/// Entropy in nats of a probability vector, with 0 log 0 = 0.
double entropy(std::span<const double> p);

/// Usage from per-layer expert choices.
UsageReport usage_from_choices(const std::vector<std::vector<int>>& choices,
                               std::size_t num_experts);

/// Parameters multiplied for a token whose MLP layers use `choices`: embeddings,
/// attention, norms, routers and head, plus 2 * D * H_e per layer.
template <typename S>
std::uint64_t activated_params_for(const AdaptedLm<S>& model, std::span<const int> choices);

/// Mean over tokens of activated_params_for, from per-layer choices.
template <typename S>
double mean_activated_params(const AdaptedLm<S>& model,
                             const std::vector<std::vector<int>>& choices);

/// Expert usage under `options` routing (router argmax by default).
template <typename S>
UsageReport expert_usage(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                         const RouteOptions& options = {});

template <typename S>
double activated_params(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                        const RouteOptions& options = {});

/// Mean next-token loss of the routed model, position-weighted.
template <typename S>
double routed_loss(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                   const RouteOptions& options = {});

enum class PerplexityMode { dense, routed };

/// exp(mean next-token cross-entropy). Dense mode runs the base model at full width.
template <typename S>
double perplexity(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                  PerplexityMode mode);

/// Mean per-layer usage entropy of each model on the same data.
template <typename S>
std::pair<double, double> usage_entropy_compare(const AdaptedLm<S>& a, const AdaptedLm<S>& b,
                                                std::span<const TokenBatch> batches);

struct AnalysisMetrics {
  double theta = 0.0;
  double accuracy = 0.0;
  double adjacent_error_fraction = 0.0;
  bool router_errors = false;
  double majority_baseline = 0.0;
  double activated_params = 0.0;
  std::uint64_t dense_params = 0;
  double perplexity = 0.0;
  double dense_perplexity = 0.0;
  double mean_usage_entropy = 0.0;
  std::uint64_t eval_tokens = 0;
};

/// Header `label,pred_0,...,pred_{E-1}`, one row of counts per label.
void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm);
/// Header `layer,expert_0,...,expert_{E-1},entropy`.
void write_usage_csv(std::ostream& out, const UsageReport& usage);
/// Pretty-printed JSON object with sorted keys.
std::string metrics_json(const AnalysisMetrics& m);

}  // namespace tdmoe
