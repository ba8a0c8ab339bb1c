// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <span>
#include <vector>

#include "tdmoe/tensor.hpp"

namespace tdmoe {

/// <y_e, y_full> / <y_full, y_full>, accumulated in double. A full output with
/// squared norm below 1e-12 counts as matched by every expert and scores 1.
template <typename S>
double similarity(std::span<const S> expert_row, std::span<const S> full_row);

/// S[b, e] for every token row b and expert e.
struct SimilarityMatrix {
  Tensor<double> scores;  // B x E

  std::size_t tokens() const noexcept { return scores.rows(); }
  std::size_t experts() const noexcept { return scores.cols(); }
  double at(std::size_t b, std::size_t e) const { return scores(b, e); }
};

/// `outputs[e]` is expert e's B x D output; the last entry is the full MLP.
template <typename S>
SimilarityMatrix similarity_matrix(const std::vector<Tensor<S>>& outputs);

/// Throws ConfigError unless 0 < theta < 1.
void validate_theta(double theta);

/// Per token, the smallest e with S[b, e] > theta (strict).
std::vector<int> derive_labels(const SimilarityMatrix& s, double theta);

struct DifficultyLabels {
  std::size_t num_experts = 0;
  std::vector<std::vector<int>> by_layer;  // [layer][token]
};

/// Fraction of tokens per expert class, one row per layer.
std::vector<std::vector<double>> label_distribution(const DifficultyLabels& labels);

/// CSV rows `layer,token_index,label` with a header line.
void write_labels_csv(std::ostream& out, const DifficultyLabels& labels);

}  // namespace tdmoe
