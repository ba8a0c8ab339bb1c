// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/difficulty_labels.hpp"

#include <cmath>
#include <string>

#include "tdmoe/errors.hpp"

namespace tdmoe {

template <typename S>
double similarity(std::span<const S> expert_row, std::span<const S> full_row) {
  if (expert_row.size() != full_row.size()) {
    throw ContractError("similarity: rows of length " + std::to_string(expert_row.size()) +
                        " and " + std::to_string(full_row.size()));
  }
  if (full_row.empty()) throw ContractError("similarity: empty rows");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < full_row.size(); ++i) {
    const double f = static_cast<double>(full_row[i]);
    num += static_cast<double>(expert_row[i]) * f;
    den += f * f;
  }
  if (den < 1e-12) return 1.0;
  return num / den;
}

template <typename S>
SimilarityMatrix similarity_matrix(const std::vector<Tensor<S>>& outputs) {
  if (outputs.empty()) throw ContractError("similarity_matrix: no expert outputs");
  const Tensor<S>& full = outputs.back();
  const std::size_t B = full.rows();
  const std::size_t D = full.cols();
  const std::size_t E = outputs.size();
  for (const Tensor<S>& y : outputs) {
    if (y.rows() != B || y.cols() != D) {
      throw ShapeError("similarity_matrix: expert output " + to_string(y.shape()) +
                       " vs full output " + to_string(full.shape()));
    }
  }
  SimilarityMatrix s{Tensor<double>({B, E})};
  for (std::size_t b = 0; b < B; ++b) {
    const std::span<const S> f(full.data() + b * D, D);
    for (std::size_t e = 0; e < E; ++e) {
      s.scores(b, e) = similarity(std::span<const S>(outputs[e].data() + b * D, D), f);
    }
  }
  return s;
}

void validate_theta(double theta) {
  if (!(theta > 0.0 && theta < 1.0)) {
    throw ConfigError("theta", "must lie strictly between 0 and 1, got " + std::to_string(theta));
  }
}

std::vector<int> derive_labels(const SimilarityMatrix& s, double theta) {
  validate_theta(theta);
  const std::size_t E = s.experts();
  std::vector<int> labels(s.tokens());
  for (std::size_t b = 0; b < s.tokens(); ++b) {
    // The last column is 1 up to rounding; fall back to it so every token has a label.
    std::size_t e = 0;
    while (e + 1 < E && !(s.at(b, e) > theta)) ++e;
    labels[b] = static_cast<int>(e);
  }
  return labels;
}

std::vector<std::vector<double>> label_distribution(const DifficultyLabels& labels) {
  std::vector<std::vector<double>> out;
  out.reserve(labels.by_layer.size());
  for (const std::vector<int>& layer : labels.by_layer) {
    std::vector<double> counts(labels.num_experts, 0.0);
    for (int l : layer) {
      if (l < 0 || static_cast<std::size_t>(l) >= labels.num_experts) {
        throw IndexError("label " + std::to_string(l) + " outside [0, " +
                         std::to_string(labels.num_experts) + ")");
      }
      counts[static_cast<std::size_t>(l)] += 1.0;
    }
    if (!layer.empty()) {
      for (double& c : counts) c /= static_cast<double>(layer.size());
    }
    out.push_back(std::move(counts));
  }
  return out;
}

void write_labels_csv(std::ostream& out, const DifficultyLabels& labels) {
  out << "layer,token_index,label\n";
  for (std::size_t l = 0; l < labels.by_layer.size(); ++l) {
    for (std::size_t t = 0; t < labels.by_layer[l].size(); ++t) {
      out << l << ',' << t << ',' << labels.by_layer[l][t] << '\n';
    }
  }
}

template double similarity<float>(std::span<const float>, std::span<const float>);
template double similarity<double>(std::span<const double>, std::span<const double>);
template SimilarityMatrix similarity_matrix<float>(const std::vector<Tensor<float>>&);
template SimilarityMatrix similarity_matrix<double>(const std::vector<Tensor<double>>&);

}  // namespace tdmoe
