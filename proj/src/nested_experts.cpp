// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/nested_experts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tdmoe/kernels.hpp"

namespace tdmoe {

std::vector<std::size_t> expert_widths(std::size_t hidden, std::size_t experts) {
  if (experts == 0) throw ConfigError("num_experts", "must be at least 1");
  if (experts > hidden) {
    throw ConfigError("num_experts", std::to_string(experts) + " experts over hidden width " +
                                         std::to_string(hidden) +
                                         " would create a zero-width expert");
  }
  std::vector<std::size_t> widths(experts);
  for (std::size_t e = 0; e < experts; ++e) widths[e] = (e + 1) * hidden / experts;
  return widths;
}

template <typename S>
NestedMlp<S> NestedMlp<S>::create(Tensor<S> w_in, Tensor<S> w_out, std::size_t num_experts,
                                  Activation activation) {
  if (w_in.rank() != 2 || w_out.rank() != 2 || w_in.rows() != w_out.cols() ||
      w_in.cols() != w_out.rows()) {
    throw ShapeError("nested MLP needs w_in [H x D] and w_out [D x H], got " +
                     to_string(w_in.shape()) + " and " + to_string(w_out.shape()));
  }
  NestedMlp m;
  m.widths = expert_widths(w_in.rows(), num_experts);
  m.w_in = std::move(w_in);
  m.w_out = std::move(w_out);
  m.activation = activation;
  return m;
}

template <typename S>
void accumulate_importance(ImportanceScores& acc, const Tensor<S>& hidden) {
  const std::size_t width = hidden.cols();
  if (acc.scores.empty()) acc.scores.assign(width, 0.0);
  if (acc.scores.size() != width) {
    throw ShapeError("importance: " + std::to_string(width) + " hidden units, expected " +
                     std::to_string(acc.scores.size()));
  }
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    const S* row = hidden.data() + r * width;
    for (std::size_t h = 0; h < width; ++h) acc.scores[h] += std::abs(static_cast<double>(row[h]));
  }
  acc.token_count += hidden.rows();
}

template <typename S>
std::vector<ImportanceScores> importance_scores(const DenseLm<S>& model,
                                                std::span<const TokenBatch> calibration) {
  std::size_t tokens = 0;
  for (const TokenBatch& tb : calibration) tokens += tb.tokens();
  if (tokens == 0) throw ContractError("importance_scores: calibration set is empty");

  std::vector<ImportanceScores> out(model.blocks.size());
  for (ImportanceScores& s : out) s.scores.assign(model.config.hidden_dim, 0.0);
  const HiddenObserver<S> observer = [&out](std::size_t layer, const Tensor<S>& hidden) {
    accumulate_importance(out[layer], hidden);
  };
  for (const TokenBatch& tb : calibration) {
    Graph<S> g = Graph<S>::inference();
    forward_dense(g, model, tb, &observer);
  }
  return out;
}

std::vector<std::size_t> importance_order(const ImportanceScores& scores) {
  std::vector<std::size_t> order(scores.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.scores[a] > scores.scores[b];
  });
  return order;
}

namespace {

template <typename S>
void permute_hidden(Tensor<S>& w_in, Tensor<S>& w_out, std::span<const std::size_t> order) {
  const std::size_t H = w_in.rows();
  const std::size_t D = w_in.cols();
  Tensor<S> in(w_in.shape());
  Tensor<S> out(w_out.shape());
  for (std::size_t dst = 0; dst < H; ++dst) {
    const std::size_t src = order[dst];
    std::copy_n(w_in.data() + src * D, D, in.data() + dst * D);
    for (std::size_t d = 0; d < D; ++d) out[d * H + dst] = w_out[d * H + src];
  }
  w_in = std::move(in);
  w_out = std::move(out);
}

}  // namespace

template <typename S>
NestedMlp<S> reorder_mlp(const NestedMlp<S>& mlp, const ImportanceScores& scores) {
  if (scores.scores.size() != mlp.hidden_dim()) {
    throw ContractError("reorder_mlp: " + std::to_string(scores.scores.size()) +
                        " scores for hidden width " + std::to_string(mlp.hidden_dim()));
  }
  NestedMlp<S> out = mlp;
  permute_hidden(out.w_in, out.w_out, importance_order(scores));
  return out;
}

template <typename S>
void reorder_model(DenseLm<S>& model, std::span<const ImportanceScores> scores) {
  if (scores.size() != model.blocks.size()) {
    throw ContractError("reorder_model: " + std::to_string(scores.size()) + " score sets for " +
                        std::to_string(model.blocks.size()) + " layers");
  }
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    TransformerBlock<S>& b = model.blocks[l];
    if (scores[l].scores.size() != b.w_in.value().rows()) {
      throw ContractError("reorder_model: layer " + std::to_string(l) + " score length mismatch");
    }
    permute_hidden(b.w_in.mutable_value(), b.w_out.mutable_value(), importance_order(scores[l]));
  }
  model.reordered = true;
}

template <typename S>
Tensor<S> hidden_activations(const Tensor<S>& x, const Tensor<S>& w_in, std::size_t width,
                             Activation activation) {
  Tensor<S> h = kernels::matmul_nt(x, w_in, width);
  activate_inplace(h, activation);
  return h;
}

template <typename S>
std::vector<Tensor<S>> prefix_outputs(const Tensor<S>& hidden, const Tensor<S>& w_out,
                                      std::span<const std::size_t> widths) {
  const std::size_t B = hidden.rows();
  const std::size_t H = hidden.cols();
  const std::size_t D = w_out.rows();
  if (w_out.cols() != H || widths.empty() || widths.back() != H) {
    throw ShapeError("prefix_outputs: hidden " + to_string(hidden.shape()) + " vs w_out " +
                     to_string(w_out.shape()));
  }
  const Tensor<S> packed = kernels::transpose(w_out);  // H x D
  std::vector<Tensor<S>> out;
  out.reserve(widths.size());
  std::size_t begin = 0;
  for (std::size_t e = 0; e < widths.size(); ++e) {
    Tensor<S> y = e == 0 ? Tensor<S>({B, D}) : out.back();
    kernels::gemm_nn(hidden.data(), H, packed.data(), D, y.data(), D, B, D, begin, widths[e],
                     e > 0);
    begin = widths[e];
    out.push_back(std::move(y));
  }
  return out;
}

template <typename S>
Tensor<S> sliced_output(const Tensor<S>& hidden, const Tensor<S>& w_out, std::size_t width) {
  if (hidden.cols() != width || width > w_out.cols()) {
    throw ShapeError("sliced_output: hidden " + to_string(hidden.shape()) + " with width " +
                     std::to_string(width) + " vs w_out " + to_string(w_out.shape()));
  }
  const std::size_t D = w_out.rows();
  const std::size_t H = w_out.cols();
  // First `width` columns of w_out, transposed to width x D.
  Tensor<S> packed({width, D});
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t h = 0; h < width; ++h) packed[h * D + d] = w_out[d * H + h];
  }
  Tensor<S> y({hidden.rows(), D});
  kernels::gemm_nn(hidden.data(), width, packed.data(), D, y.data(), D, hidden.rows(), D, 0,
                   width, false);
  return y;
}

template <typename S>
Tensor<S> expert_forward(const NestedMlp<S>& mlp, const Tensor<S>& x, std::size_t expert) {
  if (expert >= mlp.num_experts()) {
    throw IndexError("expert " + std::to_string(expert) + " outside [0, " +
                     std::to_string(mlp.num_experts()) + ")");
  }
  const std::size_t width = mlp.widths[expert];
  return sliced_output(hidden_activations(x, mlp.w_in, width, mlp.activation), mlp.w_out, width);
}

template <typename S>
std::vector<Tensor<S>> all_expert_outputs(const NestedMlp<S>& mlp, const Tensor<S>& x) {
  return prefix_outputs(hidden_activations(x, mlp.w_in, mlp.hidden_dim(), mlp.activation),
                        mlp.w_out, mlp.widths);
}

template <typename S>
Var<S> nested_select(Graph<S>& g, const Var<S>& hidden, const Var<S>& w_out,
                     std::span<const std::size_t> widths, std::span<const int> choices,
                     const std::vector<Tensor<S>>& outputs) {
  const std::size_t B = hidden.value().rows();
  const std::size_t D = w_out.value().rows();
  if (choices.size() != B || outputs.size() != widths.size()) {
    throw ShapeError("nested_select: " + std::to_string(choices.size()) + " choices for " +
                     std::to_string(B) + " rows, " + std::to_string(outputs.size()) +
                     " outputs for " + std::to_string(widths.size()) + " experts");
  }
  Tensor<S> out({B, D});
  for (std::size_t b = 0; b < B; ++b) {
    if (choices[b] < 0 || static_cast<std::size_t>(choices[b]) >= widths.size()) {
      throw IndexError("nested_select: expert " + std::to_string(choices[b]) + " outside [0, " +
                       std::to_string(widths.size()) + ")");
    }
    std::copy_n(outputs[static_cast<std::size_t>(choices[b])].data() + b * D, D,
                out.data() + b * D);
  }
  std::vector<std::size_t> limits(B);
  for (std::size_t b = 0; b < B; ++b) limits[b] = widths[static_cast<std::size_t>(choices[b])];

  return g.record(std::move(out), g.needs_grad({&hidden, &w_out}),
                  [hidden, w_out, limits = std::move(limits)](Node<S>*) mutable {
                    return [hidden, w_out, limits = std::move(limits)](const Tensor<S>& gout) {
                      const std::size_t H = hidden.value().cols();
                      if (hidden.requires_grad()) {
                        Tensor<S> dh = kernels::matmul(gout, w_out.value());
                        for (std::size_t b = 0; b < limits.size(); ++b) {
                          std::fill(dh.data() + b * H + limits[b], dh.data() + (b + 1) * H, S{0});
                        }
                        accumulate_grad(hidden, dh);
                      }
                      if (w_out.requires_grad()) {
                        Tensor<S> masked = hidden.value();
                        for (std::size_t b = 0; b < limits.size(); ++b) {
                          std::fill(masked.data() + b * H + limits[b], masked.data() + (b + 1) * H,
                                    S{0});
                        }
                        accumulate_grad(w_out, kernels::matmul_tn(gout, masked));
                      }
                    };
                  });
}

#define TDMOE_INSTANTIATE(S)                                                                    \
  template struct NestedMlp<S>;                                                                 \
  template void accumulate_importance<S>(ImportanceScores&, const Tensor<S>&);                  \
  template std::vector<ImportanceScores> importance_scores<S>(const DenseLm<S>&,                \
                                                              std::span<const TokenBatch>);     \
  template NestedMlp<S> reorder_mlp<S>(const NestedMlp<S>&, const ImportanceScores&);           \
  template void reorder_model<S>(DenseLm<S>&, std::span<const ImportanceScores>);               \
  template Tensor<S> hidden_activations<S>(const Tensor<S>&, const Tensor<S>&, std::size_t,     \
                                           Activation);                                         \
  template std::vector<Tensor<S>> prefix_outputs<S>(const Tensor<S>&, const Tensor<S>&,         \
                                                    std::span<const std::size_t>);              \
  template Tensor<S> sliced_output<S>(const Tensor<S>&, const Tensor<S>&, std::size_t);         \
  template Tensor<S> expert_forward<S>(const NestedMlp<S>&, const Tensor<S>&, std::size_t);     \
  template std::vector<Tensor<S>> all_expert_outputs<S>(const NestedMlp<S>&, const Tensor<S>&); \
  template Var<S> nested_select<S>(Graph<S>&, const Var<S>&, const Var<S>&,                     \
                                   std::span<const std::size_t>, std::span<const int>,          \
                                   const std::vector<Tensor<S>>&);

TDMOE_INSTANTIATE(float)
TDMOE_INSTANTIATE(double)
#undef TDMOE_INSTANTIATE

}  // namespace tdmoe
