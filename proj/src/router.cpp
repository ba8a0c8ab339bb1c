// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/router.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tdmoe/ops.hpp"

namespace tdmoe {

RouterNonlinearity parse_router_nonlinearity(std::string_view name) {
  if (name == "relu") return RouterNonlinearity::relu;
  if (name == "none") return RouterNonlinearity::none;
  throw ConfigError("router_nonlinearity",
                    "expected relu or none, got '" + std::string(name) + "'");
}

std::string_view router_nonlinearity_name(RouterNonlinearity n) {
  return n == RouterNonlinearity::relu ? "relu" : "none";
}

template <typename S>
Router<S> init_router(std::size_t embed_dim, std::size_t hidden_dim, std::size_t num_experts,
                      RouterNonlinearity nonlinearity, Rng& rng) {
  if (hidden_dim == 0) throw ConfigError("router_hidden", "must be at least 1");
  if (num_experts == 0) throw ConfigError("num_experts", "must be at least 1");
  Router<S> r;
  const double std1 = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(embed_dim, 1)));
  r.w1 = Var<S>::parameter(rng.normal_tensor<S>({hidden_dim, embed_dim}, std1));
  r.w2 = Var<S>::parameter(rng.normal_tensor<S>({num_experts, hidden_dim}, 0.02));
  r.nonlinearity = nonlinearity;
  return r;
}

template <typename S>
Var<S> router_forward(Graph<S>& g, const Router<S>& router, const Var<S>& x) {
  if (x.value().cols() != router.embed_dim()) {
    throw ShapeError("router input has width " + std::to_string(x.value().cols()) +
                     ", router expects " + std::to_string(router.embed_dim()));
  }
  Var<S> u = linear(g, x, router.w1);
  if (router.nonlinearity == RouterNonlinearity::relu) u = activation(g, u, Activation::relu);
  return linear(g, u, router.w2);
}

template <typename S>
Var<S> router_loss(Graph<S>& g, const Var<S>& logits, std::span<const int> labels) {
  return cross_entropy(g, logits, labels);
}

template <typename S>
int predict_expert(std::span<const S> logits_row) {
  if (logits_row.empty()) throw ContractError("predict_expert: empty logits row");
  std::size_t best = 0;
  for (std::size_t e = 1; e < logits_row.size(); ++e) {
    if (logits_row[e] > logits_row[best]) best = e;
  }
  return static_cast<int>(best);
}

template <typename S>
std::vector<int> predict_experts(const Tensor<S>& logits) {
  const std::size_t E = logits.cols();
  std::vector<int> out(logits.rows());
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b] = predict_expert(std::span<const S>(logits.data() + b * E, E));
  }
  return out;
}

std::uint64_t router_param_count(std::uint64_t embed_dim, std::uint64_t hidden_dim,
                                 std::uint64_t num_experts, std::uint64_t num_layers) {
  return num_layers * (embed_dim * hidden_dim + hidden_dim * num_experts);
}

#define TDMOE_INSTANTIATE(S)                                                                   \
  template Router<S> init_router<S>(std::size_t, std::size_t, std::size_t, RouterNonlinearity, \
                                    Rng&);                                             \
  template Var<S> router_forward<S>(Graph<S>&, const Router<S>&, const Var<S>&);               \
  template Var<S> router_loss<S>(Graph<S>&, const Var<S>&, std::span<const int>);              \
  template int predict_expert<S>(std::span<const S>);                                          \
  template std::vector<int> predict_experts<S>(const Tensor<S>&);

TDMOE_INSTANTIATE(float)
TDMOE_INSTANTIATE(double)
#undef TDMOE_INSTANTIATE

}  // namespace tdmoe
