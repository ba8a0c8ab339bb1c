// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tdmoe/adaptation.hpp"

namespace tdmoe::testing {

struct GradReport {
  double max_rel_err = 0.0;
  std::string worst;
};

using LossFn = std::function<Var<double>(Graph<double>&)>;
using ParamList = std::vector<std::pair<std::string, Var<double>>>;

/// Reverse mode through `analytic` against central differences of `numeric`.
/// The two differ only when a stop-gradient makes the tape's derivative
/// something other than the plain derivative of the forward value. At most
/// `max_per_param` entries of each parameter are probed, spread evenly.
inline GradReport check_gradients(const LossFn& analytic_loss, const LossFn& loss,
                                  const ParamList& params, double h = 1e-5,
                                  std::size_t max_per_param = 24) {
  for (auto [name, p] : params) p.zero_grad();
  {
    Graph<double> g;
    g.backward(analytic_loss(g));
  }
  GradReport report;
  for (const auto& [name, p] : params) {
    Var<double> v = p;
    const std::size_t n = v.value().size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_per_param);
    for (std::size_t i = 0; i < n; i += stride) {
      const double analytic = v.has_grad() ? v.grad()[i] : 0.0;
      const double saved = v.value()[i];
      v.mutable_value()[i] = saved + h;
      Graph<double> gp = Graph<double>::inference();
      const double up = loss(gp).value()[0];
      v.mutable_value()[i] = saved - h;
      Graph<double> gm = Graph<double>::inference();
      const double down = loss(gm).value()[0];
      v.mutable_value()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) +
                       " numeric " + std::to_string(numeric);
      }
    }
  }
  return report;
}

inline GradReport check_gradients(const LossFn& loss, const ParamList& params, double h = 1e-5,
                                  std::size_t max_per_param = 24) {
  return check_gradients(loss, loss, params, h, max_per_param);
}

/// Deterministic Gaussian tensor.
template <typename S = double>
Tensor<S> randn(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  return rng.normal_tensor<S>(std::move(shape), stddev);
}

inline Vocabulary test_vocab(std::size_t symbols) {
  std::vector<unsigned char> s(symbols);
  for (std::size_t i = 0; i < symbols; ++i) s[i] = static_cast<unsigned char>('a' + i);
  return Vocabulary::from_symbols(s);
}

inline ModelConfig tiny_config(std::size_t vocab = 12) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 8;
  c.hidden_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.max_seq_len = 6;
  c.seed = 3;
  return c;
}

inline TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::size_t vocab,
                                std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch tb{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) tb.ids.push_back(static_cast<int>(rng.index(vocab)));
  return tb;
}

/// Tiny adapted model with non-trivial weights; reordering is marked done.
template <typename S>
AdaptedLm<S> tiny_adapted(const AdaptConfig& ac, std::size_t vocab = 12, double weight_scale = 1.0) {
  const ModelConfig mc = tiny_config(vocab);
  DenseLm<S> base = init_dense_lm<S>(mc, test_vocab(vocab - 1));
  if (weight_scale != 1.0) {
    for (auto& [name, p] : base.named_parameters()) {
      if (name.find("norm") != std::string::npos) continue;
      for (S& v : p.mutable_value().values()) v = static_cast<S>(v * weight_scale);
    }
  }
  base.reordered = true;
  return init_adapted(std::move(base), ac);
}

}  // namespace tdmoe::testing
