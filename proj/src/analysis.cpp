// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace tdmoe {

template <typename S>
RoutedOutput<S> routed_forward(const AdaptedLm<S>& model, const TokenBatch& tokens,
                               const RouteOptions& options) {
  const DenseLm<S>& base = model.base;
  const std::size_t L = base.blocks.size();
  const std::size_t E = model.num_experts();
  const std::size_t D = base.config.embed_dim;
  if (model.routers.size() != L) {
    throw ConfigError("routers", "model has " + std::to_string(model.routers.size()) +
                                     " routers for " + std::to_string(L) + " layers");
  }
  if (options.source == RouteSource::forced &&
      (options.forced_expert < 0 || static_cast<std::size_t>(options.forced_expert) >= E)) {
    throw IndexError("forced expert " + std::to_string(options.forced_expert) +
                     " outside [0, " + std::to_string(E) + ")");
  }

  RoutedOutput<S> out;
  out.batch = tokens.batch;
  out.seq = tokens.seq;
  Graph<S> g = Graph<S>::inference();
  Var<S> x = embed_tokens(g, base, tokens);
  const std::size_t N = tokens.tokens();
  for (std::size_t l = 0; l < L; ++l) {
    const TransformerBlock<S>& b = base.blocks[l];
    x = attention_residual(g, b, x, base.config, tokens.batch, tokens.seq);
    const Var<S> h = rms_norm(g, x, b.mlp_norm);
    const Tensor<S>& hv = h.value();
    const Tensor<S>& w_in = b.w_in.value();
    const Tensor<S>& w_out = b.w_out.value();

    std::vector<int> choices;
    switch (options.source) {
      case RouteSource::router:
        choices = predict_experts(router_forward(g, model.routers[l], h).value());
        break;
      case RouteSource::forced:
        choices.assign(N, options.forced_expert);
        break;
      case RouteSource::oracle: {
        const Tensor<S> hidden =
            hidden_activations(hv, w_in, w_in.rows(), base.config.activation);
        choices = derive_labels(similarity_matrix(prefix_outputs(hidden, w_out, model.widths)),
                                model.theta());
        break;
      }
    }

    Tensor<S> y({N, D});
    std::vector<std::size_t> rows;
    for (std::size_t e = 0; e < E; ++e) {
      rows.clear();
      for (std::size_t i = 0; i < N; ++i) {
        if (static_cast<std::size_t>(choices[i]) == e) rows.push_back(i);
      }
      if (rows.empty()) continue;
      Tensor<S> xe({rows.size(), D});
      for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(hv.data() + rows[r] * D, D, xe.data() + r * D);
      }
      const std::size_t width = model.widths[e];
      const Tensor<S> ye = sliced_output(
          hidden_activations(xe, w_in, width, base.config.activation), w_out, width);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(ye.data() + r * D, D, y.data() + rows[r] * D);
      }
      out.mlp_macs += static_cast<std::uint64_t>(rows.size()) * 2 * D * width;
    }
    x = add(g, x, Var<S>::constant(std::move(y)));
    out.choices.push_back(std::move(choices));
  }
  out.logits = output_logits(g, base, x).value();
  return out;
}

void ConfusionMatrix::add(int label, int prediction) {
  if (label < 0 || prediction < 0 || static_cast<std::size_t>(label) >= num_experts ||
      static_cast<std::size_t>(prediction) >= num_experts) {
    throw IndexError("confusion entry (" + std::to_string(label) + ", " +
                     std::to_string(prediction) + ") outside " + std::to_string(num_experts) +
                     " experts");
  }
  ++counts[static_cast<std::size_t>(label) * num_experts + static_cast<std::size_t>(prediction)];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::correct() const {
  std::uint64_t t = 0;
  for (std::size_t e = 0; e < num_experts; ++e) t += at(e, e);
  return t;
}

std::uint64_t ConfusionMatrix::row_total(std::size_t label) const {
  std::uint64_t t = 0;
  for (std::size_t p = 0; p < num_experts; ++p) t += at(label, p);
  return t;
}

double ConfusionMatrix::accuracy() const {
  const std::uint64_t t = total();
  return t ? static_cast<double>(correct()) / static_cast<double>(t) : 0.0;
}

double ConfusionMatrix::adjacent_error_fraction() const {
  std::uint64_t errors = 0;
  std::uint64_t adjacent = 0;
  for (std::size_t l = 0; l < num_experts; ++l) {
    for (std::size_t p = 0; p < num_experts; ++p) {
      if (l == p) continue;
      errors += at(l, p);
      if (l + 1 == p || p + 1 == l) adjacent += at(l, p);
    }
  }
  return errors ? static_cast<double>(adjacent) / static_cast<double>(errors) : 1.0;
}

double ConfusionMatrix::majority_baseline() const {
  const std::uint64_t t = total();
  if (t == 0) return 0.0;
  std::uint64_t best = 0;
  for (std::size_t l = 0; l < num_experts; ++l) best = std::max(best, row_total(l));
  return static_cast<double>(best) / static_cast<double>(t);
}

std::vector<std::vector<double>> ConfusionMatrix::row_normalized() const {
  std::vector<std::vector<double>> out(num_experts, std::vector<double>(num_experts, 0.0));
  for (std::size_t l = 0; l < num_experts; ++l) {
    const std::uint64_t t = row_total(l);
    if (t == 0) continue;
    for (std::size_t p = 0; p < num_experts; ++p) {
      out[l][p] = static_cast<double>(at(l, p)) / static_cast<double>(t);
    }
  }
  return out;
}

bool ConfusionMatrix::diagonal_dominant() const {
  for (std::size_t l = 0; l < num_experts; ++l) {
    if (row_total(l) == 0) continue;
    for (std::size_t p = 0; p < num_experts; ++p) {
      if (at(l, p) > at(l, l)) return false;
    }
  }
  return true;
}

ConfusionMatrix tabulate_confusion(std::span<const int> labels, std::span<const int> predictions,
                                   std::size_t num_experts) {
  if (labels.size() != predictions.size()) {
    throw ShapeError("confusion: " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(predictions.size()) + " predictions");
  }
  ConfusionMatrix cm(num_experts);
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], predictions[i]);
  return cm;
}

template <typename S>
ConfusionMatrix confusion(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                          double theta, RoutingMode mode) {
  validate_theta(theta);
  AdaptedLm<S> view = model;  // shares parameters
  view.config.theta = theta;
  ConfusionMatrix cm(model.num_experts());
  for (const TokenBatch& tb : batches) {
    Graph<S> g = Graph<S>::inference();
    const AdaptForward<S> f = adapt_forward(g, view, tb, mode);
    for (std::size_t l = 0; l < f.predictions.size(); ++l) {
      const auto& labels = f.labels.by_layer[l];
      for (std::size_t t = 0; t < labels.size(); ++t) cm.add(labels[t], f.predictions[l][t]);
    }
  }
  return cm;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

UsageReport usage_from_choices(const std::vector<std::vector<int>>& choices,
                               std::size_t num_experts) {
  UsageReport r;
  for (const std::vector<int>& layer : choices) {
    std::vector<double> f(num_experts, 0.0);
    for (int c : layer) {
      if (c < 0 || static_cast<std::size_t>(c) >= num_experts) {
        throw IndexError("expert choice " + std::to_string(c) + " outside [0, " +
                         std::to_string(num_experts) + ")");
      }
      f[static_cast<std::size_t>(c)] += 1.0;
    }
    if (!layer.empty()) {
      for (double& v : f) v /= static_cast<double>(layer.size());
    }
    r.entropy.push_back(entropy(f));
    r.fractions.push_back(std::move(f));
  }
  for (double h : r.entropy) r.mean_entropy += h;
  if (!r.entropy.empty()) r.mean_entropy /= static_cast<double>(r.entropy.size());
  return r;
}

template <typename S>
std::uint64_t activated_params_for(const AdaptedLm<S>& model, std::span<const int> choices) {
  const ModelConfig& c = model.base.config;
  if (choices.size() != c.num_layers) {
    throw ShapeError("activated_params_for: " + std::to_string(choices.size()) +
                     " choices for " + std::to_string(c.num_layers) + " layers");
  }
  std::uint64_t shared = dense_param_count(c) - c.num_layers * 2 * c.embed_dim * c.hidden_dim;
  for (const Router<S>& r : model.routers) shared += r.w1.value().size() + r.w2.value().size();
  std::uint64_t mlp = 0;
  for (int e : choices) {
    if (e < 0 || static_cast<std::size_t>(e) >= model.num_experts()) {
      throw IndexError("expert choice " + std::to_string(e) + " outside [0, " +
                       std::to_string(model.num_experts()) + ")");
    }
    mlp += 2 * c.embed_dim * model.widths[static_cast<std::size_t>(e)];
  }
  return shared + mlp;
}

template <typename S>
double mean_activated_params(const AdaptedLm<S>& model,
                             const std::vector<std::vector<int>>& choices) {
  const std::size_t L = choices.size();
  if (L == 0 || choices[0].empty()) throw ContractError("mean_activated_params: no tokens");
  const std::size_t N = choices[0].size();
  double total = 0.0;
  std::vector<int> per_token(L);
  for (std::size_t t = 0; t < N; ++t) {
    for (std::size_t l = 0; l < L; ++l) per_token[l] = choices[l][t];
    total += static_cast<double>(activated_params_for(model, per_token));
  }
  return total / static_cast<double>(N);
}

namespace {

// Concatenates per-batch choices into [layer][token] over all batches.
template <typename S>
std::vector<std::vector<int>> collect_choices(const AdaptedLm<S>& model,
                                              std::span<const TokenBatch> batches,
                                              const RouteOptions& options) {
  std::vector<std::vector<int>> all(model.base.blocks.size());
  for (const TokenBatch& tb : batches) {
    const RoutedOutput<S> r = routed_forward(model, tb, options);
    for (std::size_t l = 0; l < all.size(); ++l) {
      all[l].insert(all[l].end(), r.choices[l].begin(), r.choices[l].end());
    }
  }
  return all;
}

}  // namespace

template <typename S>
UsageReport expert_usage(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                         const RouteOptions& options) {
  const auto choices = collect_choices(model, batches, options);
  UsageReport r = usage_from_choices(choices, model.num_experts());
  r.activated_params = mean_activated_params(model, choices);
  return r;
}

template <typename S>
double activated_params(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                        const RouteOptions& options) {
  return mean_activated_params(model, collect_choices(model, batches, options));
}

template <typename S>
double routed_loss(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                   const RouteOptions& options) {
  double total = 0.0;
  double count = 0.0;
  for (const TokenBatch& tb : batches) {
    RoutedOutput<S> r = routed_forward(model, tb, options);
    Graph<S> g = Graph<S>::inference();
    const double n = static_cast<double>(tb.batch * (tb.seq - 1));
    total += static_cast<double>(
                 lm_loss(g, Var<S>::constant(std::move(r.logits)), tb).value()[0]) *
             n;
    count += n;
  }
  if (count == 0.0) throw ContractError("routed_loss: no evaluation tokens");
  return total / count;
}

template <typename S>
double perplexity(const AdaptedLm<S>& model, std::span<const TokenBatch> batches,
                  PerplexityMode mode) {
  const double loss = mode == PerplexityMode::dense ? evaluate_loss(model.base, batches)
                                                    : routed_loss(model, batches);
  return std::exp(loss);
}

template <typename S>
std::pair<double, double> usage_entropy_compare(const AdaptedLm<S>& a, const AdaptedLm<S>& b,
                                                std::span<const TokenBatch> batches) {
  return {expert_usage(a, batches).mean_entropy, expert_usage(b, batches).mean_entropy};
}

void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm) {
  out << "label";
  for (std::size_t p = 0; p < cm.num_experts; ++p) out << ",pred_" << p;
  out << '\n';
  for (std::size_t l = 0; l < cm.num_experts; ++l) {
    out << l;
    for (std::size_t p = 0; p < cm.num_experts; ++p) out << ',' << cm.at(l, p);
    out << '\n';
  }
}

void write_usage_csv(std::ostream& out, const UsageReport& usage) {
  const std::size_t E = usage.fractions.empty() ? 0 : usage.fractions[0].size();
  out << "layer";
  for (std::size_t e = 0; e < E; ++e) out << ",expert_" << e;
  out << ",entropy\n";
  const auto precision = out.precision(17);
  for (std::size_t l = 0; l < usage.fractions.size(); ++l) {
    out << l;
    for (double f : usage.fractions[l]) out << ',' << f;
    out << ',' << usage.entropy[l] << '\n';
  }
  out.precision(precision);
}

std::string metrics_json(const AnalysisMetrics& m) {
  nlohmann::json j;
  j["theta"] = m.theta;
  j["accuracy"] = m.accuracy;
  j["adjacent_error_fraction"] = m.adjacent_error_fraction;
  j["router_errors"] = m.router_errors;
  j["majority_baseline"] = m.majority_baseline;
  j["activated_params"] = m.activated_params;
  j["dense_params"] = m.dense_params;
  j["perplexity"] = m.perplexity;
  j["dense_perplexity"] = m.dense_perplexity;
  j["mean_usage_entropy"] = m.mean_usage_entropy;
  j["eval_tokens"] = m.eval_tokens;
  return j.dump(2) + "\n";
}

#define TDMOE_INSTANTIATE(S)                                                                   \
  template RoutedOutput<S> routed_forward<S>(const AdaptedLm<S>&, const TokenBatch&,           \
                                             const RouteOptions&);                             \
  template ConfusionMatrix confusion<S>(const AdaptedLm<S>&, std::span<const TokenBatch>,      \
                                        double, RoutingMode);                                  \
  template std::uint64_t activated_params_for<S>(const AdaptedLm<S>&, std::span<const int>);   \
  template double mean_activated_params<S>(const AdaptedLm<S>&,                                \
                                           const std::vector<std::vector<int>>&);              \
  template UsageReport expert_usage<S>(const AdaptedLm<S>&, std::span<const TokenBatch>,       \
                                       const RouteOptions&);                                   \
  template double activated_params<S>(const AdaptedLm<S>&, std::span<const TokenBatch>,        \
                                      const RouteOptions&);                                    \
  template double routed_loss<S>(const AdaptedLm<S>&, std::span<const TokenBatch>,             \
                                 const RouteOptions&);                                         \
  template double perplexity<S>(const AdaptedLm<S>&, std::span<const TokenBatch>,              \
                                PerplexityMode);                                               \
  template std::pair<double, double> usage_entropy_compare<S>(                                 \
      const AdaptedLm<S>&, const AdaptedLm<S>&, std::span<const TokenBatch>);

TDMOE_INSTANTIATE(float)
TDMOE_INSTANTIATE(double)
#undef TDMOE_INSTANTIATE

}  // namespace tdmoe
