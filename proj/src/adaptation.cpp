// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/adaptation.hpp"

#include <iomanip>
#include <string>

#include "tdmoe/optim.hpp"

namespace tdmoe {

void AdaptConfig::validate() const {
  validate_theta(theta);
  if (!(lambda_llm >= 0.0)) throw ConfigError("lambda_llm", "must be non-negative");
  if (!(lambda_router >= 0.0)) throw ConfigError("lambda_router", "must be non-negative");
  if (ablation_mode && lambda_router != 0.0) {
    throw ConfigError("lambda_router", "must be 0 when ablation_mode is set");
  }
  if (batch == 0) throw ConfigError("adapt_batch", "must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("adapt_lr", "must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("adapt_weight_decay", "must be non-negative");
  if (num_experts == 0) throw ConfigError("num_experts", "must be at least 1");
  if (router_hidden == 0) throw ConfigError("router_hidden", "must be at least 1");
  if (calibration_tokens == 0) throw ConfigError("calibration_tokens", "must be at least 1");
}

template <typename S>
std::vector<std::pair<std::string, Var<S>>> AdaptedLm<S>::named_parameters() const {
  auto out = base.named_parameters();
  for (std::size_t l = 0; l < routers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".router.";
    out.emplace_back(p + "w1", routers[l].w1);
    out.emplace_back(p + "w2", routers[l].w2);
  }
  return out;
}

template <typename S>
AdaptedLm<S> AdaptedLm<S>::clone() const {
  AdaptedLm out{base.clone(), widths, {}, config};
  for (const Router<S>& r : routers) {
    Router<S> c = r;
    c.w1 = Var<S>::parameter(r.w1.value());
    c.w1.set_requires_grad(r.w1.requires_grad());
    c.w2 = Var<S>::parameter(r.w2.value());
    c.w2.set_requires_grad(r.w2.requires_grad());
    out.routers.push_back(std::move(c));
  }
  return out;
}

template <typename S>
AdaptedLm<S> init_adapted(DenseLm<S> base, const AdaptConfig& config) {
  config.validate();
  base.config.validate(config.num_experts);
  if (!base.reordered) {
    throw ConfigError("auto_reorder", "base model has not been importance-reordered");
  }
  AdaptedLm<S> m;
  m.widths = expert_widths(base.config.hidden_dim, config.num_experts);
  Rng rng(config.seed ^ 0xd1b54a32d192ed03ULL);
  for (std::size_t l = 0; l < base.config.num_layers; ++l) {
    m.routers.push_back(init_router<S>(base.config.embed_dim, config.router_hidden,
                                       config.num_experts, config.router_nonlinearity, rng));
  }
  m.base = std::move(base);
  m.config = config;
  return m;
}

template <typename S>
AdaptForward<S> adapt_forward(Graph<S>& g, const AdaptedLm<S>& model, const TokenBatch& tokens,
                              RoutingMode mode, int forced_expert) {
  const DenseLm<S>& base = model.base;
  const std::size_t L = base.blocks.size();
  const std::size_t E = model.num_experts();
  if (model.routers.size() != L) {
    throw ConfigError("routers", "model has " + std::to_string(model.routers.size()) +
                                     " routers for " + std::to_string(L) + " layers");
  }
  if (mode == RoutingMode::forced &&
      (forced_expert < 0 || static_cast<std::size_t>(forced_expert) >= E)) {
    throw IndexError("forced expert " + std::to_string(forced_expert) + " outside [0, " +
                     std::to_string(E) + ")");
  }

  AdaptForward<S> f;
  f.labels.num_experts = E;
  Var<S> x = embed_tokens(g, base, tokens);
  Var<S> router_total;
  for (std::size_t l = 0; l < L; ++l) {
    const TransformerBlock<S>& b = base.blocks[l];
    x = attention_residual(g, b, x, base.config, tokens.batch, tokens.seq);
    const Var<S> h = rms_norm(g, x, b.mlp_norm);
    const Var<S> hidden = activation(g, linear(g, h, b.w_in), base.config.activation);
    const std::vector<Tensor<S>> outs = prefix_outputs(hidden.value(), b.w_out.value(), model.widths);
    std::vector<int> labels = derive_labels(similarity_matrix(outs), model.theta());

    const Var<S> rlogits = router_forward(g, model.routers[l], detach(h));
    std::vector<int> preds = predict_experts(rlogits.value());
    const Var<S> rl = router_loss(g, rlogits, labels);
    router_total = l == 0 ? rl : add(g, router_total, rl);

    std::vector<int> choices;
    switch (mode) {
      case RoutingMode::label: choices = labels; break;
      case RoutingMode::prediction:
      case RoutingMode::prediction_scaled: choices = preds; break;
      case RoutingMode::forced: choices.assign(labels.size(), forced_expert); break;
    }
    Var<S> y = nested_select(g, hidden, b.w_out, model.widths, choices, outs);
    if (mode == RoutingMode::prediction_scaled) {
      y = scale_rows(g, y, softmax_pick(g, rlogits, choices));
    }
    x = add(g, x, y);

    f.labels.by_layer.push_back(std::move(labels));
    f.predictions.push_back(std::move(preds));
    f.choices.push_back(std::move(choices));
  }
  f.logits = output_logits(g, base, x);
  f.router_loss = L == 0 ? Var<S>::constant(Tensor<S>({1}, S{0}))
                         : scale(g, router_total, static_cast<S>(1.0 / static_cast<double>(L)));
  return f;
}

template <typename S>
Var<S> combined_loss(Graph<S>& g, const Var<S>& llm_loss, const Var<S>& router_loss,
                     const AdaptConfig& config) {
  if (llm_loss.value().size() != 1 || router_loss.value().size() != 1) {
    throw ShapeError("combined_loss expects scalar losses");
  }
  return add(g, scale(g, llm_loss, static_cast<S>(config.lambda_llm)),
             scale(g, router_loss, static_cast<S>(config.lambda_router)));
}

template <typename S>
DenseLm<S> reorder_for_adaptation(const DenseLm<S>& base, std::span<const int> train,
                                  const AdaptConfig& config) {
  DenseLm<S> out = base.clone();
  if (out.reordered) return out;
  if (!config.auto_reorder) {
    throw ConfigError("auto_reorder", "base model has not been importance-reordered");
  }
  const std::size_t seq = base.config.max_seq_len;
  const auto calibration = eval_batches(train, config.batch, seq, config.calibration_tokens);
  const auto scores = importance_scores(out, std::span<const TokenBatch>(calibration));
  reorder_model(out, std::span<const ImportanceScores>(scores));
  return out;
}

namespace {

template <typename S>
AdaptResult<S> adapt_reordered(DenseLm<S> reordered, const Corpus& corpus,
                               const AdaptConfig& config, std::ostream* log_csv) {
  AdaptResult<S> result{init_adapted(std::move(reordered), config), {}, {}};
  AdaptedLm<S>& m = result.model;
  const std::size_t seq = m.base.config.max_seq_len;
  if (corpus.train.size() < seq) {
    throw ConfigError("corpus", "training split shorter than one window of " + std::to_string(seq));
  }

  std::vector<Var<S>> trainable;
  m.base.token_embedding.set_requires_grad(false);
  m.base.position_embedding.set_requires_grad(false);
  m.base.final_norm.set_requires_grad(false);
  m.base.head.set_requires_grad(false);
  for (TransformerBlock<S>& b : m.base.blocks) {
    b.attn_norm.set_requires_grad(false);
    b.mlp_norm.set_requires_grad(false);
    for (Var<S>* w : {&b.wq, &b.wk, &b.wv, &b.wo}) {
      w->set_requires_grad(!config.freeze_attention);
      if (!config.freeze_attention) trainable.push_back(*w);
    }
    trainable.push_back(b.w_in);
    trainable.push_back(b.w_out);
  }
  for (Router<S>& r : m.routers) {
    trainable.push_back(r.w1);
    trainable.push_back(r.w2);
  }
  AdamW<S> opt(trainable, {config.lr, config.weight_decay});

  result.label_counts.assign(m.num_experts(), 0);
  const RoutingMode mode = config.ablation_mode ? RoutingMode::prediction_scaled : RoutingMode::label;
  Rng data_rng(config.seed ^ 0x2545f4914f6cdd1dULL);
  if (log_csv) *log_csv << "step,llm_loss,router_loss,router_acc\n" << std::setprecision(9);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const TokenBatch tb = sample_batch(corpus.train, config.batch, seq, data_rng);
    Graph<S> g;
    const AdaptForward<S> f = adapt_forward(g, m, tb, mode);
    const Var<S> llm = lm_loss(g, f.logits, tb);
    g.backward(combined_loss(g, llm, f.router_loss, config));
    opt.step();
    opt.zero_grad();

    std::uint64_t hits = 0;
    std::uint64_t total = 0;
    for (std::size_t l = 0; l < f.labels.by_layer.size(); ++l) {
      const auto& labels = f.labels.by_layer[l];
      for (std::size_t t = 0; t < labels.size(); ++t) {
        hits += labels[t] == f.predictions[l][t];
        ++result.label_counts[static_cast<std::size_t>(labels[t])];
      }
      total += labels.size();
    }
    AdaptLogRow row{step, static_cast<double>(llm.value()[0]),
                    static_cast<double>(f.router_loss.value()[0]),
                    total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0};
    if (log_csv) {
      *log_csv << row.step << ',' << row.llm_loss << ',' << row.router_loss << ','
               << row.router_acc << '\n';
    }
    result.log.push_back(row);
  }
  // Restore trainability flags so the result behaves like a fresh model.
  for (auto& [name, p] : m.named_parameters()) p.set_requires_grad(true);
  return result;
}

}  // namespace

template <typename S>
AdaptResult<S> adapt(const DenseLm<S>& base, const Corpus& corpus, const AdaptConfig& config,
                     std::ostream* log_csv) {
  config.validate();
  return adapt_reordered(reorder_for_adaptation(base, corpus.train, config), corpus, config,
                         log_csv);
}

template <typename S>
std::vector<AdaptResult<S>> build_family(const DenseLm<S>& base, const Corpus& corpus,
                                         std::span<const double> thetas,
                                         const AdaptConfig& config,
                                         std::vector<std::ostream*> log_csvs) {
  if (thetas.empty()) throw ConfigError("thetas", "list is empty");
  for (double t : thetas) validate_theta(t);
  config.validate();
  const DenseLm<S> reordered = reorder_for_adaptation(base, corpus.train, config);
  std::vector<AdaptResult<S>> out;
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    AdaptConfig c = config;
    c.theta = thetas[i];
    out.push_back(adapt_reordered(reordered.clone(), corpus, c,
                                  i < log_csvs.size() ? log_csvs[i] : nullptr));
  }
  return out;
}

#define TDMOE_INSTANTIATE(S)                                                                   \
  template struct AdaptedLm<S>;                                                                \
  template AdaptedLm<S> init_adapted<S>(DenseLm<S>, const AdaptConfig&);                       \
  template AdaptForward<S> adapt_forward<S>(Graph<S>&, const AdaptedLm<S>&, const TokenBatch&, \
                                            RoutingMode, int);                                 \
  template Var<S> combined_loss<S>(Graph<S>&, const Var<S>&, const Var<S>&,                    \
                                   const AdaptConfig&);                                        \
  template DenseLm<S> reorder_for_adaptation<S>(const DenseLm<S>&, std::span<const int>,       \
                                                const AdaptConfig&);                           \
  template AdaptResult<S> adapt<S>(const DenseLm<S>&, const Corpus&, const AdaptConfig&,       \
                                   std::ostream*);                                             \
  template std::vector<AdaptResult<S>> build_family<S>(const DenseLm<S>&, const Corpus&,       \
                                                       std::span<const double>,                \
                                                       const AdaptConfig&,                     \
                                                       std::vector<std::ostream*>);

TDMOE_INSTANTIATE(float)
TDMOE_INSTANTIATE(double)
#undef TDMOE_INSTANTIATE

}  // namespace tdmoe
