// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/model.hpp"

#include <cmath>

namespace tdmoe {

void ModelConfig::validate(std::size_t num_experts) const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(field, "must be at least 1");
  };
  positive(vocab_size, "vocab_size");
  positive(embed_dim, "embed_dim");
  positive(hidden_dim, "hidden_dim");
  positive(num_layers, "num_layers");
  positive(num_heads, "num_heads");
  positive(max_seq_len, "max_seq_len");
  if (embed_dim % num_heads != 0) {
    throw ConfigError("num_heads", "embed_dim " + std::to_string(embed_dim) +
                                       " is not divisible by " + std::to_string(num_heads));
  }
  if (num_experts == 0) throw ConfigError("num_experts", "must be at least 1");
  if (hidden_dim < num_experts) {
    throw ConfigError("hidden_dim", "hidden_dim " + std::to_string(hidden_dim) +
                                        " is smaller than num_experts " +
                                        std::to_string(num_experts));
  }
}

template <typename S>
std::vector<std::pair<std::string, Var<S>>> DenseLm<S>::named_parameters() const {
  std::vector<std::pair<std::string, Var<S>>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("position_embedding", position_embedding);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const TransformerBlock<S>& b = blocks[l];
    out.emplace_back(p + "attn_norm", b.attn_norm);
    out.emplace_back(p + "attn.wq", b.wq);
    out.emplace_back(p + "attn.wk", b.wk);
    out.emplace_back(p + "attn.wv", b.wv);
    out.emplace_back(p + "attn.wo", b.wo);
    out.emplace_back(p + "mlp_norm", b.mlp_norm);
    out.emplace_back(p + "mlp.w_in", b.w_in);
    out.emplace_back(p + "mlp.w_out", b.w_out);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("head", head);
  return out;
}

namespace {

template <typename S>
Var<S> copy_param(const Var<S>& v) {
  Var<S> out = Var<S>::parameter(v.value());
  out.set_requires_grad(v.requires_grad());
  return out;
}

}  // namespace

template <typename S>
DenseLm<S> DenseLm<S>::clone() const {
  DenseLm out;
  out.config = config;
  out.vocab = vocab;
  out.reordered = reordered;
  out.token_embedding = copy_param(token_embedding);
  out.position_embedding = copy_param(position_embedding);
  for (const TransformerBlock<S>& b : blocks) {
    out.blocks.push_back({copy_param(b.attn_norm), copy_param(b.wq), copy_param(b.wk),
                          copy_param(b.wv), copy_param(b.wo), copy_param(b.mlp_norm),
                          copy_param(b.w_in), copy_param(b.w_out)});
  }
  out.final_norm = copy_param(final_norm);
  out.head = copy_param(head);
  return out;
}

template <typename S>
DenseLm<S> init_dense_lm(const ModelConfig& config, Vocabulary vocab) {
  config.validate();
  if (vocab.size() != config.vocab_size) {
    throw ConfigError("vocab_size", "config says " + std::to_string(config.vocab_size) +
                                        " but the vocabulary has " + std::to_string(vocab.size()));
  }
  Rng rng(config.seed);
  const std::size_t V = config.vocab_size, D = config.embed_dim, H = config.hidden_dim;
  constexpr double kStd = 0.02;
  const double residual_std = kStd / std::sqrt(2.0 * static_cast<double>(config.num_layers));

  DenseLm<S> m;
  m.config = config;
  m.vocab = std::move(vocab);
  m.token_embedding = Var<S>::parameter(rng.normal_tensor<S>({V, D}, kStd));
  m.position_embedding = Var<S>::parameter(rng.normal_tensor<S>({config.max_seq_len, D}, kStd));
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    TransformerBlock<S> b;
    b.attn_norm = Var<S>::parameter(Tensor<S>({D}, S{1}));
    b.wq = Var<S>::parameter(rng.normal_tensor<S>({D, D}, kStd));
    b.wk = Var<S>::parameter(rng.normal_tensor<S>({D, D}, kStd));
    b.wv = Var<S>::parameter(rng.normal_tensor<S>({D, D}, kStd));
    b.wo = Var<S>::parameter(rng.normal_tensor<S>({D, D}, residual_std));
    b.mlp_norm = Var<S>::parameter(Tensor<S>({D}, S{1}));
    b.w_in = Var<S>::parameter(rng.normal_tensor<S>({H, D}, kStd));
    b.w_out = Var<S>::parameter(rng.normal_tensor<S>({D, H}, residual_std));
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = Var<S>::parameter(Tensor<S>({D}, S{1}));
  m.head = Var<S>::parameter(rng.normal_tensor<S>({V, D}, kStd));
  return m;
}

template <typename S>
Var<S> embed_tokens(Graph<S>& g, const DenseLm<S>& model, const TokenBatch& tokens) {
  if (tokens.ids.size() != tokens.batch * tokens.seq) {
    throw ShapeError("token batch holds " + std::to_string(tokens.ids.size()) + " ids for " +
                     std::to_string(tokens.batch) + " x " + std::to_string(tokens.seq));
  }
  if (tokens.seq > model.config.max_seq_len) {
    throw ShapeError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                     std::to_string(model.config.max_seq_len));
  }
  std::vector<int> positions(tokens.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<int>(i % tokens.seq);
  }
  return add(g, embedding(g, model.token_embedding, tokens.ids),
             embedding(g, model.position_embedding, positions));
}

template <typename S>
Var<S> attention_residual(Graph<S>& g, const TransformerBlock<S>& block, const Var<S>& x,
                          const ModelConfig& config, std::size_t batch, std::size_t seq) {
  const Var<S> h = rms_norm(g, x, block.attn_norm);
  const Var<S> q = linear(g, h, block.wq);
  const Var<S> k = linear(g, h, block.wk);
  const Var<S> v = linear(g, h, block.wv);
  const Var<S> a = causal_attention(g, q, k, v, batch, seq, config.num_heads);
  return add(g, x, linear(g, a, block.wo));
}

template <typename S>
Var<S> output_logits(Graph<S>& g, const DenseLm<S>& model, const Var<S>& x) {
  return linear(g, rms_norm(g, x, model.final_norm), model.head);
}

template <typename S>
Var<S> forward_dense(Graph<S>& g, const DenseLm<S>& model, const TokenBatch& tokens,
                     const HiddenObserver<S>* observer) {
  Var<S> x = embed_tokens(g, model, tokens);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const TransformerBlock<S>& b = model.blocks[l];
    x = attention_residual(g, b, x, model.config, tokens.batch, tokens.seq);
    const Var<S> h = rms_norm(g, x, b.mlp_norm);
    const Var<S> hidden = activation(g, linear(g, h, b.w_in), model.config.activation);
    if (observer) (*observer)(l, hidden.value());
    x = add(g, x, linear(g, hidden, b.w_out));
  }
  return output_logits(g, model, x);
}

template <typename S>
Tensor<S> forward_dense(const DenseLm<S>& model, const TokenBatch& tokens) {
  Graph<S> g = Graph<S>::inference();
  return forward_dense(g, model, tokens)
      .value()
      .reshaped({tokens.batch, tokens.seq, model.config.vocab_size});
}

template <typename S>
Var<S> lm_loss(Graph<S>& g, const Var<S>& logits, const TokenBatch& tokens) {
  if (tokens.seq < 2) throw ContractError("lm_loss needs sequences of length >= 2");
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  rows.reserve(tokens.batch * (tokens.seq - 1));
  targets.reserve(rows.capacity());
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    for (std::size_t t = 0; t + 1 < tokens.seq; ++t) {
      rows.push_back(b * tokens.seq + t);
      targets.push_back(tokens.at(b, t + 1));
    }
  }
  return cross_entropy(g, select_rows(g, logits, rows), targets);
}

template <typename S>
double evaluate_loss(const DenseLm<S>& model, std::span<const TokenBatch> batches) {
  double total = 0.0;
  double count = 0.0;
  for (const TokenBatch& tb : batches) {
    Graph<S> g = Graph<S>::inference();
    const double n = static_cast<double>(tb.batch * (tb.seq - 1));
    total += static_cast<double>(lm_loss(g, forward_dense(g, model, tb), tb).value()[0]) * n;
    count += n;
  }
  if (count == 0.0) throw ContractError("evaluate_loss: no evaluation tokens");
  return total / count;
}

std::uint64_t dense_param_count(const ModelConfig& c) {
  const std::uint64_t V = c.vocab_size, D = c.embed_dim, H = c.hidden_dim, L = c.num_layers;
  const std::uint64_t per_layer = 2 * D + 4 * D * D + 2 * D * H;
  return V * D + c.max_seq_len * D + L * per_layer + D + V * D;
}

#define TDMOE_INSTANTIATE(S)                                                                  \
  template struct DenseLm<S>;                                                                 \
  template DenseLm<S> init_dense_lm<S>(const ModelConfig&, Vocabulary);                       \
  template Var<S> embed_tokens<S>(Graph<S>&, const DenseLm<S>&, const TokenBatch&);           \
  template Var<S> attention_residual<S>(Graph<S>&, const TransformerBlock<S>&, const Var<S>&, \
                                        const ModelConfig&, std::size_t, std::size_t);        \
  template Var<S> output_logits<S>(Graph<S>&, const DenseLm<S>&, const Var<S>&);              \
  template Var<S> forward_dense<S>(Graph<S>&, const DenseLm<S>&, const TokenBatch&,           \
                                   const HiddenObserver<S>*);                                 \
  template Tensor<S> forward_dense<S>(const DenseLm<S>&, const TokenBatch&);                  \
  template Var<S> lm_loss<S>(Graph<S>&, const Var<S>&, const TokenBatch&);                    \
  template double evaluate_loss<S>(const DenseLm<S>&, std::span<const TokenBatch>);

TDMOE_INSTANTIATE(float)
TDMOE_INSTANTIATE(double)
#undef TDMOE_INSTANTIATE

}  // namespace tdmoe
