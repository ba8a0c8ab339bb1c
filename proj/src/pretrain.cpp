// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/pretrain.hpp"

#include <iomanip>

namespace tdmoe {

template <typename S>
PretrainResult<S> pretrain(const Corpus& corpus, const ModelConfig& config,
                           const PretrainOptions& options, std::ostream* curve_csv) {
  config.validate();
  const std::size_t seq = config.max_seq_len;
  if (seq < 2) throw ConfigError("max_seq_len", "must be at least 2 for next-token training");
  if (corpus.train.size() < seq) {
    throw ConfigError("corpus", "training split has " + std::to_string(corpus.train.size()) +
                                    " tokens, fewer than one window of " + std::to_string(seq));
  }
  if (options.batch == 0) throw ConfigError("pretrain_batch", "must be at least 1");

  PretrainResult<S> result{init_dense_lm<S>(config, corpus.vocab), {}, 0.0};
  std::vector<Var<S>> params;
  for (auto& [name, p] : result.model.named_parameters()) params.push_back(p);
  AdamW<S> opt(params, {options.lr, options.weight_decay});

  // Batch sampling has its own stream so changing init never shifts the data.
  Rng data_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  if (curve_csv) *curve_csv << "step,loss\n" << std::setprecision(9);
  for (std::size_t step = 0; step < options.steps; ++step) {
    const TokenBatch tb = sample_batch(corpus.train, options.batch, seq, data_rng);
    Graph<S> g;
    const Var<S> loss = lm_loss(g, forward_dense(g, result.model, tb), tb);
    g.backward(loss);
    opt.step();
    opt.zero_grad();
    const double l = static_cast<double>(loss.value()[0]);
    result.losses.push_back(l);
    if (curve_csv) *curve_csv << step << ',' << l << '\n';
  }

  if (!corpus.heldout.empty()) {
    const auto batches = eval_batches(corpus.heldout, options.eval_batch, seq, options.eval_max_tokens);
    if (!batches.empty()) result.heldout_loss = evaluate_loss(result.model, std::span(batches));
  }
  return result;
}

template PretrainResult<float> pretrain<float>(const Corpus&, const ModelConfig&,
                                               const PretrainOptions&, std::ostream*);
template PretrainResult<double> pretrain<double>(const Corpus&, const ModelConfig&,
                                                 const PretrainOptions&, std::ostream*);

}  // namespace tdmoe
