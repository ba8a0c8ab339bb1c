// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>

#include "tdmoe/model.hpp"
#include "tdmoe/optim.hpp"

namespace tdmoe {

struct PretrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t eval_batch = 16;
  std::size_t eval_max_tokens = 0;  // 0: whole held-out split
};

template <typename S>
struct PretrainResult {
  DenseLm<S> model;
  std::vector<double> losses;  // one per step
  double heldout_loss = 0.0;
};

/// Trains the dense model from `config.seed` on random windows of
/// max_seq_len tokens. Writes "step,loss" lines to `curve_csv` when given.
template <typename S>
PretrainResult<S> pretrain(const Corpus& corpus, const ModelConfig& config,
                           const PretrainOptions& options, std::ostream* curve_csv = nullptr);

}  // namespace tdmoe
