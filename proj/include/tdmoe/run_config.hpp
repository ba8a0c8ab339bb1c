// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tdmoe/adaptation.hpp"
#include "tdmoe/pretrain.hpp"

namespace tdmoe {

/// Every knob of a workbench run, as one flat JSON object. Keys match the
/// field names; unknown keys are rejected.
struct RunConfig {
  // Data
  std::string corpus;  // text file; empty selects the synthetic corpus
  std::uint64_t synthetic_seed = 7;
  std::size_t synthetic_bytes = 1 << 20;
  double heldout_fraction = 0.05;
  std::size_t split_block = 1024;
  std::string out_dir;  // empty: $TDMOE_OUT_DIR, else "runs"
  std::uint64_t seed = 1;
  std::string precision = "f32";

  // Model
  std::size_t embed_dim = 128;
  std::size_t hidden_dim = 512;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t max_seq_len = 64;
  std::string activation = "silu";

  // Pretraining
  std::size_t pretrain_steps = 2000;
  std::size_t pretrain_batch = 8;
  double pretrain_lr = 1e-3;
  double pretrain_weight_decay = 0.0;

  // Adaptation
  double theta = 0.8;
  std::vector<double> thetas = {0.7, 0.8, 0.9};
  double lambda_llm = 0.2;
  double lambda_router = 1.0;
  std::size_t adapt_steps = 2000;
  std::size_t adapt_batch = 8;
  double adapt_lr = 3e-4;
  double adapt_weight_decay = 0.0;
  bool freeze_attention = true;
  bool ablation_mode = false;
  bool auto_reorder = true;
  std::size_t num_experts = 4;
  std::size_t router_hidden = 64;
  std::string router_nonlinearity = "relu";
  std::size_t calibration_tokens = 16384;

  // Evaluation
  std::size_t eval_batch = 8;
  std::size_t eval_max_tokens = 32768;

  nlohmann::json to_json() const;
  /// Starts from defaults and applies `j`. Unknown keys and type errors raise
  /// ConfigError naming the key.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  /// `key=value`; the value is parsed as JSON, falling back to a plain string.
  void apply_override(std::string_view assignment);

  /// Full validation, before any compute.
  void validate() const;

  std::filesystem::path output_dir() const;
  ModelConfig model_config(std::size_t vocab_size) const;
  PretrainOptions pretrain_options() const;
  AdaptConfig adapt_config() const;
  SplitOptions split_options() const;
};

/// The configured corpus: the text file when set, else the synthetic text.
std::string corpus_text(const RunConfig& config);

}  // namespace tdmoe
