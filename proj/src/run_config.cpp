// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/run_config.hpp"

#include <cstdlib>
#include <fstream>

namespace tdmoe {
namespace {

using nlohmann::json;

// Visits every (key, member) pair once; used for both directions.
template <typename Config, typename F>
void for_each_field(Config& c, F&& f) {
  f("corpus", c.corpus);
  f("synthetic_seed", c.synthetic_seed);
  f("synthetic_bytes", c.synthetic_bytes);
  f("heldout_fraction", c.heldout_fraction);
  f("split_block", c.split_block);
  f("out_dir", c.out_dir);
  f("seed", c.seed);
  f("precision", c.precision);
  f("embed_dim", c.embed_dim);
  f("hidden_dim", c.hidden_dim);
  f("num_layers", c.num_layers);
  f("num_heads", c.num_heads);
  f("max_seq_len", c.max_seq_len);
  f("activation", c.activation);
  f("pretrain_steps", c.pretrain_steps);
  f("pretrain_batch", c.pretrain_batch);
  f("pretrain_lr", c.pretrain_lr);
  f("pretrain_weight_decay", c.pretrain_weight_decay);
  f("theta", c.theta);
  f("thetas", c.thetas);
  f("lambda_llm", c.lambda_llm);
  f("lambda_router", c.lambda_router);
  f("adapt_steps", c.adapt_steps);
  f("adapt_batch", c.adapt_batch);
  f("adapt_lr", c.adapt_lr);
  f("adapt_weight_decay", c.adapt_weight_decay);
  f("freeze_attention", c.freeze_attention);
  f("ablation_mode", c.ablation_mode);
  f("auto_reorder", c.auto_reorder);
  f("num_experts", c.num_experts);
  f("router_hidden", c.router_hidden);
  f("router_nonlinearity", c.router_nonlinearity);
  f("calibration_tokens", c.calibration_tokens);
  f("eval_batch", c.eval_batch);
  f("eval_max_tokens", c.eval_max_tokens);
}

template <typename T>
void assign(const std::string& key, const json& value, T& member) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!value.is_boolean()) throw ConfigError(key, "expected true or false");
  } else if constexpr (std::is_integral_v<T>) {
    if (!value.is_number_integer() || (value.is_number_integer() && !value.is_number_unsigned() &&
                                       value.get<std::int64_t>() < 0)) {
      throw ConfigError(key, "expected a non-negative integer");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!value.is_number()) throw ConfigError(key, "expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!value.is_string()) throw ConfigError(key, "expected a string");
  } else {
    if (!value.is_array()) throw ConfigError(key, "expected a list of numbers");
    for (const json& v : value) {
      if (!v.is_number()) throw ConfigError(key, "expected a list of numbers");
    }
  }
  member = value.get<T>();
}

}  // namespace

json RunConfig::to_json() const {
  json j = json::object();
  for_each_field(*this, [&](const char* key, const auto& member) { j[key] = member; });
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config", "expected a JSON object");
  RunConfig c;
  std::size_t matched = 0;
  for_each_field(c, [&](const char* key, auto& member) {
    if (j.contains(key)) {
      assign(key, j[key], member);
      ++matched;
    }
  });
  if (matched != j.size()) {
    const json known = c.to_json();
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw ConfigError(key, "unknown configuration key");
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& ex) {
    throw ConfigError("config", path.string() + " is not valid JSON: " + ex.what());
  }
  return from_json(j);
}

void RunConfig::apply_override(std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("set", "expected key=value, got '" + std::string(assignment) + "'");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json j = to_json();
  if (!j.contains(key)) throw ConfigError(key, "unknown configuration key");
  // String fields take the raw text even when it would parse as JSON.
  if (j[key].is_string()) value = text;
  j[key] = value;
  *this = from_json(j);
}

void RunConfig::validate() const {
  if (precision != "f32" && precision != "f64") {
    throw ConfigError("precision", "expected f32 or f64, got '" + precision + "'");
  }
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) {
    throw ConfigError("heldout_fraction", "must lie strictly between 0 and 1");
  }
  if (split_block == 0) throw ConfigError("split_block", "must be positive");
  if (corpus.empty() && synthetic_bytes == 0) {
    throw ConfigError("synthetic_bytes", "must be positive when no corpus file is given");
  }
  parse_activation(activation);
  parse_router_nonlinearity(router_nonlinearity);
  ModelConfig m = model_config(2);
  m.validate(num_experts);
  if (pretrain_batch == 0) throw ConfigError("pretrain_batch", "must be at least 1");
  if (!(pretrain_lr > 0.0)) throw ConfigError("pretrain_lr", "must be positive");
  if (!(pretrain_weight_decay >= 0.0)) {
    throw ConfigError("pretrain_weight_decay", "must be non-negative");
  }
  AdaptConfig a = adapt_config();
  a.validate();
  if (thetas.empty()) throw ConfigError("thetas", "list is empty");
  for (double t : thetas) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("thetas", "every theta must lie in (0, 1)");
  }
  if (eval_batch == 0) throw ConfigError("eval_batch", "must be at least 1");
}

std::filesystem::path RunConfig::output_dir() const {
  if (!out_dir.empty()) return out_dir;
  if (const char* env = std::getenv("TDMOE_OUT_DIR"); env && *env) return env;
  return "runs";
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.embed_dim = embed_dim;
  m.hidden_dim = hidden_dim;
  m.num_layers = num_layers;
  m.num_heads = num_heads;
  m.max_seq_len = max_seq_len;
  m.activation = parse_activation(activation);
  m.seed = seed;
  return m;
}

PretrainOptions RunConfig::pretrain_options() const {
  PretrainOptions p;
  p.steps = pretrain_steps;
  p.batch = pretrain_batch;
  p.lr = pretrain_lr;
  p.weight_decay = pretrain_weight_decay;
  p.eval_batch = eval_batch;
  p.eval_max_tokens = eval_max_tokens;
  return p;
}

AdaptConfig RunConfig::adapt_config() const {
  AdaptConfig a;
  a.theta = theta;
  a.lambda_llm = lambda_llm;
  a.lambda_router = lambda_router;
  a.steps = adapt_steps;
  a.batch = adapt_batch;
  a.lr = adapt_lr;
  a.weight_decay = adapt_weight_decay;
  a.freeze_attention = freeze_attention;
  a.ablation_mode = ablation_mode;
  a.auto_reorder = auto_reorder;
  a.num_experts = num_experts;
  a.router_hidden = router_hidden;
  a.router_nonlinearity = parse_router_nonlinearity(router_nonlinearity);
  a.calibration_tokens = calibration_tokens;
  a.seed = seed;
  return a;
}

SplitOptions RunConfig::split_options() const { return {heldout_fraction, split_block}; }

std::string corpus_text(const RunConfig& config) {
  if (config.corpus.empty()) return synthesize_text(config.synthetic_seed, config.synthetic_bytes);
  const std::string text = read_text_file(config.corpus);
  if (text.empty()) throw LoadError("corpus file " + config.corpus + " is empty");
  return text;
}

}  // namespace tdmoe
