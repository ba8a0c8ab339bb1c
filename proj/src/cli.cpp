// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "tdmoe/analysis.hpp"
#include "tdmoe/checkpoint.hpp"
#include "tdmoe/run_config.hpp"

namespace tdmoe {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Invocation {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string ckpt;
  std::string eval_path;
  std::string theta;
  std::string thetas;
};

std::string theta_tag(double theta) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", theta);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

class Workbench {
 public:
  Workbench(Invocation inv, RunConfig config, std::ostream& out)
      : inv_(std::move(inv)), config_(std::move(config)), out_(out) {}

  template <typename S>
  void run() {
    dir_ = config_.output_dir();
    fs::create_directories(dir_);
    RunConfig resolved = config_;
    resolved.out_dir = dir_.string();
    write_text(dir_ / "resolved_config.json", resolved.to_json().dump(2) + "\n");
    write_text(dir_ / "inputs.json", json{{"command", inv_.command},
                                          {"ckpt", inv_.ckpt},
                                          {"eval", inv_.eval_path}}
                                         .dump(2) + "\n");

    const std::string& c = inv_.command;
    if (c == "pretrain") pretrain_stage<S>();
    else if (c == "reorder") reorder_stage<S>();
    else if (c == "adapt") adapt_stage<S>();
    else if (c == "family") family_stage<S>();
    else if (c == "eval") eval_stage<S>();
    else if (c == "analyze") analyze_stage<S>();
    else if (c == "ablate") ablate_stage<S>();
  }

 private:
  fs::path ckpt_path() const {
    if (inv_.ckpt.empty()) throw ConfigError("ckpt", "--ckpt is required for " + inv_.command);
    return inv_.ckpt;
  }

  Corpus corpus_for(const Vocabulary* vocab) const {
    const std::string text = corpus_text(config_);
    return vocab ? split_corpus(text, *vocab, config_.split_options())
                 : split_corpus(text, config_.split_options());
  }

  std::vector<TokenBatch> eval_data(const Vocabulary& vocab, std::size_t seq) const {
    std::vector<int> stream;
    if (!inv_.eval_path.empty()) {
      const std::string text = read_text_file(inv_.eval_path);
      if (text.empty()) throw LoadError("evaluation file " + inv_.eval_path + " is empty");
      stream = vocab.encode(text);
    } else {
      stream = corpus_for(&vocab).heldout;
    }
    auto batches = eval_batches(stream, config_.eval_batch, seq, config_.eval_max_tokens);
    if (batches.empty()) {
      throw ConfigError("eval", "evaluation text is shorter than one sequence of " +
                                    std::to_string(seq) + " tokens");
    }
    return batches;
  }

  template <typename S>
  void save(const CheckpointContainer& c, const std::string& name) {
    save_container(dir_ / name, c);
    out_ << "wrote " << (dir_ / name).string() << '\n';
  }

  template <typename S>
  void pretrain_stage() {
    const Corpus corpus = corpus_for(nullptr);
    const ModelConfig mc = config_.model_config(corpus.vocab.size());
    mc.validate(config_.num_experts);
    std::ofstream curve(dir_ / "pretrain_loss.csv");
    const PretrainResult<S> r = pretrain<S>(corpus, mc, config_.pretrain_options(), &curve);
    const json meta{{"stage", "pretrain"},
                    {"steps", config_.pretrain_steps},
                    {"heldout_loss", r.heldout_loss},
                    {"final_train_loss", r.losses.empty() ? 0.0 : r.losses.back()}};
    save<S>(to_container(r.model, meta), "dense.ckpt");
    write_text(dir_ / "pretrain_metrics.json",
               json{{"heldout_loss", r.heldout_loss},
                    {"heldout_perplexity", std::exp(r.heldout_loss)},
                    {"dense_params", dense_param_count(mc)}}
                       .dump(2) + "\n");
    out_ << "held-out loss " << r.heldout_loss << '\n';
  }

  template <typename S>
  void reorder_stage() {
    const DenseLm<S> dense = dense_from_container<S>(load_container(ckpt_path()));
    const Corpus corpus = corpus_for(&dense.vocab);
    AdaptConfig ac = config_.adapt_config();
    ac.auto_reorder = true;
    const DenseLm<S> reordered = reorder_for_adaptation(dense, corpus.train, ac);
    save<S>(to_container(reordered, json{{"stage", "reorder"},
                                         {"calibration_tokens", ac.calibration_tokens}}),
            "reordered.ckpt");
  }

  template <typename S>
  void write_adapted(const AdaptResult<S>& r, const std::string& prefix) {
    const json meta{{"stage", inv_.command},
                    {"final_llm_loss", r.log.empty() ? 0.0 : r.log.back().llm_loss},
                    {"final_router_acc", r.log.empty() ? 0.0 : r.log.back().router_acc},
                    {"label_counts", r.label_counts}};
    save<S>(to_container(r.model, meta), prefix + ".ckpt");
  }

  template <typename S>
  void adapt_stage() {
    const DenseLm<S> base = dense_from_container<S>(load_container(ckpt_path()));
    const Corpus corpus = corpus_for(&base.vocab);
    const AdaptConfig ac = config_.adapt_config();
    const std::string tag = "theta" + theta_tag(ac.theta);
    std::ofstream log(dir_ / ("adapt_log_" + tag + ".csv"));
    write_adapted(adapt(base, corpus, ac, &log), "adapted_" + tag);
  }

  template <typename S>
  void family_stage() {
    const DenseLm<S> base = dense_from_container<S>(load_container(ckpt_path()));
    const Corpus corpus = corpus_for(&base.vocab);
    std::vector<std::unique_ptr<std::ofstream>> logs;
    std::vector<std::ostream*> log_ptrs;
    for (double t : config_.thetas) {
      logs.push_back(std::make_unique<std::ofstream>(dir_ / ("adapt_log_theta" + theta_tag(t) + ".csv")));
      log_ptrs.push_back(logs.back().get());
    }
    const auto family = build_family(base, corpus, std::span<const double>(config_.thetas),
                                     config_.adapt_config(), log_ptrs);
    for (const AdaptResult<S>& r : family) write_adapted(r, "adapted_theta" + theta_tag(r.model.theta()));
  }

  template <typename S>
  void eval_stage() {
    const CheckpointContainer c = load_container(ckpt_path());
    json metrics{{"kind", c.kind()}};
    if (c.kind() == "adapted") {
      const AdaptedLm<S> m = adapted_from_container<S>(c);
      const auto batches = eval_data(m.base.vocab, m.base.config.max_seq_len);
      const double dense = evaluate_loss(m.base, std::span<const TokenBatch>(batches));
      const double routed = routed_loss(m, std::span<const TokenBatch>(batches));
      metrics["dense_loss"] = dense;
      metrics["dense_perplexity"] = std::exp(dense);
      metrics["routed_loss"] = routed;
      metrics["perplexity"] = std::exp(routed);
    } else {
      const DenseLm<S> m = dense_from_container<S>(c);
      const auto batches = eval_data(m.vocab, m.config.max_seq_len);
      const double loss = evaluate_loss(m, std::span<const TokenBatch>(batches));
      metrics["dense_loss"] = loss;
      metrics["perplexity"] = std::exp(loss);
    }
    write_text(dir_ / "eval_metrics.json", metrics.dump(2) + "\n");
    out_ << "perplexity " << metrics["perplexity"].get<double>() << '\n';
  }

  template <typename S>
  AnalysisMetrics analyze_model(const AdaptedLm<S>& m, std::span<const TokenBatch> batches,
                                double theta, const std::string& suffix) {
    const ConfusionMatrix cm = confusion(m, batches, theta);
    const UsageReport usage = expert_usage(m, batches);
    AnalysisMetrics am;
    am.theta = theta;
    am.accuracy = cm.accuracy();
    am.adjacent_error_fraction = cm.adjacent_error_fraction();
    am.router_errors = cm.has_errors();
    am.majority_baseline = cm.majority_baseline();
    am.activated_params = usage.activated_params;
    am.dense_params = dense_param_count(m.base.config);
    am.perplexity = std::exp(routed_loss(m, batches));
    am.dense_perplexity = std::exp(evaluate_loss(m.base, batches));
    am.mean_usage_entropy = usage.mean_entropy;
    for (const TokenBatch& tb : batches) am.eval_tokens += tb.tokens();

    std::ofstream conf(dir_ / ("confusion" + suffix + ".csv"));
    write_confusion_csv(conf, cm);
    std::ofstream use(dir_ / ("usage" + suffix + ".csv"));
    write_usage_csv(use, usage);
    write_text(dir_ / ("metrics" + suffix + ".json"), metrics_json(am));
    return am;
  }

  template <typename S>
  void analyze_stage() {
    const AdaptedLm<S> m = adapted_from_container<S>(load_container(ckpt_path()));
    const auto batches = eval_data(m.base.vocab, m.base.config.max_seq_len);
    const double theta = inv_.theta.empty() ? m.theta() : config_.theta;
    const AnalysisMetrics am = analyze_model(m, std::span<const TokenBatch>(batches), theta, "");
    out_ << "router accuracy " << am.accuracy << ", activated params " << am.activated_params
         << ", perplexity " << am.perplexity << '\n';
  }

  template <typename S>
  void ablate_stage() {
    const DenseLm<S> base = dense_from_container<S>(load_container(ckpt_path()));
    const Corpus corpus = corpus_for(&base.vocab);
    AdaptConfig with = config_.adapt_config();
    with.ablation_mode = false;
    if (with.lambda_router == 0.0) with.lambda_router = 1.0;
    AdaptConfig without = with;
    without.ablation_mode = true;
    without.lambda_router = 0.0;
    const std::string tag = "theta" + theta_tag(with.theta);
    const DenseLm<S> reordered = reorder_for_adaptation(base, corpus.train, with);
    std::ofstream log_a(dir_ / ("adapt_log_" + tag + ".csv"));
    const AdaptResult<S> a = adapt(reordered, corpus, with, &log_a);
    std::ofstream log_b(dir_ / ("ablated_log_" + tag + ".csv"));
    const AdaptResult<S> b = adapt(reordered, corpus, without, &log_b);
    write_adapted(a, "adapted_" + tag);
    write_adapted(b, "ablated_" + tag);

    const auto batches = eval_data(base.vocab, base.config.max_seq_len);
    const std::span<const TokenBatch> data(batches);
    const AnalysisMetrics ma = analyze_model(a.model, data, with.theta, "_router_loss");
    const AnalysisMetrics mb = analyze_model(b.model, data, with.theta, "_ablated");
    write_text(dir_ / "ablation.json",
               json{{"entropy_with_router_loss", ma.mean_usage_entropy},
                    {"entropy_ablated", mb.mean_usage_entropy},
                    {"ablated_lower", mb.mean_usage_entropy < ma.mean_usage_entropy}}
                       .dump(2) + "\n");
    out_ << "usage entropy with router loss " << ma.mean_usage_entropy << ", ablated "
         << mb.mean_usage_entropy << '\n';
  }

  Invocation inv_;
  RunConfig config_;
  std::ostream& out_;
  fs::path dir_;
};

std::vector<double> parse_thetas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("thetas", "cannot parse '" + item + "' as a number");
    }
  }
  if (out.empty()) throw ConfigError("thetas", "list is empty");
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Token-difficulty mixture-of-experts workbench", "tdmoe"};
  app.require_subcommand(1);
  Invocation inv;

  const auto common = [&inv](CLI::App* sub) {
    sub->add_option("--config", inv.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--set", inv.overrides, "Override a configuration key (key=value)");
    sub->add_option("--out", inv.out_dir, "Output directory (default $TDMOE_OUT_DIR or runs)");
  };
  const auto needs_ckpt = [&inv](CLI::App* sub) {
    sub->add_option("--ckpt", inv.ckpt, "Input checkpoint")->required();
  };

  CLI::App* pre = app.add_subcommand("pretrain", "Train the dense model");
  common(pre);
  CLI::App* reo = app.add_subcommand("reorder", "Sort MLP hidden units by importance");
  common(reo);
  needs_ckpt(reo);
  CLI::App* ada = app.add_subcommand("adapt", "Adapt a dense model at one theta");
  common(ada);
  needs_ckpt(ada);
  ada->add_option("--theta", inv.theta, "Similarity threshold");
  CLI::App* fam = app.add_subcommand("family", "Adapt one model per theta");
  common(fam);
  needs_ckpt(fam);
  fam->add_option("--thetas", inv.thetas, "Comma-separated thresholds, e.g. 0.7,0.8,0.9");
  CLI::App* ev = app.add_subcommand("eval", "Held-out perplexity");
  common(ev);
  needs_ckpt(ev);
  ev->add_option("--eval", inv.eval_path, "Evaluation text (default: held-out split)");
  CLI::App* ana = app.add_subcommand("analyze", "Confusion, usage and activated parameters");
  common(ana);
  needs_ckpt(ana);
  ana->add_option("--eval", inv.eval_path, "Evaluation text (default: held-out split)");
  ana->add_option("--theta", inv.theta, "Label threshold (default: the model's own)");
  CLI::App* abl = app.add_subcommand("ablate", "Adapt with and without router loss");
  common(abl);
  needs_ckpt(abl);
  abl->add_option("--eval", inv.eval_path, "Evaluation text (default: held-out split)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << target->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    const CLI::App* target = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << target->help();
    return kExitUsage;
  }
  inv.command = app.get_subcommands().front()->get_name();

  try {
    RunConfig config = inv.config_path.empty() ? RunConfig{} : RunConfig::load(inv.config_path);
    for (const std::string& o : inv.overrides) config.apply_override(o);
    if (!inv.out_dir.empty()) config.out_dir = inv.out_dir;
    if (!inv.theta.empty()) config.apply_override("theta=" + inv.theta);
    if (!inv.thetas.empty()) config.thetas = parse_thetas(inv.thetas);
    config.validate();

    Workbench wb(inv, config, out);
    if (config.precision == "f64") wb.run<double>();
    else wb.run<float>();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
  }
  return kExitFailure;
}

}  // namespace tdmoe
