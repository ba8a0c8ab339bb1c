// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "tdmoe/analysis.hpp"
#include "tdmoe/checkpoint.hpp"
#include "tdmoe/cli.hpp"
#include "tdmoe/run_config.hpp"

using namespace tdmoe;
using namespace tdmoe::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tdmoe_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

template <typename S>
void check_same(const std::vector<std::pair<std::string, Var<S>>>& a,
                const std::vector<std::pair<std::string, Var<S>>>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(bit_equal(a[i].second.value(), b[i].second.value()));
  }
}

std::string rewrite_manifest(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
  const CheckpointContainer c = parse_container(bytes);
  CheckpointContainer d = c;
  edit(d.manifest);
  return serialize_container(d);
}

}  // namespace

TEST_CASE("checkpoint round trip is exact") {
  const auto dir = scratch("ckpt");
  DenseLm<float> dense = init_dense_lm<float>(tiny_config(), test_vocab(11));
  save_container(dir / "dense.ckpt", to_container(dense, {{"note", "x"}}));
  const CheckpointContainer loaded = load_container(dir / "dense.ckpt");
  CHECK(loaded.kind() == "dense");
  const DenseLm<float> back = dense_from_container<float>(loaded);
  check_same(dense.named_parameters(), back.named_parameters());
  CHECK_FALSE(back.reordered);
  CHECK(back.vocab.symbols() == dense.vocab.symbols());
  CHECK(back.config.hidden_dim == dense.config.hidden_dim);
  save_container(dir / "again.ckpt", loaded);
  CHECK(read_file(dir / "dense.ckpt") == read_file(dir / "again.ckpt"));
  // Names are namespaced by layer and role; entries tile the payload.
  const auto entries = loaded.tensors();
  CHECK(loaded.entry("layers.1.mlp.w_in").shape == Shape{16, 8});
  std::uint64_t end = 0;
  for (const auto& e : entries) {
    CHECK(e.offset == end);
    end += e.length;
  }
  CHECK(end == loaded.payload.size());

  AdaptConfig ac;
  ac.theta = 0.7;
  ac.router_hidden = 5;
  const auto adapted = tiny_adapted<double>(ac);
  const auto c = to_container(adapted);
  CHECK(c.kind() == "adapted");
  const std::string bytes = serialize_container(c);
  const auto round = adapted_from_container<double>(parse_container(bytes));
  check_same(adapted.named_parameters(), round.named_parameters());
  CHECK(round.theta() == 0.7);
  CHECK(round.widths == adapted.widths);
  CHECK(serialize_container(to_container(round)) == bytes);
  // An adapted checkpoint still yields its base model.
  CHECK(dense_from_container<double>(c).reordered);
  CHECK_THROWS_AS(adapted_from_container<double>(to_container(init_dense_lm<double>(tiny_config(), test_vocab(11)))),
                  LoadError);
  fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected with the offending tensor named") {
  const DenseLm<double> dense = init_dense_lm<double>(tiny_config(), test_vocab(11));
  const std::string bytes = serialize_container(to_container(dense));

  CHECK_THROWS_AS(parse_container(bytes.substr(0, bytes.size() - 3)), LoadError);
  CHECK_THROWS_AS(parse_container(bytes + "x"), LoadError);
  CHECK_THROWS_AS(parse_container("garbage"), LoadError);
  CHECK_THROWS_AS(parse_container("tdmoe-checkpoint v2 2 0\n{}"), LoadError);
  CHECK_THROWS_AS(parse_container("tdmoe-checkpoint v1 5 0\n{oops"), LoadError);

  const auto expect_named = [](const std::string& data, const std::string& name) {
    try {
      parse_container(data);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find(name) != std::string::npos);
    }
  };
  expect_named(rewrite_manifest(bytes, [](nlohmann::json& m) { m["tensors"][3]["offset"] = 1ULL << 62; }),
               "layers.0.attn.wq");
  expect_named(rewrite_manifest(bytes, [](nlohmann::json& m) { m["tensors"][2]["length"] = 8; }),
               "layers.0.attn_norm");
  expect_named(rewrite_manifest(bytes, [](nlohmann::json& m) { m["tensors"][0]["dtype"] = "i8"; }),
               "token_embedding");
  expect_named(rewrite_manifest(bytes, [](nlohmann::json& m) { m["tensors"][1]["offset"] = 0; }),
               "position_embedding");

  // Stored f64, read as f32.
  try {
    dense_from_container<float>(parse_container(bytes));
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("token_embedding") != std::string::npos);
  }
  CHECK_THROWS_AS(load_container("/nonexistent/x.ckpt"), LoadError);
}

TEST_CASE("run config") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(RunConfig::from_json({{"bogus", 1}}), ConfigError);
  try {
    RunConfig::from_json({{"hidden_dim", "wide"}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "hidden_dim");
  }
  CHECK_THROWS_AS(RunConfig::from_json({{"adapt_steps", -3}}), ConfigError);
  c.apply_override("theta=0.7");
  CHECK(c.theta == 0.7);
  c.apply_override("thetas=[0.6,0.9]");
  CHECK(c.thetas == std::vector<double>{0.6, 0.9});
  c.apply_override("router_nonlinearity=none");
  CHECK(c.router_nonlinearity == "none");
  c.apply_override("corpus=123");
  CHECK(c.corpus == "123");
  CHECK_THROWS_AS(c.apply_override("nokey"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("whatever=1"), ConfigError);
  RunConfig bad;
  bad.precision = "f16";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.num_experts = 600;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.ablation_mode = true;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(RunConfig{}.adapt_config().router_hidden == 64);
}

TEST_CASE("command line pipeline") {
  const auto dir = scratch("cli");
  const nlohmann::json cfg = {{"embed_dim", 16},         {"hidden_dim", 32},      {"num_layers", 2},
                              {"num_heads", 2},          {"max_seq_len", 16},     {"synthetic_bytes", 30000},
                              {"pretrain_steps", 6},     {"adapt_steps", 4},      {"calibration_tokens", 256},
                              {"eval_max_tokens", 512},  {"router_hidden", 8},    {"adapt_batch", 4}};
  { std::ofstream(dir / "cfg.json") << cfg.dump(); }
  const std::string c = (dir / "cfg.json").string();
  std::ostringstream out, err;
  const auto run = [&](std::vector<std::string> args) { return run_cli(args, out, err); };

  REQUIRE(run({"pretrain", "--config", c, "--out", (dir / "p").string()}) == kExitOk);
  CHECK(fs::exists(dir / "p" / "dense.ckpt"));
  CHECK(fs::exists(dir / "p" / "pretrain_loss.csv"));
  const auto resolved = RunConfig::load(dir / "p" / "resolved_config.json");
  CHECK(resolved.embed_dim == 16);
  CHECK(resolved.out_dir == (dir / "p").string());

  const std::string dense = (dir / "p" / "dense.ckpt").string();
  REQUIRE(run({"family", "--config", c, "--ckpt", dense, "--thetas", "0.7,0.8,0.9", "--out", (dir / "f").string()}) == kExitOk);
  for (const char* t : {"0.7", "0.8", "0.9"}) {
    CHECK(fs::exists(dir / "f" / (std::string("adapted_theta") + t + ".ckpt")));
    CHECK(fs::exists(dir / "f" / (std::string("adapt_log_theta") + t + ".csv")));
  }
  { std::ofstream(dir / "held_out.txt") << synthesize_text(99, 3000); }
  REQUIRE(run({"analyze", "--config", c, "--ckpt", (dir / "f" / "adapted_theta0.8.ckpt").string(), "--eval",
               (dir / "held_out.txt").string(), "--out", (dir / "a").string()}) == kExitOk);
  CHECK(fs::exists(dir / "a" / "confusion.csv"));
  CHECK(fs::exists(dir / "a" / "usage.csv"));
  const auto metrics = nlohmann::json::parse(read_file(dir / "a" / "metrics.json"));
  CHECK(metrics["theta"] == 0.8);
  REQUIRE(run({"reorder", "--config", c, "--ckpt", dense, "--out", (dir / "r").string()}) == kExitOk);
  REQUIRE(run({"adapt", "--config", c, "--ckpt", (dir / "r" / "reordered.ckpt").string(), "--set", "auto_reorder=false",
               "--theta", "0.75", "--out", (dir / "d").string()}) == kExitOk);
  CHECK(fs::exists(dir / "d" / "adapted_theta0.75.ckpt"));
  REQUIRE(run({"eval", "--config", c, "--ckpt", dense, "--out", (dir / "e").string()}) == kExitOk);
  CHECK(fs::exists(dir / "e" / "eval_metrics.json"));
  REQUIRE(run({"ablate", "--config", c, "--ckpt", dense, "--out", (dir / "b").string()}) == kExitOk);
  CHECK(fs::exists(dir / "b" / "ablation.json"));

  // Unreordered input without auto reorder is a configuration error.
  CHECK(run({"adapt", "--config", c, "--ckpt", dense, "--set", "auto_reorder=false", "--out", (dir / "x").string()}) == kExitFailure);
  CHECK(err.str().find("auto_reorder") != std::string::npos);

  CHECK(run({}) == kExitUsage);
  CHECK(run({"frobnicate"}) == kExitUsage);
  CHECK(run({"pretrain", "--bogus"}) == kExitUsage);
  CHECK(run({"adapt"}) == kExitUsage);  // --ckpt is required
  CHECK(run({"pretrain", "--set", "nope=1"}) == kExitFailure);
  CHECK(run({"pretrain", "--set", "num_heads=3", "--out", (dir / "x").string()}) == kExitFailure);
  CHECK(run({"adapt", "--ckpt", dense, "--theta", "1.5"}) == kExitFailure);
  CHECK(run({"eval", "--ckpt", (dir / "missing.ckpt").string(), "--out", (dir / "x").string()}) == kExitFailure);
  CHECK(run({"pretrain", "--help"}) == kExitOk);

  // The output directory falls back to the environment.
  setenv("TDMOE_OUT_DIR", (dir / "env").string().c_str(), 1);
  CHECK(run({"eval", "--config", c, "--ckpt", dense}) == kExitOk);
  unsetenv("TDMOE_OUT_DIR");
  CHECK(fs::exists(dir / "env" / "eval_metrics.json"));
  fs::remove_all(dir);
}
