// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <sstream>

#include "doctest.h"
#include "test_util.hpp"

using namespace tdmoe;
using namespace tdmoe::testing;

namespace {

AdaptConfig small_config(double theta = 0.8) {
  AdaptConfig c;
  c.theta = theta;
  c.num_experts = 4;
  c.router_hidden = 5;
  c.batch = 3;
  c.calibration_tokens = 64;
  c.seed = 11;
  return c;
}

Corpus small_corpus() { return split_corpus(synthesize_text(2, 20000)); }

ModelConfig corpus_model(const Corpus& c) {
  ModelConfig m = tiny_config(c.vocab.size());
  m.embed_dim = 8;
  m.hidden_dim = 16;
  return m;
}

}  // namespace

TEST_CASE("adaptation config validation") {
  AdaptConfig c;
  CHECK_NOTHROW(c.validate());
  c.theta = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AdaptConfig{};
  c.ablation_mode = true;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "lambda_router");
  }
  c.lambda_router = 0.0;
  CHECK_NOTHROW(c.validate());
  c.lambda_llm = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  AdaptConfig big;
  big.num_experts = 17;
  DenseLm<float> base = init_dense_lm<float>(tiny_config(), test_vocab(11));
  base.reordered = true;
  CHECK_THROWS_AS(init_adapted(base, big), ConfigError);
  base.reordered = false;
  CHECK_THROWS_AS(init_adapted(base, AdaptConfig{}), ConfigError);
}

TEST_CASE("combined loss") {
  Graph<double> g;
  const auto llm = Var<double>::constant(Tensor<double>::vector({2.0}));
  const auto router = Var<double>::constant(Tensor<double>::vector({1.0}));
  AdaptConfig c;
  CHECK(combined_loss(g, llm, router, c).value()[0] == doctest::Approx(1.4).epsilon(1e-15));
  c.lambda_router = 0.0;
  CHECK(combined_loss(g, llm, router, c).value()[0] == 0.2 * 2.0);
  const auto zero = Var<double>::constant(Tensor<double>::vector({0.0}));
  CHECK(combined_loss(g, zero, zero, AdaptConfig{}).value()[0] == 0.0);
  // Doubling lambda_router doubles the router contribution exactly.
  c.lambda_llm = 0.0;
  c.lambda_router = 0.37;
  const auto r = Var<double>::constant(Tensor<double>::vector({1.234567}));
  const double one = combined_loss(g, zero, r, c).value()[0];
  c.lambda_router = 0.74;
  CHECK(combined_loss(g, zero, r, c).value()[0] == 2 * one);
  CHECK_THROWS_AS(combined_loss(g, Var<double>::constant(Tensor<double>({2})), r, c), ShapeError);
}

TEST_CASE("forcing the full expert reproduces the dense forward bit for bit") {
  const auto m = tiny_adapted<float>(small_config(), 12, 20.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const TokenBatch tb = random_tokens(3, 6, 12, seed);
    Graph<float> g = Graph<float>::inference();
    const auto f = adapt_forward(g, m, tb, RoutingMode::forced, 3);
    const auto dense = forward_dense(m.base, tb);
    CHECK(bit_equal(f.logits.value().reshaped(dense.shape()), dense));
  }
}

TEST_CASE("theta just below one labels almost everything with the full expert") {
  const auto m = tiny_adapted<double>(small_config(0.9999));
  const TokenBatch tb = random_tokens(8, 6, 12, 3);
  Graph<double> g = Graph<double>::inference();
  const auto f = adapt_forward(g, m, tb, RoutingMode::label);
  std::size_t last = 0, total = 0;
  for (const auto& layer : f.labels.by_layer) {
    for (int l : layer) last += l == 3;
    total += layer.size();
  }
  INFO(last << " of " << total);
  CHECK(double(last) / double(total) > 0.95);
  Graph<double> gd = Graph<double>::inference();
  const double dense = lm_loss(gd, forward_dense(gd, m.base, tb), tb).value()[0];
  Graph<double> ga = Graph<double>::inference();
  const double adapted = lm_loss(ga, f.logits, tb).value()[0];
  CHECK(adapted == doctest::Approx(dense).epsilon(0.01));
  // Label routing follows the labels.
  CHECK(f.choices == f.labels.by_layer);
}

TEST_CASE("one expert: labels are zero and the router loss vanishes") {
  AdaptConfig c = small_config();
  c.num_experts = 1;
  const auto m = tiny_adapted<double>(c);
  Graph<double> g;
  const auto f = adapt_forward(g, m, random_tokens(2, 5, 12, 4), RoutingMode::label);
  CHECK(f.router_loss.value()[0] == 0.0);
  for (const auto& layer : f.labels.by_layer) {
    for (int l : layer) CHECK(l == 0);
  }
}

TEST_CASE("adapt_forward contracts") {
  auto m = tiny_adapted<double>(small_config());
  const TokenBatch tb = random_tokens(1, 4, 12, 5);
  Graph<double> g;
  CHECK_THROWS_AS(adapt_forward(g, m, tb, RoutingMode::forced, 4), IndexError);
  m.routers.pop_back();
  CHECK_THROWS_AS(adapt_forward(g, m, tb, RoutingMode::label), ConfigError);
}

// The router reads a detached copy of the hidden state, so finite differences
// of the whole objective would also see the path from that copy into the
// router loss (or, in ablation, into the scale factor). Router weights are
// probed on the full objective where nothing they move is detached; everything else
// is probed against an objective without the router-dependent terms.
TEST_CASE("gradients: full combined objective") {
  for (const bool ablation : {false, true}) {
    AdaptConfig c = small_config(0.6);
    if (ablation) {
      c.ablation_mode = true;
      c.lambda_router = 0.0;
      c.lambda_llm = 1.0;
    }
    const auto m = tiny_adapted<double>(c, 12, 20.0);
    for (const auto& r : m.routers) {
      Var<double> w2 = r.w2;
      for (double& v : w2.mutable_value().values()) v *= 50.0;
    }
    const TokenBatch tb = random_tokens(2, 5, 12, 6);
    const RoutingMode mode = ablation ? RoutingMode::prediction_scaled : RoutingMode::label;
    const auto full = [&](Graph<double>& g) {
      const auto f = adapt_forward(g, m, tb, mode);
      return combined_loss(g, lm_loss(g, f.logits, tb), f.router_loss, c);
    };
    // Same routing decisions, no router term and no router scale factor.
    const RoutingMode plain = ablation ? RoutingMode::prediction : RoutingMode::label;
    const auto without_router = [&](Graph<double>& g) {
      const auto f = adapt_forward(g, m, tb, plain);
      return scale(g, lm_loss(g, f.logits, tb), c.lambda_llm);
    };
    ParamList router_params, other_params;
    for (const auto& np : m.named_parameters()) {
      (np.first.find(".router.") != std::string::npos ? router_params : other_params).push_back(np);
    }
    REQUIRE(router_params.size() == 2 * m.routers.size());
    // In ablation an early router's scale factor moves later layers' detached
    // router inputs, so only the last layer's router is clean to probe.
    if (ablation) router_params.erase(router_params.begin(), router_params.end() - 2);

    const auto r = check_gradients(full, router_params, 1e-5, 12);
    INFO("ablation " << ablation << " routers: " << r.worst);
    CHECK(r.max_rel_err < 1e-4);
    const auto o = check_gradients(ablation ? LossFn(without_router) : LossFn(full), without_router,
                                   other_params, 1e-5, 12);
    INFO("ablation " << ablation << " others: " << o.worst);
    CHECK(o.max_rel_err < 1e-4);
  }
}

TEST_CASE("router gradients come only from the router loss") {
  AdaptConfig c = small_config(0.7);
  const auto m = tiny_adapted<double>(c, 12, 20.0);
  const TokenBatch tb = random_tokens(3, 6, 12, 7);
  const auto grads_with = [&](double lambda_llm, double lambda_router) {
    AdaptConfig w = c;
    w.lambda_llm = lambda_llm;
    w.lambda_router = lambda_router;
    for (auto [n, p] : m.named_parameters()) p.zero_grad();
    Graph<double> g;
    const auto f = adapt_forward(g, m, tb, RoutingMode::label);
    g.backward(combined_loss(g, lm_loss(g, f.logits, tb), f.router_loss, w));
  };
  grads_with(0.2, 0.0);
  bool mlp_moved = false;
  for (const auto& r : m.routers) {
    for (double v : r.w1.grad().values()) CHECK(v == 0.0);
    for (double v : r.w2.grad().values()) CHECK(v == 0.0);
  }
  for (const auto& b : m.base.blocks) {
    for (double v : b.w_out.grad().values()) mlp_moved |= v != 0.0;
  }
  CHECK(mlp_moved);
  grads_with(0.0, 1.0);
  bool router_moved = false;
  for (const auto& b : m.base.blocks) {
    for (double v : b.w_in.grad().values()) CHECK(v == 0.0);
    for (double v : b.w_out.grad().values()) CHECK(v == 0.0);
  }
  for (const auto& r : m.routers) {
    for (double v : r.w2.grad().values()) router_moved |= v != 0.0;
  }
  CHECK(router_moved);
}

TEST_CASE("adapt: zero steps, frozen attention, logging") {
  const Corpus corpus = small_corpus();
  const ModelConfig mc = corpus_model(corpus);
  const DenseLm<float> dense = init_dense_lm<float>(mc, corpus.vocab);
  AdaptConfig c = small_config();
  c.steps = 0;
  const auto zero = adapt(dense, corpus, c);
  const DenseLm<float> reordered = reorder_for_adaptation(dense, corpus.train, c);
  const auto init = init_adapted(reordered.clone(), c);
  const auto a = zero.model.named_parameters();
  const auto b = init.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(bit_equal(a[i].second.value(), b[i].second.value()));
  }

  c.steps = 40;
  c.lr = 3e-3;
  std::ostringstream log;
  const auto trained = adapt(dense, corpus, c, &log);
  CHECK(trained.log.size() == 40);
  CHECK(log.str().rfind("step,llm_loss,router_loss,router_acc\n0,", 0) == 0);
  std::uint64_t counted = 0;
  for (auto n : trained.label_counts) counted += n;
  CHECK(counted == 40ULL * c.batch * mc.max_seq_len * mc.num_layers);
  for (std::size_t l = 0; l < mc.num_layers; ++l) {
    const auto& before = reordered.blocks[l];
    const auto& after = trained.model.base.blocks[l];
    CHECK(bit_equal(before.wq.value(), after.wq.value()));
    CHECK(bit_equal(before.wk.value(), after.wk.value()));
    CHECK(bit_equal(before.wv.value(), after.wv.value()));
    CHECK(bit_equal(before.wo.value(), after.wo.value()));
    CHECK(bit_equal(before.attn_norm.value(), after.attn_norm.value()));
    CHECK_FALSE(bit_equal(before.w_in.value(), after.w_in.value()));
  }
  CHECK(bit_equal(reordered.token_embedding.value(), trained.model.base.token_embedding.value()));
  CHECK(bit_equal(reordered.head.value(), trained.model.base.head.value()));

  c.freeze_attention = false;
  const auto thawed = adapt(dense, corpus, c);
  CHECK_FALSE(bit_equal(reordered.blocks[0].wq.value(), thawed.model.base.blocks[0].wq.value()));

  c.auto_reorder = false;
  CHECK_THROWS_AS(adapt(dense, corpus, c), ConfigError);
  CHECK_NOTHROW(adapt(reordered, corpus, c));
}

TEST_CASE("theta family") {
  const Corpus corpus = small_corpus();
  const DenseLm<float> dense = init_dense_lm<float>(corpus_model(corpus), corpus.vocab);
  AdaptConfig c = small_config();
  c.steps = 5;
  const std::vector<double> thetas = {0.7, 0.8, 0.9};
  const auto fam = build_family(dense, corpus, std::span<const double>(thetas), c);
  REQUIRE(fam.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(fam[i].model.theta() == thetas[i]);
  // Shared reorder: untrained tensors agree across members.
  CHECK(bit_equal(fam[0].model.base.blocks[1].wq.value(), fam[2].model.base.blocks[1].wq.value()));
  const std::vector<double> one = {0.8};
  CHECK(build_family(dense, corpus, std::span<const double>(one), c).size() == 1);
  const std::vector<double> dup = {0.8, 0.8};
  const auto pair = build_family(dense, corpus, std::span<const double>(dup), c);
  const auto pa = pair[0].model.named_parameters();
  const auto pb = pair[1].model.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(pa[i].second.value(), pb[i].second.value()));
  CHECK_THROWS_AS(build_family(dense, corpus, std::span<const double>{}, c), ConfigError);
  const std::vector<double> bad = {0.5, 1.5};
  CHECK_THROWS_AS(build_family(dense, corpus, std::span<const double>(bad), c), ConfigError);
}
