// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "tdmoe/pretrain.hpp"

using namespace tdmoe;
using namespace tdmoe::testing;

TEST_CASE("byte vocabulary from text") {
  const Corpus c = split_corpus("abab", SplitOptions{0.0, 1024});
  CHECK(c.vocab.size() == 3);
  CHECK(c.train == std::vector<int>{0, 1, 0, 1});
  CHECK(c.heldout.empty());
  CHECK(c.vocab.unknown_id() == 2);
  CHECK(c.vocab.id('z') == 2);
  const std::vector<int> ids = {1, 0, 2};
  CHECK(c.vocab.decode(ids) == "ba?");

  CHECK(Vocabulary::from_text("zzzz").size() == 2);
  CHECK_THROWS_AS(Vocabulary::from_symbols({'b', 'a'}), LoadError);
}

TEST_CASE("held-out split is by blocks and deterministic") {
  std::string text;
  for (int i = 0; i < 4000; ++i) text.push_back(static_cast<char>('a' + i % 7));
  const SplitOptions opt{0.25, 100};
  const Corpus a = split_corpus(text, opt);
  const Corpus b = split_corpus(text, opt);
  CHECK(a.train == b.train);
  CHECK(a.heldout == b.heldout);
  CHECK(a.heldout.size() == 1000);  // 10 of 40 blocks
  CHECK(a.train.size() + a.heldout.size() == text.size());
  // Block 3 (the first with floor(4 * .25) > floor(3 * .25)) is held out.
  CHECK(std::equal(a.heldout.begin(), a.heldout.begin() + 100, a.vocab.encode(text.substr(300, 100)).begin()));
  CHECK_THROWS_AS(split_corpus(text, SplitOptions{1.0, 100}), ConfigError);
  // Encoding with a fixed vocabulary maps unseen bytes to unk.
  const Corpus fixed = split_corpus("abq", Vocabulary::from_text("ab"), SplitOptions{0.0, 10});
  CHECK(fixed.train == std::vector<int>{0, 1, 2});
}

TEST_CASE("corpus files") {
  const auto dir = std::filesystem::temp_directory_path() / "tdmoe_corpus_test";
  std::filesystem::create_directories(dir);
  { std::ofstream(dir / "empty.txt"); }
  CHECK_THROWS_AS(ingest_corpus(dir / "empty.txt"), LoadError);
  CHECK_THROWS_AS(ingest_corpus(dir / "missing.txt"), LoadError);
  { std::ofstream(dir / "one.txt") << "hello world"; }
  CHECK(ingest_corpus(dir / "one.txt").vocab.size() == 9);
  std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic corpus is deterministic text") {
  const std::string a = synthesize_text(3, 5000);
  CHECK(a.size() >= 5000);
  CHECK(a == synthesize_text(3, 5000));
  CHECK(a != synthesize_text(4, 5000));
  CHECK(a.find(' ') != std::string::npos);
}

TEST_CASE("batches") {
  std::vector<int> stream(100);
  for (int i = 0; i < 100; ++i) stream[i] = i;
  Rng rng(1);
  const TokenBatch tb = sample_batch(stream, 3, 10, rng);
  CHECK(tb.ids.size() == 30);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t t = 1; t < 10; ++t) CHECK(tb.at(b, t) == tb.at(b, t - 1) + 1);
  }
  CHECK_THROWS_AS(sample_batch(std::span(stream).first(5), 1, 10, rng), ConfigError);
  const auto ev = eval_batches(stream, 4, 10);
  REQUIRE(ev.size() == 3);
  CHECK(ev[2].batch == 2);
  CHECK(ev[0].at(1, 0) == 10);
  CHECK(eval_batches(stream, 4, 10, 25).size() == 1);
}

TEST_CASE("model config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate(4));
  CHECK_THROWS_AS(c.validate(17), ConfigError);
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(init_dense_lm<float>(tiny_config(12), test_vocab(3)), ConfigError);
}

TEST_CASE("dense forward shapes, parameter count and clones") {
  const ModelConfig c = tiny_config();
  const DenseLm<double> m = init_dense_lm<double>(c, test_vocab(11));
  const TokenBatch tb = random_tokens(2, 5, 12, 1);
  const Tensor<double> logits = forward_dense(m, tb);
  CHECK(logits.shape() == Shape{2, 5, 12});
  std::uint64_t total = 0;
  for (const auto& [name, p] : m.named_parameters()) total += p.value().size();
  CHECK(total == dense_param_count(c));
  // Desk configuration: V=61, D=128, H=512, L=4, T=64.
  ModelConfig desk;
  desk.vocab_size = 61;
  CHECK(dense_param_count(desk) == 61 * 128 * 2 + 64 * 128 + 4 * (256 + 4 * 128 * 128 + 2 * 128 * 512) + 128);

  DenseLm<double> copy = m.clone();
  copy.head.mutable_value()[0] += 1.0;
  CHECK(copy.head.value()[0] != m.head.value()[0]);
  CHECK(bit_equal(forward_dense(m.clone(), tb), logits));

  const TokenBatch too_long = random_tokens(1, 7, 12, 2);
  CHECK_THROWS_AS(forward_dense(m, too_long), ShapeError);
  const TokenBatch bad_id{1, 2, {0, 12}};
  CHECK_THROWS_AS(forward_dense(m, bad_id), IndexError);
}

TEST_CASE("causal decoder: later tokens never change earlier logits") {
  const DenseLm<double> m = init_dense_lm<double>(tiny_config(), test_vocab(11));
  TokenBatch tb = random_tokens(1, 6, 12, 3);
  const auto a = forward_dense(m, tb);
  tb.ids[5] = (tb.ids[5] + 1) % 12;
  const auto b = forward_dense(m, tb);
  for (std::size_t i = 0; i < 5 * 12; ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("gradients: full dense language-model loss") {
  ModelConfig c = tiny_config();
  c.num_layers = 1;
  c.embed_dim = 4;
  c.hidden_dim = 6;
  c.max_seq_len = 4;
  const DenseLm<double> m = init_dense_lm<double>(c, test_vocab(11));
  for (auto& [name, p] : m.named_parameters()) {
    Var<double> v = p;
    if (name.find("norm") == std::string::npos) {
      for (double& x : v.mutable_value().values()) x *= 20.0;  // away from the tiny-init regime
    }
  }
  const TokenBatch tb = random_tokens(2, 4, 12, 4);
  const auto r = check_gradients([&](Graph<double>& g) { return lm_loss(g, forward_dense(g, m, tb), tb); },
                                 m.named_parameters());
  INFO(r.worst);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("untrained loss is near log V and training lowers it") {
  Corpus corpus = split_corpus(synthesize_text(1, 40000));
  ModelConfig c = tiny_config(corpus.vocab.size());
  c.embed_dim = 16;
  c.hidden_dim = 32;
  c.max_seq_len = 16;
  PretrainOptions opt;
  opt.steps = 0;
  opt.batch = 4;
  opt.eval_max_tokens = 2048;
  const double untrained = pretrain<float>(corpus, c, opt, nullptr).heldout_loss;
  CHECK(untrained == doctest::Approx(std::log(double(corpus.vocab.size()))).epsilon(0.05));
  opt.steps = 150;
  opt.lr = 3e-3;
  std::ostringstream csv;
  const auto r = pretrain<float>(corpus, c, opt, &csv);
  CHECK(r.losses.size() == 150);
  CHECK(r.heldout_loss < untrained - 0.5);
  CHECK(csv.str().rfind("step,loss\n0,", 0) == 0);
  // Same seed, same result.
  CHECK(bit_equal(pretrain<float>(corpus, c, opt, nullptr).model.head.value(), r.model.head.value()));
  // The dense evaluation path reproduces the reported held-out loss.
  const auto batches = eval_batches(corpus.heldout, opt.eval_batch, c.max_seq_len, opt.eval_max_tokens);
  CHECK(evaluate_loss(r.model, std::span<const TokenBatch>(batches)) == r.heldout_loss);
}
