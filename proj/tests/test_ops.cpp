// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "tdmoe/optim.hpp"

using namespace tdmoe;
using testing::check_gradients;
using testing::randn;

namespace {

using V = Var<double>;
using G = Graph<double>;

V param(Tensor<double> t) { return V::parameter(std::move(t)); }

// Weighted sum so every output element carries a distinct upstream gradient.
V probe(G& g, const V& y) {
  const auto w = randn(y.shape(), 999 + y.value().size());
  return sum(g, mul(g, y, V::constant(w)));
}

void require_grads(const std::function<V(G&)>& f,
                   const std::vector<std::pair<std::string, V>>& params) {
  const auto r = check_gradients(f, params);
  INFO(r.worst);
  CHECK(r.max_rel_err < 1e-4);
}

}  // namespace

TEST_CASE("activation values") {
  CHECK(activate(1.0, Activation::silu) == doctest::Approx(0.7310585786300049).epsilon(1e-15));
  CHECK(activate(0.0, Activation::silu) == 0.0);
  CHECK(activate(-2.0, Activation::relu) == 0.0);
  CHECK(activate(3.0, Activation::relu) == 3.0);
  CHECK(sigmoid(-1000.0) == 0.0);
  CHECK(sigmoid(1000.0) == 1.0);
  CHECK(parse_activation("relu") == Activation::relu);
  CHECK_THROWS_AS(parse_activation("gelu"), ConfigError);
  CHECK(activation_name(Activation::silu) == "silu");
}

TEST_CASE("cross entropy hand values") {
  G g = G::inference();
  const int label0[] = {0};
  const auto ce = cross_entropy(g, V::constant(Tensor<double>::matrix(1, 2, {1, 2})), label0);
  // -log(e^1 / (e^1 + e^2)) = log(1 + e)
  CHECK(ce.value()[0] == doctest::Approx(std::log1p(std::exp(1.0))).epsilon(1e-14));
  CHECK(ce.value()[0] == doctest::Approx(1.3132616875182228).epsilon(1e-14));
  const int labels[] = {2, 1};
  const auto uniform = cross_entropy(g, V::constant(Tensor<double>({2, 4}, 0.3)), labels);
  CHECK(uniform.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  const int bad[] = {4};
  CHECK_THROWS_AS(cross_entropy(g, V::constant(Tensor<double>({1, 4}, 0.0)), bad),
                  IndexError);
  CHECK_THROWS_AS(cross_entropy(g, V::constant(Tensor<double>({0, 4})), std::span<const int>{}),
                  ContractError);
  // Large logits stay finite.
  const int first[] = {0};
  const auto big = cross_entropy(g, V::constant(Tensor<double>::matrix(1, 2, {1000, 0})), first);
  CHECK(big.value()[0] == doctest::Approx(0.0));
}

TEST_CASE("gradients: elementwise and reductions") {
  const V a = param(randn({3, 4}, 1));
  const V b = param(randn({3, 4}, 2));
  require_grads([&](G& g) { return probe(g, add(g, a, b)); }, {{"a", a}, {"b", b}});
  require_grads([&](G& g) { return probe(g, mul(g, a, b)); }, {{"a", a}, {"b", b}});
  require_grads([&](G& g) { return probe(g, scale(g, a, -1.7)); }, {{"a", a}});
  require_grads([&](G& g) { return sum(g, a); }, {{"a", a}});
  require_grads([&](G& g) { return probe(g, activation(g, a, Activation::silu)); }, {{"a", a}});
  // ReLU away from its kink.
  Tensor<double> off = randn({3, 4}, 3);
  for (double& v : off.values()) v += v >= 0 ? 0.1 : -0.1;
  const V r = param(off);
  require_grads([&](G& g) { return probe(g, activation(g, r, Activation::relu)); }, {{"r", r}});
}

TEST_CASE("gradients: products") {
  const V a = param(randn({3, 5}, 4));
  const V b = param(randn({5, 2}, 5));
  const V w = param(randn({6, 5}, 6));
  require_grads([&](G& g) { return probe(g, matmul(g, a, b)); }, {{"a", a}, {"b", b}});
  require_grads([&](G& g) { return probe(g, linear(g, a, w)); }, {{"a", a}, {"w", w}});
}

TEST_CASE("gradients: rms norm, embedding and row selection") {
  const V x = param(randn({4, 6}, 7));
  Tensor<double> gain_init = randn({6}, 8, 0.3);
  for (double& v : gain_init.values()) v += 1.0;
  const V gain = param(gain_init);
  require_grads([&](G& g) { return probe(g, rms_norm(g, x, gain)); }, {{"x", x}, {"gain", gain}});

  const V table = param(randn({5, 3}, 9));
  const int ids[] = {4, 0, 4, 2};
  require_grads([&](G& g) { return probe(g, embedding(g, table, ids)); }, {{"table", table}});
  G g = G::inference();
  const int bad[] = {5};
  CHECK_THROWS_AS(embedding(g, table, bad), IndexError);

  const std::size_t rows[] = {3, 1, 3};
  require_grads([&](G& g) { return probe(g, select_rows(g, x, rows)); }, {{"x", x}});
}

TEST_CASE("gradients: causal attention") {
  const std::size_t batch = 2, seq = 4, heads = 2, width = 6;
  const V q = param(randn({batch * seq, width}, 10));
  const V k = param(randn({batch * seq, width}, 11));
  const V v = param(randn({batch * seq, width}, 12));
  require_grads([&](G& g) { return probe(g, causal_attention(g, q, k, v, batch, seq, heads)); },
                {{"q", q}, {"k", k}, {"v", v}});
}

TEST_CASE("causal attention ignores the future") {
  const std::size_t batch = 1, seq = 5, heads = 1, width = 4;
  auto q = randn({seq, width}, 13), k = randn({seq, width}, 14), v = randn({seq, width}, 15);
  G g = G::inference();
  const auto before = causal_attention(g, V::constant(q), V::constant(k), V::constant(v), batch, seq, heads).value();
  for (std::size_t c = 0; c < width; ++c) {
    k(seq - 1, c) += 3.0;
    v(seq - 1, c) -= 2.0;
  }
  const auto after = causal_attention(g, V::constant(q), V::constant(k), V::constant(v), batch, seq, heads).value();
  for (std::size_t i = 0; i < (seq - 1) * width; ++i) CHECK(before[i] == after[i]);
  // The first position attends only to itself.
  for (std::size_t c = 0; c < width; ++c) CHECK(before(0, c) == doctest::Approx(v(0, c)));
}

TEST_CASE("gradients: cross entropy, softmax pick and row scaling") {
  const V logits = param(randn({4, 3}, 16));
  const int targets[] = {2, 0, 1, 2};
  require_grads([&](G& g) { return cross_entropy(g, logits, targets); }, {{"logits", logits}});
  require_grads([&](G& g) { return probe(g, softmax_pick(g, logits, targets)); }, {{"logits", logits}});
  const V x = param(randn({4, 5}, 17));
  const V f = param(randn({4, 1}, 18));
  require_grads([&](G& g) { return probe(g, scale_rows(g, x, f)); }, {{"x", x}, {"f", f}});
}

TEST_CASE("softmax pick values") {
  G g = G::inference();
  const int cols[] = {1, 0};
  const auto p = softmax_pick(g, V::constant(Tensor<double>::matrix(2, 2, {0, 0, 0, std::log(3.0)})), cols);
  CHECK(p.value()[0] == doctest::Approx(0.5));
  CHECK(p.value()[1] == doctest::Approx(0.25));
}

TEST_CASE("backward contracts") {
  const V a = param(randn({2, 2}, 19));
  G g;
  const auto y = add(g, a, a);
  CHECK_THROWS_AS(g.backward(y), ContractError);  // not a scalar
  CHECK_THROWS_AS(g.backward(V::constant(Tensor<double>({1}, 1.0))), ContractError);
  G inf = G::inference();
  const auto z = sum(inf, a);
  CHECK(inf.size() == 0);
  CHECK_FALSE(z.requires_grad());
  CHECK_THROWS_AS(add(g, a, V::constant(Tensor<double>({3}))), ShapeError);
}

TEST_CASE("gradients accumulate until cleared, detach cuts the graph") {
  V a = param(Tensor<double>::vector({1.0, 2.0}));
  for (int i = 0; i < 2; ++i) {
    G g;
    g.backward(sum(g, scale(g, a, 3.0)));
  }
  CHECK(a.grad()[0] == 6.0);
  a.zero_grad();
  CHECK_FALSE(a.has_grad());
  G g;
  const V d = detach(scale(g, a, 2.0));
  CHECK_FALSE(d.requires_grad());
  CHECK(d.value()[1] == 4.0);
}

TEST_CASE("AdamW matches a hand-written reference update") {
  const double lr = 0.1, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  V w = param(Tensor<double>::vector({1.0, -2.0, 0.5}));
  AdamW<double> opt({w}, {lr, wd, b1, b2, eps});
  std::vector<double> ref = {1.0, -2.0, 0.5}, m(3, 0.0), v(3, 0.0);
  const std::vector<std::vector<double>> grads = {{0.5, -1.0, 0.0}, {0.25, 2.0, -3.0}, {-1.0, 0.1, 0.2}};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    accumulate_grad(w, Tensor<double>({3}, grads[t - 1]));
    opt.step();
    opt.zero_grad();
    for (std::size_t j = 0; j < 3; ++j) {
      const double gj = grads[t - 1][j];
      ref[j] -= lr * wd * ref[j];
      m[j] = b1 * m[j] + (1 - b1) * gj;
      v[j] = b2 * v[j] + (1 - b2) * gj * gj;
      const double mh = m[j] / (1 - std::pow(b1, double(t)));
      const double vh = v[j] / (1 - std::pow(b2, double(t)));
      ref[j] -= lr * mh / (std::sqrt(vh) + eps);
      CHECK(w.value()[j] == doctest::Approx(ref[j]).epsilon(1e-12));
    }
  }
  // First step on a unit gradient moves by almost exactly lr.
  V u = param(Tensor<double>::vector({0.0}));
  AdamW<double> plain({u}, {0.01});
  accumulate_grad(u, Tensor<double>::vector({1.0}));
  plain.step();
  CHECK(u.value()[0] == doctest::Approx(-0.01).epsilon(1e-6));
  V missing = param(Tensor<double>::vector({0.0}));
  AdamW<double> strict({missing}, {});
  CHECK_THROWS_AS(strict.step(), ContractError);
}
