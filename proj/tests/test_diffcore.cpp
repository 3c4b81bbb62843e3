#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "softmodnet/diffcore.hpp"

using namespace softmodnet;

namespace {
Tensor<double> dvar(Graph<double>& g, Shape s, std::vector<double> v) {
  return g.variable(std::move(s), std::move(v));
}
}  // namespace

TEST_CASE("elementwise min/max/add/mul basics") {
  Graph<double> g;
  auto a = dvar(g, {2}, {1, 5});
  auto b = dvar(g, {2}, {3, 2});
  CHECK(emin(a, b).value() == std::vector<double>{1, 2});
  CHECK(emax(a, b).value() == std::vector<double>{3, 5});
  CHECK(add(a, b).value() == std::vector<double>{4, 7});
  CHECK(mul(a, b).value() == std::vector<double>{3, 10});

  auto ones = g.constant({2}, {1, 1});
  CHECK(mul(a, ones).value() == a.value());
}

TEST_CASE("max tie routes gradient to first argument") {
  Graph<double> g;
  auto a = dvar(g, {2}, {2, 2});
  auto b = dvar(g, {2}, {2, 7});
  auto m = emax(a, b);
  CHECK(m.value() == std::vector<double>{2, 7});
  g.backward(sum_all(m));
  CHECK(g.grad(a.id) == std::vector<double>{1, 0});
  CHECK(g.grad(b.id) == std::vector<double>{0, 1});
}

TEST_CASE("broadcasting patterns") {
  Graph<double> g;
  // [2,2,3] * [2,2,1]
  auto x = dvar(g, {2, 2, 3}, std::vector<double>(12, 2.0));
  auto m = dvar(g, {2, 2, 1}, {1, 2, 3, 4});
  auto out = mul(x, m);
  REQUIRE(out.shape() == Shape{2, 2, 3});
  CHECK(out.value()[0] == 2.0);
  CHECK(out.value()[3] == 4.0);
  CHECK(out.value()[11] == 8.0);

  // [3] + [2,2,3]
  auto v = dvar(g, {3}, {10, 20, 30});
  auto out2 = add(x, v);
  CHECK(out2.value()[0] == 12.0);
  CHECK(out2.value()[5] == 32.0);

  // scalar [1]
  auto s = g.scalar(5.0);
  CHECK(mul(x, s).value()[7] == 10.0);

  CHECK_THROWS_AS(add(dvar(g, {2}, {1, 2}), dvar(g, {3}, {1, 2, 3})),
                  ShapeError);
}

TEST_CASE("broadcast gradients reduce over stretched dims") {
  auto res = gradcheck::check_random(
      {{2, 2, 3}, {2, 2, 1}},
      [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return mul(in[0], in[1]);
      },
      11);
  CHECK(res.ok());
  auto res2 = gradcheck::check_random(
      {{3}, {2, 2, 3}},
      [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return add(in[0], in[1]);
      },
      12);
  CHECK(res2.ok());
}

TEST_CASE("linear basics and gradient") {
  Graph<double> g;
  auto W = dvar(g, {2, 2}, {1, 0, 0, 1});
  auto x = dvar(g, {2}, {3, 4});
  auto b = dvar(g, {2}, {0, 0});
  CHECK(linear(W, x, b).value() == std::vector<double>{3, 4});

  auto Wz = g.zeros({2, 2});
  auto b1 = dvar(g, {2}, {1, 1});
  CHECK(linear(Wz, x, b1).value() == std::vector<double>{1, 1});

  auto res = gradcheck::check_random(
      {{4, 3}, {3}, {4}},
      [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
        return linear(in[0], in[1], in[2]);
      },
      13);
  CHECK(res.ok());
}

TEST_CASE("softmax properties") {
  Graph<double> g;
  auto z = dvar(g, {3}, {0, 0, 0});
  auto s = softmax(z, 0);
  for (double v : s.value()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  auto big = dvar(g, {2}, {1000, 0});
  auto sb = softmax(big, 0).value();
  CHECK(sb[0] == doctest::Approx(1.0));
  CHECK(sb[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(sb[0]));

  // simplex invariant on random inputs
  Rng rng(99);
  for (int it = 0; it < 50; ++it) {
    Graph<double> g2;
    std::vector<double> v(6);
    for (auto& x : v) x = rng.uniform(-8, 8);
    auto out = softmax(g2.variable({6}, v), 0).value();
    double sum = 0;
    for (double x : out) {
      CHECK(x >= 0.0);
      sum += x;
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }

  auto res = gradcheck::check_random(
      {{6}},
      [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
        return softmax(in[0], 0);
      },
      14);
  CHECK(res.ok());

  // softmax over a middle axis
  auto res2 = gradcheck::check_random(
      {{2, 3, 2}},
      [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
        return softmax(in[0], 1);
      },
      15);
  CHECK(res2.ok());
}

TEST_CASE("conv1x1") {
  Graph<double> g;
  // identity kernel keeps input
  auto x = dvar(g, {2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto K = dvar(g, {2, 2}, {1, 0, 0, 1});
  CHECK(conv1x1(x, K).value() == x.value());

  // zero kernel + bias -> constant map
  auto K0 = g.zeros({2, 3});
  auto b = dvar(g, {3}, {0.5, 0.25, -1});
  auto out = conv1x1(x, K0, b).value();
  CHECK(out[0] == 0.5);
  CHECK(out[4] == 0.25);
  CHECK(out[11] == -1.0);

  auto res = gradcheck::check_random(
      {{3, 3, 2}, {2, 1}, {1}},
      [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
        return conv1x1(in[0], in[1], in[2]);
      },
      16);
  CHECK(res.ok());
}

TEST_CASE("shift1d semantics") {
  Graph<double> g;
  auto p2 = dvar(g, {5}, {0, 0, 1, 0, 0});
  CHECK(shift1d(p2, ShiftDir::decrement).value() ==
        std::vector<double>{0, 1, 0, 0, 0});

  auto p0 = dvar(g, {5}, {1, 0, 0, 0, 0});
  CHECK(shift1d(p0, ShiftDir::decrement).value() ==
        std::vector<double>{0, 0, 0, 0, 0});

  auto up = shift1d(p2, ShiftDir::increment);
  CHECK(shift1d(up, ShiftDir::decrement).value() == p2.value());

  // linearity: shift(a*p + b*q) == a*shift(p) + b*shift(q), exactly
  Rng rng(5);
  std::vector<double> pv(5), qv(5);
  for (auto& v : pv) v = rng.uniform(0, 1);
  for (auto& v : qv) v = rng.uniform(0, 1);
  const double ca = 0.37, cb = 1.25;
  Graph<double> g2;
  auto p = g2.variable({5}, pv);
  auto q = g2.variable({5}, qv);
  auto lhs =
      shift1d(add(affine(p, ca, 0.0), affine(q, cb, 0.0)), ShiftDir::increment);
  auto rhs = add(affine(shift1d(p, ShiftDir::increment), ca, 0.0),
                 affine(shift1d(q, ShiftDir::increment), cb, 0.0));
  CHECK(lhs.value() == rhs.value());

  auto res = gradcheck::check_random(
      {{5}},
      [](Graph<double>& g3, const std::vector<Tensor<double>>& in) {
        return shift1d(in[0], ShiftDir::decrement);
      },
      17);
  CHECK(res.ok());
}

TEST_CASE("lstm_step") {
  const int d = 3;
  Graph<double> g;
  LstmParams<double> p{g.zeros({4 * d, d}), g.zeros({4 * d, d}),
                       g.zeros({4 * d})};
  auto x = dvar(g, {d}, {0.3, -0.2, 0.9});
  auto h0 = g.zeros({d});
  auto c0 = g.zeros({d});
  auto [h1, c1] = lstm_step(x, h0, c0, p);
  for (double v : h1.value()) CHECK(v == 0.0);

  // saturated forget gate carries the cell state
  std::vector<double> bias(4 * d, 0.0);
  for (int i = d; i < 2 * d; ++i) bias[i] = 25.0;  // forget block
  Graph<double> g2;
  LstmParams<double> p2{g2.zeros({4 * d, d}), g2.zeros({4 * d, d}),
                        g2.variable({4 * d}, bias)};
  auto c_prev = g2.variable({d}, {0.7, -0.4, 0.1});
  auto [h2, c2] =
      lstm_step(g2.zeros({d}), g2.zeros({d}), c_prev, p2);
  for (int i = 0; i < d; ++i)
    CHECK(c2.value()[i] == doctest::Approx(c_prev.value()[i]).epsilon(1e-9));

  auto res = gradcheck::check_random(
      {{16, 4}, {16, 4}, {16}, {4}, {4}, {4}},
      [](Graph<double>& g3, const std::vector<Tensor<double>>& in) {
        LstmParams<double> pp{in[0], in[1], in[2]};
        auto [h, c] = lstm_step(in[3], in[4], in[5], pp);
        return concat<double>({h, c});
      },
      18);
  CHECK(res.ok());
}

TEST_CASE("backward basics and contracts") {
  Graph<double> g;
  auto x = dvar(g, {3}, {0.5, -1.0, 2.0});
  auto loss = sum_all(x);
  g.backward(loss);
  CHECK(g.grad(x.id) == std::vector<double>{1, 1, 1});
  CHECK_THROWS_AS(g.backward(loss), ContractError);

  Graph<double> g2;
  auto x2 = dvar(g2, {3}, {0.5, -1.0, 2.0});
  auto l2 = affine(sum_all(mul(x2, x2)), 0.5, 0.0);
  g2.backward(l2);
  CHECK(g2.grad(x2.id) == x2.value());

  Graph<double> g3;
  auto x3 = dvar(g3, {2}, {1, 2});
  CHECK_THROWS_AS(g3.backward(x3), ContractError);

  // gradient accumulates across consumers: y = x*x + x -> dy/dx = 2x+1
  Graph<double> g4;
  auto x4 = dvar(g4, {2}, {3.0, -2.0});
  g4.backward(sum_all(add(mul(x4, x4), x4)));
  CHECK(g4.grad(x4.id) == std::vector<double>{7.0, -3.0});
}

TEST_CASE("reductions, slicing, stacking") {
  Graph<double> g;
  auto x = dvar(g, {2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(sum_spatial(x).value() == std::vector<double>{16, 20});

  auto v = dvar(g, {4}, {1, 2, 3, 4});
  CHECK(slice(v, 1, 2).value() == std::vector<double>{2, 3});

  auto c = concat<double>({slice(v, 0, 2), slice(v, 2, 2)});
  CHECK(c.value() == v.value());

  auto r0 = dvar(g, {2}, {1, 2});
  auto r1 = dvar(g, {2}, {3, 4});
  auto M = stack_rows<double>({r0, r1});
  CHECK(M.shape() == Shape{2, 2});
  auto w = dvar(g, {2}, {0.5, 2.0});
  CHECK(rowsum_weighted(M, w).value() == std::vector<double>{6.5, 9.0});

  for (uint64_t s = 0; s < 3; ++s) {
    auto res = gradcheck::check_random(
        {{3, 4}, {3}},
        [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
          return rowsum_weighted(in[0], in[1]);
        },
        20 + s);
    CHECK(res.ok());
  }
  auto res2 = gradcheck::check_random(
      {{2, 3, 2}},
      [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
        return sum_spatial(in[0]);
      },
      25);
  CHECK(res2.ok());
}

TEST_CASE("cross entropy and target prob") {
  Graph<double> g;
  auto z = dvar(g, {4}, {0.2, -1.0, 0.7, 0.1});
  auto ce = cross_entropy(z, 2);
  auto tp = target_prob(z, 2);
  CHECK(ce.value()[0] == doctest::Approx(-std::log(tp.value()[0])).epsilon(1e-12));

  auto res = gradcheck::check_random(
      {{5}},
      [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
        return cross_entropy(in[0], 1);
      },
      26);
  CHECK(res.ok());
  auto res2 = gradcheck::check_random(
      {{5}},
      [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
        return target_prob(in[0], 3);
      },
      27);
  CHECK(res2.ok());
  auto res3 = gradcheck::check_random(
      {{6}},
      [](Graph<double>& g2, const std::vector<Tensor<double>>& in) {
        return log_softmax(in[0], 0);
      },
      28);
  CHECK(res3.ok());
}

TEST_CASE("embedding gather/scatter") {
  Graph<double> g;
  auto E = dvar(g, {3, 2}, {1, 2, 3, 4, 5, 6});
  auto rows = embed(E, {2, 0, 2});
  CHECK(rows.value() == std::vector<double>{5, 6, 1, 2, 5, 6});
  g.backward(sum_all(rows));
  CHECK(g.grad(E.id) == std::vector<double>{1, 1, 0, 0, 2, 2});
  CHECK_THROWS_AS(embed(g.variable({3, 2}, {1, 2, 3, 4, 5, 6}), {3}),
                  ContractError);
}

TEST_CASE("node_mix选 operator semantics") {
  // one-hot choose_1 reproduces x1 bit-for-bit
  Graph<double> g;
  auto x1 = dvar(g, {2, 2}, {0.3, -0.7, 1.5, 0.0});
  auto x2 = dvar(g, {2, 2}, {1.0, 2.0, -3.0, 4.0});
  auto p_c1 = g.constant({6}, {0, 0, 0, 0, 1, 0});
  CHECK(node_mix(x1, x2, p_c1, {1, 1, 1, 1, 1, 1}).value() == x1.value());

  // uniform mixture with x1 = x2 = 1: (1 + 1 + 2 + 1 + 1 + 1)/6 = 7/6
  auto ones1 = g.constant({2}, {1, 1});
  auto ones2 = g.constant({2}, {1, 1});
  auto pu = g.constant({6}, std::vector<double>(6, 1.0 / 6));
  auto mixed = node_mix(ones1, ones2, pu, {1, 1, 1, 1, 1, 1});
  for (double v : mixed.value()) CHECK(v == doctest::Approx(7.0 / 6).epsilon(1e-12));

  // independent six-term oracle
  Rng rng(123);
  for (int it = 0; it < 20; ++it) {
    std::vector<double> a(6), b(6), logits(6);
    for (auto& v : a) v = rng.uniform(-2, 2);
    for (auto& v : b) v = rng.uniform(-2, 2);
    for (auto& v : logits) v = rng.uniform(-2, 2);
    Graph<double> g2;
    auto t1 = g2.variable({6}, a);
    auto t2 = g2.variable({6}, b);
    auto pr = softmax(g2.variable({6}, logits), 0);
    auto out = node_mix(t1, t2, pr, {1, 1, 1, 1, 1, 1}).value();
    const auto& ap = pr.value();
    for (int i = 0; i < 6; ++i) {
      double expect = ap[0] * std::min(a[i], b[i]) + ap[1] * std::max(a[i], b[i]) +
                      ap[2] * (a[i] + b[i]) + ap[3] * (a[i] * b[i]) +
                      ap[4] * a[i] + ap[5] * b[i];
      CHECK(out[i] == doctest::Approx(expect).epsilon(1e-6));
    }
  }

  // masked operators contribute zero while probs stay softmax over all six
  Graph<double> g3;
  auto m1 = dvar(g3, {2}, {0.5, -0.5});
  auto m2 = dvar(g3, {2}, {0.25, 0.75});
  auto pm = g3.constant({6}, std::vector<double>(6, 1.0 / 6));
  auto masked = node_mix(m1, m2, pm, {0, 1, 1, 1, 1, 1});
  auto full = node_mix(m1, m2, pm, {1, 1, 1, 1, 1, 1});
  for (int i = 0; i < 2; ++i) {
    double mn = std::min(m1.value()[i], m2.value()[i]);
    CHECK(masked.value()[i] ==
          doctest::Approx(full.value()[i] - mn / 6.0).epsilon(1e-12));
  }

  // swap symmetry when choose mass is zero
  Graph<double> g4;
  auto s1 = dvar(g4, {3}, {0.1, 0.9, -0.4});
  auto s2 = dvar(g4, {3}, {0.6, -0.2, 0.8});
  auto ps = g4.constant({6}, {0.25, 0.25, 0.25, 0.25, 0, 0});
  CHECK(node_mix(s1, s2, ps, {1, 1, 1, 1, 1, 1}).value() ==
        node_mix(s2, s1, ps, {1, 1, 1, 1, 1, 1}).value());
}

TEST_CASE("node_mix gradient with broadcasting and softmax probs") {
  for (uint64_t s = 0; s < 5; ++s) {
    auto res = gradcheck::check_random(
        {{2, 2, 3}, {3}, {6}},
        [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
          auto pr = softmax(in[2], 0);
          return node_mix(in[0], in[1], pr, {1, 1, 1, 1, 1, 1});
        },
        40 + s);
    CHECK(res.ok());
  }
}

TEST_CASE("unary ops gradients") {
  auto mk = [](auto fn) {
    return [fn](Graph<double>& g, const std::vector<Tensor<double>>& in) {
      return fn(in[0]);
    };
  };
  CHECK(gradcheck::check_random({{7}}, mk([](Tensor<double> x) {
                                  return sigmoid(x);
                                }),
                                50)
            .ok());
  CHECK(gradcheck::check_random({{7}}, mk([](Tensor<double> x) {
                                  return softmodnet::tanh(x);
                                }),
                                51)
            .ok());
  CHECK(gradcheck::check_random({{7}}, mk([](Tensor<double> x) {
                                  return affine(x, -2.5, 0.75);
                                }),
                                52)
            .ok());
  CHECK(gradcheck::check_random({{7}}, mk([](Tensor<double> x) {
                                  return softmodnet::exp(x);
                                }),
                                53)
            .ok());
  // log/sqrt need positive inputs
  Rng rng(54);
  auto vals = gradcheck::random_leaves({{7}}, rng, 0.2, 2.0);
  CHECK(gradcheck::check({{7}}, vals, mk([](Tensor<double> x) {
                           return softmodnet::log(x);
                         }),
                         54)
            .ok());
  CHECK(gradcheck::check({{7}}, vals, mk([](Tensor<double> x) {
                           return softmodnet::sqrt(x);
                         }),
                         55)
            .ok());
  // relu away from the kink
  auto rvals = gradcheck::random_leaves({{9}}, rng);
  for (auto& v : rvals[0])
    if (std::fabs(v) < 1e-3) v += 0.1;
  CHECK(gradcheck::check({{9}}, rvals, mk([](Tensor<double> x) {
                           return relu(x);
                         }),
                         56)
            .ok());
  // div quotient away from zero denominator
  auto dvals = gradcheck::random_leaves({{5}, {5}}, rng);
  for (auto& v : dvals[1]) v = v < 0 ? v - 0.5 : v + 0.5;
  CHECK(gradcheck::check({{5}, {5}}, dvals,
                         [](Graph<double>& g,
                            const std::vector<Tensor<double>>& in) {
                           return vdiv(in[0], in[1]);
                         },
                         57)
            .ok());
}

TEST_CASE("min/max gradients with separated pairs") {
  Rng rng(60);
  for (int it = 0; it < 5; ++it) {
    auto vals = gradcheck::random_leaves({{8}, {8}}, rng);
    gradcheck::separate_pairs(vals[0], vals[1]);
    CHECK(gradcheck::check({{8}, {8}}, vals,
                           [](Graph<double>& g,
                              const std::vector<Tensor<double>>& in) {
                             return emin(in[0], in[1]);
                           },
                           60 + it)
              .ok());
    CHECK(gradcheck::check({{8}, {8}}, vals,
                           [](Graph<double>& g,
                              const std::vector<Tensor<double>>& in) {
                             return emax(in[0], in[1]);
                           },
                           70 + it)
              .ok());
  }
}

TEST_CASE("composite graph matches finite differences") {
  // controller-like computation: softmax(MLP(W2 [W1 q + b1; c])) mixing
  // linear maps, concat, relu.
  auto build = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
    auto W1 = in[0], q = in[1], b1 = in[2], c = in[3], W2 = in[4], Wm = in[5];
    auto u = linear(W2, concat<double>({add(linear(W1, q), b1), c}));
    return softmax(linear(Wm, relu(u)), 0);
  };
  for (uint64_t s = 0; s < 3; ++s) {
    auto res = gradcheck::check_random(
        {{4, 4}, {4}, {4}, {4}, {4, 8}, {5, 4}}, build, 80 + s);
    CHECK(res.ok());
  }
}

TEST_CASE("tape replay determinism") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    std::vector<double> xv(12), kv(6);
    for (auto& v : xv) v = rng.uniform(-1, 1);
    for (auto& v : kv) v = rng.uniform(-1, 1);
    Graph<double> g;
    auto x = g.variable({2, 2, 3}, xv);
    auto k = g.variable({3, 2}, kv);
    auto out = softmax(sum_spatial(conv1x1(x, k)), 0);
    auto loss = sum_all(mul(out, out));
    g.backward(loss);
    return std::make_pair(out.value(), g.grad(x.id));
  };
  auto r1 = run(77);
  auto r2 = run(77);
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("forward values stay finite on finite inputs") {
  Rng rng(88);
  for (int it = 0; it < 10; ++it) {
    Graph<double> g;
    std::vector<double> v(24);
    for (auto& x : v) x = rng.uniform(-50, 50);
    auto x = g.variable({2, 2, 6}, v);
    auto k = g.variable({6, 4}, gradcheck::random_leaves({{6, 4}}, rng)[0]);
    auto out = softmax(sum_spatial(conv1x1(x, k)), 0);
    CHECK(all_finite(out.value()));
  }
}

TEST_CASE("param store binds leaves and accumulates grads") {
  ParamStore<double> store;
  Rng rng(3);
  int w = store.add_uniform("w", {3}, rng, 0.5);
  int a = store.add_zeros("alpha", {6}, /*is_arch=*/true);
  CHECK(store.find("w") == w);
  CHECK(store.find("missing") == -1);
  CHECK(store.ids(true) == std::vector<int>{a});

  Graph<double> g(&store);
  auto t = g.param(w);
  auto t2 = g.param(w);  // same leaf node
  CHECK(t.id == t2.id);
  auto loss = sum_all(add(t, mul(t, t2)));
  g.backward(loss);
  auto gw = g.param_grad(w);
  for (int i = 0; i < 3; ++i)
    CHECK(gw[i] == doctest::Approx(1.0 + 2.0 * store.entry(w).value[i]));
  CHECK(g.param_grad(a) == std::vector<double>(6, 0.0));
}
