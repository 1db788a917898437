#include <doctest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "rstn/tensor.hpp"

using namespace rstn;
using tc::Graph;
using tc::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
  CounterRng rng(seed);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.next_in(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("conv2d_same: 1x1 unit kernel is the identity") {
  Graph g;
  const auto x = g.leaf(random_tensor({2, 4, 5}, 11));
  const auto k = g.leaf(Tensor({2, 2, 1, 1}, {1, 0, 0, 1}));
  const auto b = g.leaf(Tensor::zeros({2}));
  const auto y = g.conv2d_same(x, k, b);
  for (std::size_t i = 0; i < g.value(x).data.size(); ++i)
    CHECK(g.value(y).data[i] == g.value(x).data[i]);
}

TEST_CASE("conv2d_same: all-ones 3x3 kernel on a constant 5x5 image") {
  Graph g;
  const auto x = g.leaf(Tensor::full({1, 5, 5}, 1.0));
  const auto k = g.leaf(Tensor::full({1, 1, 3, 3}, 1.0));
  const auto b = g.leaf(Tensor::zeros({1}));
  const Tensor& y = g.value(g.conv2d_same(x, k, b));
  // interior 9, edges 6, corners 4
  CHECK(y.at3(0, 2, 2) == 9.0);
  CHECK(y.at3(0, 0, 2) == 6.0);
  CHECK(y.at3(0, 2, 0) == 6.0);
  CHECK(y.at3(0, 0, 0) == 4.0);
  CHECK(y.at3(0, 4, 4) == 4.0);

  // same case through the independent reference convolution
  const auto ref = oracle::conv2d_forward({1, 1, 5, 5, 3},
                                          std::vector<double>(25, 1.0),
                                          std::vector<double>(9, 1.0), {0.0});
  for (int i = 0; i < 25; ++i) CHECK(y.data[static_cast<std::size_t>(i)] == ref[static_cast<std::size_t>(i)]);
}

TEST_CASE("conv2d_same: shape contract and channel mismatch") {
  Graph g;
  const auto x = g.leaf(random_tensor({2, 7, 7}, 3));
  const auto k = g.leaf(random_tensor({4, 2, 3, 3}, 4));
  const auto b = g.leaf(Tensor::zeros({4}));
  const Tensor& y = g.value(g.conv2d_same(x, k, b));
  CHECK(y.shape == std::vector<int>{4, 7, 7});

  const auto bad_k = g.leaf(random_tensor({4, 3, 3, 3}, 5));
  CHECK_THROWS_AS(g.conv2d_same(x, bad_k, b), Error);
}

TEST_CASE("elementwise op values") {
  Graph g;
  const auto x = g.leaf(random_tensor({1, 3, 3}, 6));
  const auto ones = g.leaf(Tensor::full({1, 3, 3}, 1.0));
  const Tensor& m = g.value(g.mul(x, ones));
  for (std::size_t i = 0; i < m.data.size(); ++i)
    CHECK(m.data[i] == g.value(x).data[i]);

  const auto z = g.leaf(Tensor::scalar(0.0));
  CHECK(g.value(g.sigmoid(z)).data[0] == 0.5);

  const auto r = g.leaf(Tensor({2}, {-3.0, 2.5}));
  const Tensor& rv = g.value(g.relu(r));
  CHECK(rv.data[0] == 0.0);
  CHECK(rv.data[1] == 2.5);

  const auto mismatched = g.leaf(Tensor::zeros({1, 2, 2}));
  CHECK_THROWS_AS(g.mul(x, mismatched), Error);
}

TEST_CASE("sigmoid output is strictly inside (0,1) even at saturation") {
  Graph g;
  const auto x = g.leaf(Tensor({3}, {-1000.0, 0.0, 1000.0}));
  const Tensor& s = g.value(g.sigmoid(x));
  for (double v : s.data) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("backward: linear functional and product rule") {
  Graph g;
  const auto x = g.leaf(random_tensor({2, 3, 4}, 8), true);
  g.backward(g.sum(x));
  for (double v : g.grad(x).data) CHECK(v == 1.0);

  Graph g2;
  const Tensor av = random_tensor({1, 4, 4}, 9);
  const Tensor bv = random_tensor({1, 4, 4}, 10);
  const auto a = g2.leaf(av, true);
  const auto b = g2.leaf(bv, true);
  g2.backward(g2.sum(g2.mul(a, b)));
  for (std::size_t i = 0; i < av.data.size(); ++i) {
    CHECK(g2.grad(a).data[i] == bv.data[i]);
    CHECK(g2.grad(b).data[i] == av.data[i]);
  }
}

TEST_CASE("backward rejects a non-scalar loss") {
  Graph g;
  const auto x = g.leaf(random_tensor({1, 2, 2}, 12), true);
  const auto y = g.relu(x);
  CHECK_THROWS_AS(g.backward(y), Error);
}

TEST_CASE("check_gradients: quadratic loss has error <= 1e-6") {
  Tensor x = random_tensor({8}, 21);
  std::vector<Tensor*> params{&x};
  auto loss_fn = [&]() {
    double acc = 0.0;
    for (double v : x.data) acc += 0.5 * v * v;
    return acc;
  };
  // analytic gradient of 0.5*||x||^2 is x itself
  const auto res = tc::check_gradients(loss_fn, params, {x}, 1e-5);
  CHECK(res.max_rel_error <= 1e-6);
  CHECK(res.coords_checked == 8);
  CHECK(res.coords_skipped == 0);
}

TEST_CASE("composite graph gradients match finite differences to 1e-4") {
  // conv -> relu -> down -> up -> window -> saliency-style mul -> soft-dsc
  // style scalar combination; every operator participates.
  Tensor kern = random_tensor({2, 1, 3, 3}, 31, -0.7, 0.7);
  Tensor bias = random_tensor({2}, 32, -0.2, 0.2);
  Tensor kern2 = random_tensor({1, 2, 3, 3}, 33, -0.7, 0.7);
  Tensor bias2 = random_tensor({1}, 34, -0.2, 0.2);
  const Tensor input = random_tensor({1, 7, 7}, 35, 0.0, 1.0);

  auto build = [&](Graph& g, bool with_grad, Graph::NodeId* kid, Graph::NodeId* bid,
                   Graph::NodeId* kid2, Graph::NodeId* bid2) {
    const auto x = g.leaf(input);
    *kid = g.leaf(kern, with_grad);
    *bid = g.leaf(bias, with_grad);
    *kid2 = g.leaf(kern2, with_grad);
    *bid2 = g.leaf(bias2, with_grad);
    auto h = g.relu(g.conv2d_same(x, *kid, *bid));
    h = g.upsample2x(g.downsample2x(h), 7, 7);
    h = g.window(h, tc::Window{1, 1, 5, 6});
    auto p = g.sigmoid(g.conv2d_same(h, *kid2, *bid2));
    auto num = g.affine(g.sum(g.mul(p, p)), 2.0, 1e-6);
    auto den = g.affine(g.sum(p), 1.0, 3.0);
    return g.affine(g.div(num, den), -1.0, 1.0);
  };

  Graph g;
  Graph::NodeId kid, bid, kid2, bid2;
  const auto loss = build(g, true, &kid, &bid, &kid2, &bid2);
  g.backward(loss);
  const std::vector<Tensor> analytic{g.grad(kid), g.grad(bid), g.grad(kid2),
                                     g.grad(bid2)};

  std::vector<Tensor*> params{&kern, &bias, &kern2, &bias2};
  auto loss_fn = [&]() {
    Graph gg;
    Graph::NodeId a, b, c, d;
    return gg.value(build(gg, false, &a, &b, &c, &d)).data[0];
  };
  const auto res = tc::check_gradients(loss_fn, params, analytic, 1e-5);
  CHECK(res.max_rel_error <= 1e-4);
  CHECK(res.coords_skipped == 0);
}

TEST_CASE("frozen leaves receive no gradient buffer") {
  Graph g;
  const auto x = g.leaf(random_tensor({4}, 41), false);
  const auto w = g.leaf(random_tensor({4}, 42), true);
  g.backward(g.sum(g.mul(x, w)));
  CHECK_NOTHROW(g.grad(w));
  CHECK_THROWS_AS(g.grad(x), Error);
}

TEST_CASE("conv2d linearity in the input") {
  const double alpha = 0.37, beta = -1.21;
  const Tensor x = random_tensor({2, 6, 6}, 51);
  const Tensor y = random_tensor({2, 6, 6}, 52);
  const Tensor k = random_tensor({3, 2, 3, 3}, 53);
  const Tensor zero_bias = Tensor::zeros({3});

  auto conv = [&](const Tensor& in) {
    Graph g;
    return g.value(g.conv2d_same(g.leaf(in), g.leaf(k), g.leaf(zero_bias)));
  };

  Tensor mix = Tensor::zeros({2, 6, 6});
  for (std::size_t i = 0; i < mix.data.size(); ++i)
    mix.data[i] = alpha * x.data[i] + beta * y.data[i];
  const Tensor lhs = conv(mix);
  const Tensor cx = conv(x);
  const Tensor cy = conv(y);
  for (std::size_t i = 0; i < lhs.data.size(); ++i)
    CHECK(lhs.data[i] ==
          doctest::Approx(alpha * cx.data[i] + beta * cy.data[i]).epsilon(1e-10));
}

TEST_CASE("forward and backward are deterministic bit-for-bit") {
  auto run = [&]() {
    Graph g;
    const auto x = g.leaf(random_tensor({3, 8, 8}, 61, 0.0, 1.0));
    const auto k = g.leaf(random_tensor({4, 3, 3, 3}, 62), true);
    const auto b = g.leaf(random_tensor({4}, 63), true);
    const auto y = g.relu(g.conv2d_same(x, k, b));
    const auto loss = g.sum(y);
    g.backward(loss);
    return std::tuple<Tensor, Tensor, Tensor>(g.value(y), g.grad(k), g.grad(b));
  };
  const auto [y1, gk1, gb1] = run();
  const auto [y2, gk2, gb2] = run();
  CHECK(std::memcmp(y1.data.data(), y2.data.data(), y1.data.size() * 8) == 0);
  CHECK(std::memcmp(gk1.data.data(), gk2.data.data(), gk1.data.size() * 8) == 0);
  CHECK(std::memcmp(gb1.data.data(), gb2.data.data(), gb1.data.size() * 8) == 0);
}

TEST_CASE("all forward outputs stay finite on finite inputs") {
  Graph g;
  const auto x = g.leaf(random_tensor({2, 8, 8}, 71, -50.0, 50.0));
  const auto k = g.leaf(random_tensor({2, 2, 5, 5}, 72, -3.0, 3.0));
  const auto b = g.leaf(random_tensor({2}, 73));
  auto h = g.sigmoid(g.conv2d_same(x, k, b));
  h = g.upsample2x(g.downsample2x(h), 8, 8);
  CHECK(g.value(h).all_finite());
  CHECK(g.value(g.sum(h)).all_finite());
}

TEST_CASE("sgd_step: momentum-free update and the momentum recurrence") {
  Tensor p = Tensor::scalar(1.0);
  Tensor gr = Tensor::scalar(1.0);
  std::vector<Tensor*> params{&p};
  std::vector<const Tensor*> grads{&gr};

  tc::OptimizerState s0;
  s0.learning_rate = 0.1;
  s0.momentum = 0.0;
  tc::sgd_step(params, grads, s0);
  CHECK(p.data[0] == doctest::Approx(0.9));

  // momentum 0.9, two unit-gradient steps from p=0: -0.1 then -0.29
  Tensor q = Tensor::scalar(0.0);
  std::vector<Tensor*> qp{&q};
  tc::OptimizerState s1;
  s1.learning_rate = 0.1;
  s1.momentum = 0.9;
  tc::sgd_step(qp, grads, s1);
  CHECK(q.data[0] == doctest::Approx(-0.1));
  tc::sgd_step(qp, grads, s1);
  CHECK(q.data[0] == doctest::Approx(-0.29));
}

TEST_CASE("sgd_step: zero gradient with zero velocity is a fixed point") {
  Tensor p = Tensor({3}, {1.0, -2.0, 3.0});
  const Tensor zero = Tensor::zeros({3});
  std::vector<Tensor*> params{&p};
  std::vector<const Tensor*> grads{&zero};
  tc::OptimizerState s;
  s.learning_rate = 0.5;
  s.momentum = 0.9;
  tc::sgd_step(params, grads, s);
  CHECK(p.data == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("sgd_step: non-finite gradients are rejected per tensor and counted") {
  Tensor p = Tensor({2}, {1.0, 1.0});
  Tensor bad = Tensor({2}, {std::nan(""), 1.0});
  Tensor ok = Tensor({2}, {1.0, 1.0});
  Tensor q = Tensor({2}, {5.0, 5.0});
  std::vector<Tensor*> params{&p, &q};
  std::vector<const Tensor*> grads{&bad, &ok};
  tc::OptimizerState s;
  s.learning_rate = 0.1;
  s.momentum = 0.0;
  tc::sgd_step(params, grads, s);
  CHECK(p.data == std::vector<double>{1.0, 1.0});  // untouched
  CHECK(q.data[0] == doctest::Approx(4.9));
  CHECK(s.rejected_steps == 1);
}

TEST_CASE("check_gradients counts coordinates skipped on non-finite losses") {
  Tensor x = Tensor({2}, {0.5, 1.0});
  std::vector<Tensor*> params{&x};
  auto loss_fn = [&]() {
    if (x.data[0] > 0.50000999) return std::nan("");
    return x.data[0] + x.data[1];
  };
  const Tensor analytic({2}, {1.0, 1.0});
  const auto res = tc::check_gradients(loss_fn, params, {analytic}, 1e-5);
  CHECK(res.coords_skipped == 1);
  CHECK(res.coords_checked == 1);
}
