#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "cbff/autograd.hpp"
#include "cbff/ops.hpp"
#include "cbff/ops_nn.hpp"
#include "cbff/rng.hpp"

// Gradient checks in double precision: every differentiable op's analytic
// backward is compared against the central-difference oracle.

using cbff::RngStream;
using cbff::Tensor;
using cbff::Var;
namespace ops = cbff::ops;

using TD = Tensor<double>;
using VD = Var<double>;

namespace {

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1e-6, std::fabs(a), std::fabs(b)});
}

// Checks d(loss)/d(inputs[idx]) where loss = sum(fn(inputs) . w) with fixed
// random weights (a plain sum can hide sign errors in symmetric ops).
void gradcheck(const std::function<VD(std::vector<VD>&)>& fn, std::vector<TD> inputs,
               size_t idx, double tol = 1e-6, double eps = 1e-5) {
  TD w;
  auto run = [&](const std::vector<TD>& vals, bool with_grad, std::vector<VD>* out_leaves) {
    std::vector<VD> leaves;
    leaves.reserve(vals.size());
    for (const auto& t : vals) leaves.emplace_back(t.clone(), with_grad);
    VD y = fn(leaves);
    if (!w.defined()) {
      auto wrng = cbff::seeded_rng(99, "gradcheck-w");
      w = TD::randn(y.value().shape(), wrng);
    }
    VD loss = ops::sum_all(ops::mul(y, VD(w, false)));
    if (out_leaves) *out_leaves = leaves;
    return loss;
  };

  std::vector<VD> leaves;
  VD loss = run(inputs, true, &leaves);
  loss.backward();
  REQUIRE(leaves[idx].has_grad());
  TD analytic = leaves[idx].grad().clone();

  TD numeric = cbff::finite_diff_grad(
      [&](const TD& xp) {
        std::vector<TD> vals = inputs;
        vals[idx] = xp;
        cbff::NoGradGuard ng;
        std::vector<VD> lv;
        return run(vals, false, &lv).value()[0];
      },
      inputs[idx], eps);

  double worst = 0;
  for (int64_t i = 0; i < analytic.numel(); ++i)
    worst = std::max(worst, rel_err(analytic[i], numeric[i]));
  CHECK(worst < tol);
}

TD randn(uint64_t seed, std::vector<int64_t> shape, double scale = 1.0) {
  auto rng = cbff::seeded_rng(seed, "gc");
  return TD::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("finite_diff oracle: f = sum gives all-ones") {
  TD x = randn(1, {2, 3});
  TD g = cbff::finite_diff_grad(
      [](const TD& t) {
        double s = 0;
        for (int64_t i = 0; i < t.numel(); ++i) s += t[i];
        return s;
      },
      x, 1e-5);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("finite_diff oracle: f = 0.5*||x||^2 gives x back") {
  TD x = randn(2, {4, 5});
  TD g = cbff::finite_diff_grad(
      [](const TD& t) {
        double s = 0;
        for (int64_t i = 0; i < t.numel(); ++i) s += 0.5 * t[i] * t[i];
        return s;
      },
      x, 1e-5);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(rel_err(g[i], x[i]) < 1e-8);
}

TEST_CASE("finite_diff oracle rejects non-finite values") {
  TD x = TD::full({2}, 1.0);
  CHECK_THROWS_AS(cbff::finite_diff_grad(
                      [](const TD& t) { return std::log(t[0] - 10.0); }, x, 1e-5),
                  cbff::NumericError);
}

TEST_CASE("elementwise op gradients") {
  TD a = randn(3, {2, 3, 4});
  TD b = randn(4, {2, 3, 4});
  gradcheck([](std::vector<VD>& v) { return ops::add(v[0], v[1]); }, {a, b}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::add(v[0], v[1]); }, {a, b}, 1);
  gradcheck([](std::vector<VD>& v) { return ops::sub(v[0], v[1]); }, {a, b}, 1);
  gradcheck([](std::vector<VD>& v) { return ops::mul(v[0], v[1]); }, {a, b}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::mul_scalar(v[0], 2.718); }, {a}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::gelu(v[0]); }, {a}, 0);
  // Keep inputs away from the kinks of |x| and relu.
  TD far = randn(5, {3, 7});
  for (int64_t i = 0; i < far.numel(); ++i)
    far[i] += far[i] >= 0 ? 0.5 : -0.5;
  gradcheck([](std::vector<VD>& v) { return ops::abs(v[0]); }, {far}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::relu(v[0]); }, {far}, 0);
}

TEST_CASE("shape op gradients") {
  TD x = randn(6, {2, 3, 4, 5});
  gradcheck([](std::vector<VD>& v) { return ops::reshape(v[0], {6, 20}); }, {x}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::permute_0213(v[0]); }, {x}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::chw_to_tokens(v[0]); }, {x}, 0);
  TD tok = randn(7, {2, 12, 5});
  gradcheck([](std::vector<VD>& v) { return ops::tokens_to_chw(v[0], 3, 4); }, {tok}, 0);
  TD a = randn(8, {2, 3, 4, 4}), b = randn(9, {2, 5, 4, 4});
  gradcheck([](std::vector<VD>& v) { return ops::concat_channel(v[0], v[1]); }, {a, b}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::concat_channel(v[0], v[1]); }, {a, b}, 1);
  TD s = randn(10, {4, 9});
  gradcheck([](std::vector<VD>& v) { return ops::slice_lastdim(v[0], 2, 7); }, {s}, 0);
}

TEST_CASE("matmul family gradients") {
  TD a = randn(11, {4, 6}), b = randn(12, {6, 5});
  gradcheck([](std::vector<VD>& v) { return ops::matmul(v[0], v[1]); }, {a, b}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::matmul(v[0], v[1]); }, {a, b}, 1);

  TD ba = randn(13, {3, 4, 6}), bb = randn(14, {3, 6, 5}), bbt = randn(15, {3, 5, 6});
  gradcheck([](std::vector<VD>& v) { return ops::bmm(v[0], v[1]); }, {ba, bb}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::bmm(v[0], v[1]); }, {ba, bb}, 1);
  gradcheck([](std::vector<VD>& v) { return ops::bmm(v[0], v[1], true); }, {ba, bbt}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::bmm(v[0], v[1], true); }, {ba, bbt}, 1);

  TD x = randn(16, {7, 6}), w = randn(17, {4, 6}), bias = randn(18, {4});
  for (size_t i = 0; i < 3; ++i)
    gradcheck([](std::vector<VD>& v) { return ops::linear(v[0], v[1], v[2]); }, {x, w, bias},
              i);
}

TEST_CASE("softmax gradient and row normalization") {
  TD x = randn(19, {5, 7}, 2.0);
  gradcheck([](std::vector<VD>& v) { return ops::softmax_lastdim(v[0]); }, {x}, 0);
  VD y = ops::softmax_lastdim(VD(x, false));
  for (int64_t r = 0; r < 5; ++r) {
    double s = 0;
    for (int64_t j = 0; j < 7; ++j) s += y.value().at2(r, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("batchnorm gradients, train and eval") {
  TD x = randn(20, {3, 4, 5, 5});
  TD gamma = randn(21, {4}, 0.5);
  for (int64_t i = 0; i < 4; ++i) gamma[i] += 1.0;
  TD beta = randn(22, {4}, 0.2);
  for (bool training : {true, false}) {
    for (size_t idx = 0; idx < 3; ++idx) {
      gradcheck(
          [training](std::vector<VD>& v) {
            TD rm({4});
            TD rv = TD::ones({4});
            // pre-bake non-trivial running stats for eval mode
            for (int64_t c = 0; c < 4; ++c) {
              rm[c] = 0.1 * double(c);
              rv[c] = 1.0 + 0.2 * double(c);
            }
            return ops::batchnorm2d(v[0], v[1], v[2], rm, rv, training);
          },
          {x, gamma, beta}, idx, 1e-6);
    }
  }
}

TEST_CASE("batchnorm running stats update only in training mode") {
  TD x = randn(23, {4, 2, 3, 3}, 2.0);
  TD gamma = TD::ones({2}), beta({2});
  TD rm({2}), rv = TD::ones({2});
  VD xv(x, false);
  ops::batchnorm2d(xv, VD(gamma, false), VD(beta, false), rm, rv, false);
  CHECK(rm[0] == 0.0);
  CHECK(rv[0] == 1.0);
  ops::batchnorm2d(xv, VD(gamma, false), VD(beta, false), rm, rv, true);
  CHECK(rm[0] != 0.0);
  CHECK(rv[0] != 1.0);
}

TEST_CASE("layernorm gradient") {
  TD x = randn(24, {3, 5, 8});
  TD gamma = TD::ones({8}), beta({8});
  for (size_t idx = 0; idx < 3; ++idx)
    gradcheck([](std::vector<VD>& v) { return ops::layernorm_lastdim(v[0], v[1], v[2]); },
              {x, gamma, beta}, idx);
}

TEST_CASE("conv2d gradients across geometries") {
  struct Case {
    std::vector<int64_t> xs, ws;
    ops::Conv2dSpec spec;
    bool bias;
  };
  std::vector<Case> cases = {
      {{2, 3, 6, 6}, {4, 3, 1, 1}, {1, 0, 1}, false},  // pointwise
      {{2, 3, 6, 6}, {4, 3, 3, 3}, {1, 1, 1}, true},   // 3x3 same
      {{1, 2, 7, 7}, {3, 2, 3, 3}, {2, 1, 1}, false},  // strided
      {{1, 2, 9, 9}, {3, 2, 3, 3}, {1, 2, 2}, false},  // dilated
      {{1, 3, 8, 8}, {2, 3, 7, 7}, {2, 3, 1}, true},   // stem-style 7x7 s2
  };
  int seed = 30;
  for (const auto& c : cases) {
    TD x = randn(uint64_t(seed++), c.xs);
    TD w = randn(uint64_t(seed++), c.ws, 0.5);
    TD b = randn(uint64_t(seed++), {c.ws[0]}, 0.2);
    size_t max_idx = c.bias ? 3 : 2;
    for (size_t idx = 0; idx < max_idx; ++idx) {
      gradcheck(
          [c](std::vector<VD>& v) {
            return ops::conv2d(v[0], v[1], c.bias ? &v[2] : nullptr, c.spec);
          },
          {x, w, b}, idx, 1e-6);
    }
  }
}

TEST_CASE("upsample gradients, factors 2 and 4") {
  TD x = randn(40, {2, 3, 4, 5});
  gradcheck([](std::vector<VD>& v) { return ops::upsample_bilinear(v[0], 2); }, {x}, 0);
  gradcheck([](std::vector<VD>& v) { return ops::upsample_bilinear(v[0], 4); }, {x}, 0);
}

TEST_CASE("pool gradients") {
  // Offsets keep maxima unique so the argmax is finite-difference stable.
  TD x = randn(41, {2, 2, 8, 8}, 3.0);
  gradcheck([](std::vector<VD>& v) { return ops::maxpool2d(v[0], 3, 2, 1); }, {x}, 0, 1e-5);
  gradcheck([](std::vector<VD>& v) { return ops::global_avgpool(v[0]); }, {x}, 0);
  TD p = randn(42, {2, 3, 1, 1});
  gradcheck([](std::vector<VD>& v) { return ops::broadcast_hw(v[0], 5, 6); }, {p}, 0);
}

TEST_CASE("cross entropy matches brute force and gradient checks") {
  TD logits = randn(43, {2, 2, 4, 4}, 2.0);
  Tensor<uint8_t> labels({2, 4, 4});
  auto lr = cbff::seeded_rng(44, "labels");
  for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = uint8_t(lr.uniform_int(2));

  // brute-force per-pixel oracle
  double expect = 0;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 16; ++i) {
      double l0 = logits[b * 32 + i], l1 = logits[b * 32 + 16 + i];
      double m = std::max(l0, l1);
      double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
      double ly = labels[b * 16 + i] ? l1 : l0;
      expect += lse - ly;
    }
  expect /= 32.0;
  VD loss = ops::cross_entropy_mean(VD(logits, false), labels);
  CHECK(loss.value()[0] == doctest::Approx(expect).epsilon(1e-9));

  gradcheck([&labels](std::vector<VD>& v) { return ops::cross_entropy_mean(v[0], labels); },
            {logits}, 0);

  // masked variant: only half the pixels count
  Tensor<uint8_t> mask({2, 4, 4});
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = uint8_t(i % 2);
  gradcheck(
      [&labels, &mask](std::vector<VD>& v) {
        return ops::cross_entropy_mean(v[0], labels, &mask);
      },
      {logits}, 0);

  // empty mask: zero loss, zero gradient
  Tensor<uint8_t> none({2, 4, 4});
  VD lg(logits, true);
  VD zl = ops::cross_entropy_mean(lg, labels, &none);
  CHECK(zl.value()[0] == 0.0);
}

TEST_CASE("two-layer toy net end-to-end gradient") {
  // conv -> relu -> linear head -> CE; the composite oracle from the contract.
  TD x = randn(50, {2, 2, 6, 6});
  TD w1 = randn(51, {3, 2, 3, 3}, 0.5);
  TD w2 = randn(52, {2, 3, 1, 1}, 0.5);
  Tensor<uint8_t> labels({2, 6, 6});
  auto lr = cbff::seeded_rng(53, "toy-labels");
  for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = uint8_t(lr.uniform_int(2));
  auto net = [&labels](std::vector<VD>& v) {
    ops::Conv2dSpec s1{1, 1, 1}, s2{1, 0, 1};
    VD h = ops::relu(ops::conv2d(v[0], v[1], s1));
    VD logits = ops::conv2d(h, v[2], s2);
    return ops::cross_entropy_mean(logits, labels);
  };
  for (size_t idx = 0; idx < 3; ++idx) gradcheck(net, {x, w1, w2}, idx, 1e-6);
}

TEST_CASE("no-grad guard detaches the graph") {
  TD x = randn(60, {3, 3});
  VD leaf(x, true);
  {
    cbff::NoGradGuard ng;
    VD y = ops::mul_scalar(leaf, 2.0);
    CHECK(!y.requires_grad());
  }
  VD y = ops::mul_scalar(leaf, 2.0);
  CHECK(y.requires_grad());
}

TEST_CASE("diamond reuse accumulates gradients once per path") {
  TD x = TD::full({2}, 3.0);
  VD leaf(x, true);
  VD a = ops::mul_scalar(leaf, 2.0);
  VD y = ops::sum_all(ops::add(a, a));  // dy/dx = 4
  y.backward();
  CHECK(leaf.grad()[0] == doctest::Approx(4.0));
  CHECK(leaf.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward on non-scalar is rejected") {
  VD leaf(TD::full({2, 2}, 1.0), true);
  VD y = ops::mul_scalar(leaf, 1.0);
  CHECK_THROWS_AS(y.backward(), cbff::ShapeError);
}
