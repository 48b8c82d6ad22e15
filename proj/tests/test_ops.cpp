#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "ringmo/ops.hpp"

using namespace ringmo;

namespace {

Var<double> V(Tensor<double> t) { return Var<double>(std::move(t)); }

}  // namespace

TEST_CASE("elementwise broadcasting over leading axes") {
  Tensor<double> a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor<double> b(Shape{3}, std::vector<double>{10, 20, 30});
  auto c = ops::add(V(a), V(b)).value();
  CHECK(c.vec() == std::vector<double>{11, 22, 33, 14, 25, 36});
  auto d = ops::sub(V(b), V(a)).value();
  CHECK(d.vec() == std::vector<double>{9, 18, 27, 6, 15, 24});
  CHECK_THROWS_AS(ops::add(V(a), V(Tensor<double>(Shape{2}))), ShapeError);
  CHECK_THROWS_AS(ops::mul(V(a), V(Tensor<double>(Shape{3, 2}))), ShapeError);
}

TEST_CASE("matmul matches the triple loop") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> d(1, 6);
    const int m = d(rng), k = d(rng), n = d(rng);
    auto a = oracle::random_tensor<double>({m, k}, rng);
    auto b = oracle::random_tensor<double>({k, n}, rng);
    CHECK(oracle::max_abs_diff(ops::matmul(V(a), V(b)).value(), oracle::matmul(a, b)) < 1e-12);
  }
  CHECK_THROWS_AS(ops::matmul(V(Tensor<double>(Shape{2, 3})), V(Tensor<double>(Shape{2, 3}))), ShapeError);
}

TEST_CASE("batched matmul with a shared right operand") {
  std::mt19937_64 rng(2);
  auto a = oracle::random_tensor<double>({3, 2, 4}, rng);
  auto b = oracle::random_tensor<double>({4, 5}, rng);
  auto c = ops::matmul(V(a), V(b)).value();
  for (int i = 0; i < 3; ++i) {
    Tensor<double> ai(Shape{2, 4}, std::vector<double>(a.vec().begin() + i * 8, a.vec().begin() + (i + 1) * 8));
    Tensor<double> ci(Shape{2, 5}, std::vector<double>(c.vec().begin() + i * 10, c.vec().begin() + (i + 1) * 10));
    CHECK(oracle::max_abs_diff(ci, oracle::matmul(ai, b)) < 1e-12);
  }
}

TEST_CASE("permute, transpose and reshape") {
  Tensor<double> a(Shape{2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  auto t = ops::transpose(V(a), 0, 1).value();
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.vec() == std::vector<double>{0, 3, 1, 4, 2, 5});
  CHECK(ops::permute(V(a), {1, 0}).value() == t);
  CHECK_THROWS_AS(ops::permute(V(a), {0, 0}), ConfigError);
  CHECK_THROWS_AS(ops::reshape(V(a), {4}), ShapeError);
}

TEST_CASE("concat and split are inverse") {
  std::mt19937_64 rng(3);
  auto a = oracle::random_tensor<double>({2, 5, 3}, rng);
  auto parts = ops::split(V(a), 1, {2, 3});
  CHECK(parts[0].shape() == Shape{2, 2, 3});
  CHECK(ops::concat(parts, 1).value() == a);
  CHECK_THROWS_AS(ops::split(V(a), 1, {2, 2}), ConfigError);
  CHECK_THROWS_AS(ops::concat(std::vector<Var<double>>{V(a), V(Tensor<double>(Shape{2, 5, 4}))}, 1), ShapeError);
}

TEST_CASE("roll follows torch semantics") {
  Tensor<double> a(Shape{5}, std::vector<double>{0, 1, 2, 3, 4});
  CHECK(ops::roll(V(a), {2}, {0}).value().vec() == std::vector<double>{3, 4, 0, 1, 2});
  CHECK(ops::roll(V(a), {-1}, {0}).value().vec() == std::vector<double>{1, 2, 3, 4, 0});
  CHECK(ops::roll(V(a), {7}, {0}).value() == ops::roll(V(a), {2}, {0}).value());
}

TEST_CASE("index_select gathers rows") {
  Tensor<double> a(Shape{3, 2}, std::vector<double>{0, 1, 10, 11, 20, 21});
  auto r = ops::index_select(V(a), {2, 2, 0}).value();
  CHECK(r.vec() == std::vector<double>{20, 21, 20, 21, 0, 1});
  CHECK_THROWS(ops::index_select(V(a), {3}));
}

TEST_CASE("softmax rows sum to one and ignore -inf") {
  const double inf = std::numeric_limits<double>::infinity();
  Tensor<double> a(Shape{2, 3}, std::vector<double>{1000, 1001, 1002, 0, -inf, 0});
  auto s = ops::softmax(V(a), -1).value();
  CHECK(s[0] + s[1] + s[2] == doctest::Approx(1.0));
  CHECK(s[4] == 0.0);
  CHECK(s[3] == doctest::Approx(0.5));
  Tensor<double> all(Shape{1, 2}, -inf);
  auto z = ops::softmax(V(all), -1).value();
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
}

TEST_CASE("layer_norm normalizes the last axis") {
  std::mt19937_64 rng(4);
  auto x = oracle::random_tensor<double>({4, 8}, rng, -3, 5);
  auto y = ops::layer_norm(V(x), V(Tensor<double>(Shape{8}, 1.0)), V(Tensor<double>(Shape{8}, 0.0)), 1e-12).value();
  for (int r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 8; ++c) m += y[r * 8 + c] / 8;
    for (int c = 0; c < 8; ++c) v += (y[r * 8 + c] - m) * (y[r * 8 + c] - m) / 8;
    CHECK(std::abs(m) < 1e-9);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("gelu uses the tanh approximation") {
  Tensor<double> x(Shape{3}, std::vector<double>{-1.0, 0.0, 2.0});
  auto y = ops::gelu(V(x)).value();
  auto ref = [](double v) { return 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v))); };
  for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(ref(x[i])).epsilon(1e-14));
}

TEST_CASE("conv2d matches the loop oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    std::uniform_int_distribution<int> d(0, 2);
    const int groups = 1 + d(rng) % 2, stride = 1 + d(rng) % 2, pad = d(rng) % 2, k = 1 + d(rng);
    const int cin = groups * (1 + d(rng)), cout = groups * (1 + d(rng)), h = k + d(rng) + 2, w = k + d(rng) + 1;
    auto x = oracle::random_tensor<double>({2, cin, h, w}, rng);
    auto wt = oracle::random_tensor<double>({cout, cin / groups, k, k}, rng);
    auto b = oracle::random_tensor<double>({cout}, rng);
    if ((h + 2 * pad - k) % stride || (w + 2 * pad - k) % stride) {
      CHECK_THROWS_AS(ops::conv2d(V(x), V(wt), std::optional(V(b)), {stride, pad, groups}), ConfigError);
      continue;
    }
    auto y = ops::conv2d(V(x), V(wt), std::optional(V(b)), {stride, pad, groups}).value();
    CHECK(oracle::max_abs_diff(y, oracle::conv2d(x, wt, &b, stride, pad, groups)) < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad geometry") {
  Tensor<double> x(Shape{1, 3, 4, 4});
  CHECK_THROWS_AS(ops::conv2d(V(x), V(Tensor<double>(Shape{2, 3, 3, 3})), std::optional<Var<double>>(), ops::Conv2dParams{1, 0, 2}), ConfigError);
  CHECK_THROWS_AS(ops::conv2d(V(x), V(Tensor<double>(Shape{2, 2, 3, 3})), std::optional<Var<double>>(), ops::Conv2dParams{1, 0, 1}), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(V(x), V(Tensor<double>(Shape{2, 3, 5, 5})), std::optional<Var<double>>(), ops::Conv2dParams{1, 0, 1}), ConfigError);
}

TEST_CASE("maxpool2d matches the window max and routes gradient to one cell") {
  std::mt19937_64 rng(6);
  auto x = oracle::random_tensor<double>({1, 2, 4, 4}, rng);
  auto y = ops::maxpool2d(V(x), {3, 1, 1}).value();
  CHECK(oracle::max_abs_diff(y, oracle::maxpool2d(x, 3, 1, 1)) == 0.0);
  CHECK_THROWS_AS(ops::maxpool2d(V(x), {2, 1, 2}), ConfigError);

  Tape<double> tape;
  Tensor<double> tie(Shape{1, 1, 2, 2}, 1.0);
  auto leaf = tape.leaf(tie);
  tape.backward(ops::sum(ops::maxpool2d(leaf, {2, 2, 0})));
  const auto& g = tape.grad(leaf);
  CHECK(g.vec() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("mean and sum reductions") {
  Tensor<double> a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(ops::sum(V(a)).value().item() == 21);
  CHECK(ops::mean(V(a), 0).value().vec() == std::vector<double>{2.5, 3.5, 4.5});
  CHECK(ops::mean(V(a), 1).value().vec() == std::vector<double>{2, 5});
}

TEST_CASE("cross entropy of uniform logits is log K") {
  Tensor<double> logits(Shape{2, 4}, 0.5);
  CHECK(ops::cross_entropy(V(logits), {0, 3}).value().item() == doctest::Approx(std::log(4.0)));
  CHECK_THROWS(ops::cross_entropy(V(logits), {0, 4}));
  CHECK_THROWS_AS(ops::cross_entropy(V(logits), {0}), ShapeError);
}

TEST_CASE("window_output_extent") {
  CHECK(ops::window_output_extent(224, 4, 4, 0, "conv") == 56);
  CHECK(ops::window_output_extent(7, 3, 1, 1, "pool") == 7);
  CHECK_THROWS_AS(ops::window_output_extent(7, 2, 2, 0, "conv"), ConfigError);
}
