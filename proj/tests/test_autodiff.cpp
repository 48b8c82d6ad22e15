#include "doctest.h"

#include "ringmo/autodiff.hpp"
#include "ringmo/ops.hpp"
#include "ringmo/optim.hpp"

using namespace ringmo;

TEST_CASE("gradient of a product accumulates over reuse") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
  // d/dx sum(x*x + 3x) = 2x + 3
  auto y = ops::sum(ops::add(ops::mul(x, x), ops::scale(x, 3.0)));
  tape.backward(y);
  const auto& g = tape.grad(x);
  CHECK(g[0] == doctest::Approx(5));
  CHECK(g[1] == doctest::Approx(7));
  CHECK(g[2] == doctest::Approx(9));
}

TEST_CASE("constants record nothing") {
  Tape<float> tape;
  Var<float> c(Tensor<float>(Shape{2}, 1.0f));
  auto y = ops::add(c, c);
  CHECK_FALSE(y.tracked());
  CHECK(tape.entries().empty());
  auto frozen = tape.leaf(Tensor<float>(Shape{2}, 1.0f), false);
  auto z = ops::mul(frozen, c);
  CHECK_FALSE(z.tracked());
}

TEST_CASE("unused leaf gets zero gradient") {
  Tape<float> tape;
  auto a = tape.leaf(Tensor<float>(Shape{2}, 1.0f));
  auto b = tape.leaf(Tensor<float>(Shape{4}, 1.0f));
  tape.backward(ops::sum(a));
  CHECK(tape.grad(b) == Tensor<float>(Shape{4}, 0.0f));
}

TEST_CASE("backward preconditions") {
  Tape<float> tape;
  auto a = tape.leaf(Tensor<float>(Shape{2}, 1.0f));
  auto v = ops::scale(a, 2.0f);
  CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);  // not scalar
  auto s = ops::sum(v);
  Tape<float> other;
  CHECK_THROWS_AS(other.backward(s), std::invalid_argument);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), std::logic_error);
  CHECK_THROWS_AS(tape.grad(v), std::invalid_argument);
  CHECK_THROWS(ops::add(a, a));  // tape consumed
}

TEST_CASE("mixing tapes is rejected") {
  Tape<float> t1, t2;
  auto a = t1.leaf(Tensor<float>(Shape{2}, 1.0f));
  auto b = t2.leaf(Tensor<float>(Shape{2}, 1.0f));
  CHECK_THROWS_AS(ops::add(a, b), std::logic_error);
}

TEST_CASE("entries are recorded in execution order") {
  Tape<float> tape;
  auto a = tape.leaf(Tensor<float>(Shape{2}, 1.0f));
  auto b = ops::gelu(a);
  auto c = ops::sum(b);
  REQUIRE(tape.entries().size() == 2);
  CHECK(tape.entries()[0].op == "gelu");
  CHECK(tape.entries()[1].op == "sum");
  CHECK(tape.entries()[1].inputs[0] == b.id());
  CHECK(c.id() == tape.entries()[1].output);
}

TEST_CASE("fault injection scales one rule") {
  Tape<double> tape;
  tape.inject_fault("scale", 2.0);
  auto x = tape.leaf(Tensor<double>(Shape{1}, 1.0));
  tape.backward(ops::sum(ops::scale(x, 3.0)));
  CHECK(tape.grad(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("adam matches a hand-computed first step") {
  Tensor<double> p(Shape{2}, std::vector<double>{1.0, -1.0});
  Tensor<double> g(Shape{2}, std::vector<double>{0.5, -2.0});
  optim::AdamSlot<double> slot{Tensor<double>(Shape{2}), Tensor<double>(Shape{2})};
  optim::AdamOptions opt;
  opt.lr = 0.1;
  optim::adam_step(p, g, slot, 1, opt);
  // bias-corrected first step moves each weight by lr * sign(g) (up to eps)
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-0.9).epsilon(1e-6));
}

TEST_CASE("adam with zero learning rate leaves weights bit-identical") {
  Tensor<float> p(Shape{3}, std::vector<float>{0.1f, -0.2f, 0.3f});
  const auto before = p;
  optim::Adam<float> adam(optim::AdamOptions{.lr = 0.0});
  for (int i = 0; i < 3; ++i) {
    adam.begin_step();
    adam.update("w", p, Tensor<float>(Shape{3}, 1.0f));
  }
  CHECK(p == before);
}

TEST_CASE("sgd descends a quadratic") {
  Tensor<double> w(Shape{1}, 4.0);
  for (int i = 0; i < 100; ++i) {
    Tape<double> tape;
    auto x = tape.leaf(w);
    tape.backward(ops::sum(ops::mul(x, x)));
    optim::sgd_step(w, tape.grad(x), 0.1);
  }
  CHECK(std::abs(w[0]) < 1e-6);
}
