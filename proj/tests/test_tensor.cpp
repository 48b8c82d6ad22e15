#include "doctest.h"

#include <sstream>

#include "ringmo/tensor.hpp"

using namespace ringmo;

TEST_CASE("construction and element count") {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t[5] == 1.5f);
  CHECK(numel(Shape{}) == 1);
  CHECK(numel(Shape{4, 5, 6}) == 120);
}

TEST_CASE("scalar tensors") {
  auto s = Tensor<double>::scalar(2.5);
  CHECK(s.rank() == 0);
  CHECK(s.item() == 2.5);
  Tensor<double> d;
  CHECK(d.item() == 0.0);
  CHECK_THROWS_AS(Tensor<double>(Shape{2}).item(), ShapeError);
}

TEST_CASE("invalid extents and data length") {
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{-1}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST_CASE("row-major indexing") {
  Tensor<float> t(Shape{2, 3, 4});
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  CHECK(t.at({1, 2, 3}) == 23);
  CHECK(t.at({0, 1, 0}) == 4);
  CHECK_THROWS_AS(t.at({2, 0, 0}), std::out_of_range);
  CHECK_THROWS_AS(t.at({0, 0}), ShapeError);
  CHECK_THROWS_AS(t.dim(3), ConfigError);
}

TEST_CASE("reshape keeps data and checks count") {
  Tensor<float> t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  auto r = t.reshaped(Shape{3, 2});
  CHECK(r.vec() == t.vec());
  CHECK(r.shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped(Shape{4}), ShapeError);
}

TEST_CASE("cast and equality") {
  Tensor<double> t(Shape{2}, std::vector<double>{1.25, -2.0});
  auto f = t.cast<float>();
  CHECK(f[0] == 1.25f);
  CHECK(f.cast<double>() == t);
  CHECK_FALSE(Tensor<float>(Shape{2}) == Tensor<float>(Shape{1, 2}));
}

TEST_CASE("shape_str and printing") {
  CHECK(shape_str(Shape{2, 3}) == "[2,3]");
  CHECK(shape_str(Shape{}) == "[]");
  std::ostringstream os;
  os << Tensor<float>(Shape{2}, 1.0f);
  CHECK(os.str().find("[2]") != std::string::npos);
}
