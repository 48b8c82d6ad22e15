#include "doctest.h"

#include <set>

#include "ringmo/gradcheck.hpp"
#include "ringmo/ops.hpp"

using namespace ringmo;
using namespace ringmo::gradcheck;

TEST_CASE("every rule passes in both precisions") {
  const auto rows = run_suite({});
  std::set<std::string> names;
  for (const auto& r : rows) {
    INFO(r.name << " f32=" << r.err_f32 << " f64=" << r.err_f64);
    CHECK(names.insert(r.name).second);
    CHECK(r.passed);
    CHECK(r.err_f64 >= 0);
  }
  for (auto n : {"conv2d", "maxpool2d", "softmax", "layer_norm", "roll", "fdmim.l1_masked_loss", "model.end_to_end"})
    CHECK(names.count(n));
  CHECK(format_table(rows).find("model.end_to_end") != std::string::npos);
}

TEST_CASE("an injected fault is caught by name") {
  SuiteOptions opt;
  opt.include_model = false;
  opt.fault = Fault{"gelu", 2.0};
  const auto rows = run_suite(opt);
  bool gelu_failed = false;
  for (const auto& r : rows) {
    if (r.name == "gelu") gelu_failed = !r.passed;
    if (r.name == "add") CHECK(r.passed);
  }
  CHECK(gelu_failed);
}

TEST_CASE("relative error of a correct rule is tiny") {
  Builder<double> square = [](const std::vector<Var<double>>& in) { return ops::mul(in[0], in[0]); };
  const double e = relative_error<double>(square, {Tensor<double>(Shape{4}, std::vector<double>{1, -2, 3, 0.5})}, {});
  CHECK(e < 1e-8);
  CheckOptions broken;
  broken.fault = Fault{"mul", 3.0};
  CHECK(relative_error<double>(square, {Tensor<double>(Shape{4}, 1.0)}, broken) > 0.5);
}
