#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ringmo/autodiff.hpp"

// Central finite-difference checks of every backward rule.
namespace ringmo::gradcheck {

template <typename T>
struct Tolerance;
template <>
struct Tolerance<float> {
  static constexpr double step = 1e-3;
  static constexpr double max_rel = 1e-2;
};
template <>
struct Tolerance<double> {
  static constexpr double step = 1e-5;
  static constexpr double max_rel = 1e-5;
};

template <typename T>
using Builder = std::function<Var<T>(const std::vector<Var<T>>& inputs)>;

struct Fault {
  std::string op;
  double scale = 2.0;
};

struct CheckOptions {
  std::uint64_t seed = 0;
  int max_coords = 64;  // per input; larger inputs are sampled
  std::optional<Fault> fault;
};

/// Norm-wise relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
/// of d<out, R>/d inputs for a fixed random projection R.
template <typename T>
double relative_error(const Builder<T>& build, const std::vector<Tensor<T>>& inputs, const CheckOptions& opt);

struct CheckRow {
  std::string name;
  double err_f32 = 0;  // negative when not run
  double err_f64 = 0;
  bool passed = false;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  bool include_model = true;
  std::optional<Fault> fault;
};

/// One row per differentiable op plus the miniature end-to-end model.
std::vector<CheckRow> run_suite(const SuiteOptions& opt);

std::string format_table(const std::vector<CheckRow>& rows);

}  // namespace ringmo::gradcheck
