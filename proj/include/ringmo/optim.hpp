#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ringmo/tensor.hpp"

namespace ringmo::optim {

template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, T lr);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment buffers for one parameter.
template <typename T>
struct AdamSlot {
  Tensor<T> m;
  Tensor<T> v;
};

/// Bias-corrected Adam update; `step` is 1-based.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamSlot<T>& slot, std::int64_t step, const AdamOptions& opt);

/// Adam over a named parameter set. Slots are created lazily, shaped like the
/// parameter they track.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions opt) : opt_(opt) {}

  void begin_step() { ++step_; }
  void update(const std::string& name, Tensor<T>& param, const Tensor<T>& grad);

  std::int64_t step() const { return step_; }
  const AdamOptions& options() const { return opt_; }

 private:
  AdamOptions opt_;
  std::int64_t step_ = 0;
  std::map<std::string, AdamSlot<T>> slots_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace ringmo::optim
