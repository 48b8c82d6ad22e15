#include "ringmo/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ringmo::optim {

template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, T lr) {
  if (param.shape() != grad.shape()) {
    throw ShapeError("sgd_step: param " + shape_str(param.shape()) + " vs grad " + shape_str(grad.shape()));
  }
  for (std::int64_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
}

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamSlot<T>& slot, std::int64_t step, const AdamOptions& opt) {
  if (param.shape() != grad.shape() || slot.m.shape() != param.shape() || slot.v.shape() != param.shape()) {
    throw ShapeError("adam_step: param " + shape_str(param.shape()) + ", grad " + shape_str(grad.shape()) +
                     ", state " + shape_str(slot.m.shape()));
  }
  if (step < 1) throw std::invalid_argument("adam_step: step counter starts at 1");
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  for (std::int64_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = opt.beta1 * slot.m[i] + (1.0 - opt.beta1) * g;
    const double v = opt.beta2 * slot.v[i] + (1.0 - opt.beta2) * g * g;
    slot.m[i] = static_cast<T>(m);
    slot.v[i] = static_cast<T>(v);
    const double mhat = m / c1;
    const double vhat = v / c2;
    param[i] = static_cast<T>(param[i] - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
  }
}

template <typename T>
void Adam<T>::update(const std::string& name, Tensor<T>& param, const Tensor<T>& grad) {
  if (step_ < 1) throw std::logic_error("Adam::update before begin_step()");
  auto it = slots_.find(name);
  if (it == slots_.end()) {
    it = slots_.emplace(name, AdamSlot<T>{Tensor<T>(param.shape()), Tensor<T>(param.shape())}).first;
  }
  adam_step(param, grad, it->second, step_, opt_);
}

template void sgd_step(Tensor<float>&, const Tensor<float>&, float);
template void sgd_step(Tensor<double>&, const Tensor<double>&, double);
template void adam_step(Tensor<float>&, const Tensor<float>&, AdamSlot<float>&, std::int64_t, const AdamOptions&);
template void adam_step(Tensor<double>&, const Tensor<double>&, AdamSlot<double>&, std::int64_t, const AdamOptions&);
template class Adam<float>;
template class Adam<double>;

}  // namespace ringmo::optim
