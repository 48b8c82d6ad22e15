#include "ringmo/autodiff.hpp"

#include <stdexcept>

namespace ringmo {

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Var<T> v(std::move(value));
  v.tape_ = this;
  v.id_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{v.shape(), true, requires_grad, std::nullopt});
  return v;
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, const std::vector<Var<T>>& inputs, Tensor<T> output,
                       BackwardFn backward) {
  Tape* tape = nullptr;
  bool any_grad = false;
  for (const auto& in : inputs) {
    if (!in.tracked()) continue;
    if (tape && tape != in.tape_) {
      throw std::logic_error(std::string(op) + ": inputs belong to different tapes");
    }
    tape = in.tape_;
    any_grad = any_grad || tape->nodes_[static_cast<std::size_t>(in.id_)].requires_grad;
  }
  Var<T> out(std::move(output));
  if (!tape || !any_grad) return out;
  if (tape->backward_done_) throw std::logic_error("tape already consumed by backward()");

  out.tape_ = tape;
  out.id_ = static_cast<int>(tape->nodes_.size());
  tape->nodes_.push_back(Node{out.shape(), false, true, std::nullopt});

  Entry e;
  e.op = std::string(op);
  e.output = out.id_;
  e.inputs.reserve(inputs.size());
  for (const auto& in : inputs) e.inputs.push_back(in.tracked() ? in.id_ : -1);
  e.backward = std::move(backward);
  tape->entries_.push_back(std::move(e));
  return out;
}

template <typename T>
void Tape<T>::accumulate(int id, Tensor<T> g) {
  auto& node = nodes_[static_cast<std::size_t>(id)];
  if (g.shape() != node.shape) {
    throw std::logic_error("gradient shape " + shape_str(g.shape()) + " does not match node shape " +
                           shape_str(node.shape));
  }
  if (!node.grad) {
    node.grad = std::move(g);
    return;
  }
  auto& acc = node.grad->vec();
  const auto& src = g.vec();
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape_ != this) throw std::invalid_argument("backward: loss is not recorded on this tape");
  if (loss.value().size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (backward_done_) throw std::logic_error("backward() called twice on the same tape");
  backward_done_ = true;

  accumulate(loss.id_, Tensor<T>(loss.shape(), T(1)));

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& out_node = nodes_[static_cast<std::size_t>(it->output)];
    if (!out_node.grad) continue;
    std::vector<bool> needed(it->inputs.size(), false);
    bool any = false;
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const int in = it->inputs[i];
      needed[i] = in >= 0 && nodes_[static_cast<std::size_t>(in)].requires_grad;
      any = any || needed[i];
    }
    if (any) {
      auto grads = it->backward(*out_node.grad, needed);
      for (std::size_t i = 0; i < it->inputs.size(); ++i) {
        if (!needed[i]) continue;
        if (fault_op_ && *fault_op_ == it->op) {
          for (auto& x : grads[i].vec()) x *= fault_scale_;
        }
        accumulate(it->inputs[i], std::move(grads[i]));
      }
    }
    if (!out_node.is_leaf) out_node.grad.reset();
  }

  for (auto& node : nodes_) {
    if (node.is_leaf && node.requires_grad && !node.grad) node.grad = Tensor<T>(node.shape, T(0));
  }
}

template <typename T>
const Tensor<T>& Tape<T>::grad(const Var<T>& v) const {
  if (v.tape_ != this) throw std::invalid_argument("grad: variable is not on this tape");
  const auto& node = nodes_[static_cast<std::size_t>(v.id_)];
  if (!node.is_leaf || !node.requires_grad) throw std::invalid_argument("grad: only leaves with requires_grad");
  if (!node.grad) throw std::logic_error("grad: backward() has not run");
  return *node.grad;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace ringmo
