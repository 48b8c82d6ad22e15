#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ringmo/tensor.hpp"

namespace ringmo {

template <typename T>
class Tape;

/// Handle to an immutable tensor value, optionally tracked on a Tape.
///
/// Untracked vars are constants: ops on them compute values but record
/// nothing, which is how inference runs without retaining intermediates.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tensor<T> value) : value_(std::make_shared<const Tensor<T>>(std::move(value))) {}  // NOLINT

  const Tensor<T>& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  std::int64_t dim(int axis) const { return value_->dim(axis); }
  int rank() const { return value_->rank(); }
  bool defined() const { return static_cast<bool>(value_); }

  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool tracked() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  std::shared_ptr<const Tensor<T>> value_;
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. Entries are appended in execution order, so every
/// input of entry k is a leaf or the output of an entry before k.
template <typename T>
class Tape {
 public:
  /// Receives the output gradient and a per-input "needed" mask; returns one
  /// gradient per input (entries for unneeded inputs are ignored).
  using BackwardFn =
      std::function<std::vector<Tensor<T>>(const Tensor<T>& grad_out, const std::vector<bool>& needed)>;

  struct Entry {
    std::string op;
    std::vector<int> inputs;  // -1 for constants
    int output = -1;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true);

  /// Records `op` if any input requires grad; otherwise returns an untracked
  /// constant holding `output`.
  static Var<T> record(std::string_view op, const std::vector<Var<T>>& inputs, Tensor<T> output,
                       BackwardFn backward);

  /// Reverse sweep from a scalar loss. Gradients accumulate by addition.
  void backward(const Var<T>& loss);

  /// Gradient of a leaf after backward(); zeros if the loss did not depend on it.
  const Tensor<T>& grad(const Var<T>& v) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t num_nodes() const { return nodes_.size(); }

  /// Scales every gradient produced by backward rules named `op`. Used only
  /// to prove that the gradient checker catches a broken rule.
  void inject_fault(std::string op, T scale) {
    fault_op_ = std::move(op);
    fault_scale_ = scale;
  }

 private:
  struct Node {
    Shape shape;
    bool is_leaf = false;
    bool requires_grad = false;
    std::optional<Tensor<T>> grad;
  };

  void accumulate(int id, Tensor<T> g);

  std::vector<Node> nodes_;
  std::vector<Entry> entries_;
  std::optional<std::string> fault_op_;
  T fault_scale_ = T(1);
  bool backward_done_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace ringmo
