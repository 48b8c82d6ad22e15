#include "ringmo/tensor.hpp"

#include <ostream>
#include <sstream>

namespace ringmo {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("buffer of " + std::to_string(data_.size()) + " elements does not fit shape " +
                     shape_str(shape_));
  }
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename T>
std::int64_t Tensor<T>::offset(std::initializer_list<std::int64_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " vs shape " + shape_str(shape_));
  }
  std::int64_t off = 0;
  std::size_t a = 0;
  for (auto i : index) {
    if (i < 0 || i >= shape_[a]) throw std::out_of_range("index out of range for " + shape_str(shape_));
    off = off * shape_[a] + i;
    ++a;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::int64_t> index) {
  return data_[static_cast<std::size_t>(offset(index))];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  return data_[static_cast<std::size_t>(offset(index))];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar shape " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (numel(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
std::ostream& operator<<(std::ostream& os, const Tensor<T>& t) {
  os << "Tensor" << shape_str(t.shape()) << '{';
  const auto n = std::min<std::int64_t>(t.size(), 16);
  for (std::int64_t i = 0; i < n; ++i) {
    if (i) os << ", ";
    os << t[i];
  }
  if (t.size() > n) os << ", ...";
  return os << '}';
}

template class Tensor<float>;
template class Tensor<double>;
template std::ostream& operator<<(std::ostream&, const Tensor<float>&);
template std::ostream& operator<<(std::ostream&, const Tensor<double>&);

}  // namespace ringmo
