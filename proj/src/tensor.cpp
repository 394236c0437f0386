#include "sskd/tensor.hpp"

#include <functional>
#include <numeric>
#include <sstream>

#include "sskd/errors.hpp"

namespace sskd {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (int extent : shape) {
    if (extent <= 0) throw DimensionError("non-positive extent in shape " + to_string(shape));
    n *= static_cast<std::size_t>(extent);
  }
  return n;
}

template <typename T>
Tensor<T>::Tensor() : s_(std::make_shared<detail::Storage<T>>()) {
  s_->data.assign(1, T(0));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : s_(std::make_shared<detail::Storage<T>>()) {
  s_->data.assign(element_count(shape), fill);
  s_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<detail::Storage<T>>()) {
  if (element_count(shape) != values.size()) {
    throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(element_count(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  s_->shape = std::move(shape);
  s_->data.assign(values.begin(), values.end());
}

template <typename T>
int Tensor<T>::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return s_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return s_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(s_->shape);
  out.s_->data = s_->data;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (element_count(shape) != size()) {
    throw DimensionError("cannot reshape " + to_string(this->shape()) + " to " + to_string(shape));
  }
  Tensor out(std::move(shape));
  out.s_->data = s_->data;
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace sskd
