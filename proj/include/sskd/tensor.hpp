#pragma once

#include <cstddef>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace sskd {

using Shape = std::vector<int>;

enum class DType { kFloat32, kFloat64 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kFloat32; }
template <>
constexpr DType dtype_of<double>() { return DType::kFloat64; }

// Cache-line aligned buffers. Vectorized kernels peel loops according to the
// address, so without a fixed alignment the summation order (and the last
// bits of results) would depend on allocation history.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

namespace detail {

template <typename T>
struct Storage {
  Shape shape;
  AlignedVector<T> data;
  AlignedVector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  T* ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

// Dense row-major tensor. Copies share the underlying buffer (handle
// semantics) so that the tape can refer to values produced earlier; use
// clone() for an independent deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return s_->shape; }
  int dim(int axis) const;
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::size_t size() const { return s_->data.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> values() { return s_->data; }
  std::span<const T> values() const { return s_->data; }
  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }
  T item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }
  void clear_grad() { s_->grad.clear(); }

  // New storage with the same values and no gradient linkage.
  Tensor clone() const;
  Tensor detach() const { return clone(); }
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const std::shared_ptr<detail::Storage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<detail::Storage<T>> s_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace sskd
