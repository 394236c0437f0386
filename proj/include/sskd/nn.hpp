#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sskd/ops.hpp"
#include "sskd/tensor.hpp"

namespace sskd {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) { value.set_requires_grad(true); }

  // Frozen parameters stop accumulating gradients; gradients still flow
  // through the ops that consume them.
  void set_trainable(bool on) {
    trainable = on;
    value.set_requires_grad(on);
    if (!on) value.clear_grad();
  }
};

// Non-trainable state that is serialized with the model.
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

// He-style normal initialization, std = sqrt(2 / fan_in).
template <typename T>
void init_fan_in_normal(Tensor<T>& weight, int fan_in, std::mt19937_64& rng);

template <typename T>
class Conv2d {
 public:
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int padding, bool bias);

  Tensor<T> forward(const Tensor<T>& x) const;
  void init(std::uint64_t seed);
  void collect(std::vector<Parameter<T>*>& out);

  int in_channels() const { return weight_.value.dim(1); }
  int out_channels() const { return weight_.value.dim(0); }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>* bias() { return bias_ ? &*bias_ : nullptr; }

 private:
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
  int stride_;
  int padding_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d(const std::string& name, int channels);

  // Batch statistics are used (and running statistics updated) only when
  // `training` is set and the layer's own parameters are trainable; a frozen
  // layer always runs in inference mode.
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void init();
  void collect(std::vector<Parameter<T>*>& out);
  void collect(std::vector<Buffer<T>*>& out);

 private:
  Parameter<T> gamma_;
  Parameter<T> beta_;
  Buffer<T> running_mean_;
  Buffer<T> running_var_;
};

template <typename T>
class Linear {
 public:
  Linear(const std::string& name, int in_features, int out_features);

  Tensor<T> forward(const Tensor<T>& x) const;
  void init(std::uint64_t seed);
  void collect(std::vector<Parameter<T>*>& out);

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
};

extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class BatchNorm2d<float>;
extern template class BatchNorm2d<double>;
extern template class Linear<float>;
extern template class Linear<double>;

}  // namespace sskd
