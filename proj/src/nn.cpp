#include "sskd/nn.hpp"

#include <cmath>

#include "sskd/random.hpp"

namespace sskd {

template <typename T>
void init_fan_in_normal(Tensor<T>& weight, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : weight.values()) v = static_cast<T>(dist(rng));
}

template void init_fan_in_normal<float>(Tensor<float>&, int, std::mt19937_64&);
template void init_fan_in_normal<double>(Tensor<double>&, int, std::mt19937_64&);

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int padding,
                  bool bias)
    : weight_(name + ".weight", Tensor<T>(Shape{out_channels, in_channels, kernel, kernel})),
      stride_(stride),
      padding_(padding) {
  if (bias) bias_.emplace(name + ".bias", Tensor<T>(Shape{out_channels}));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return ops::conv2d(x, weight_.value, bias_ ? &bias_->value : nullptr, stride_, padding_);
}

template <typename T>
void Conv2d<T>::init(std::uint64_t seed) {
  auto rng = make_rng(seed, weight_.name);
  const auto& s = weight_.value.shape();
  init_fan_in_normal(weight_.value, s[1] * s[2] * s[3], rng);
  if (bias_) std::fill(bias_->value.values().begin(), bias_->value.values().end(), T(0));
}

template <typename T>
void Conv2d<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight_);
  if (bias_) out.push_back(&*bias_);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(const std::string& name, int channels)
    : gamma_(name + ".weight", Tensor<T>(Shape{channels}, T(1))),
      beta_(name + ".bias", Tensor<T>(Shape{channels}, T(0))),
      running_mean_{name + ".running_mean", Tensor<T>(Shape{channels}, T(0))},
      running_var_{name + ".running_var", Tensor<T>(Shape{channels}, T(1))} {}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool training) {
  ops::BatchNormOptions options;
  options.training = training && gamma_.trainable;
  return ops::batch_norm2d(x, gamma_.value, beta_.value, running_mean_.value, running_var_.value, options);
}

template <typename T>
void BatchNorm2d<T>::init() {
  for (auto* t : {&gamma_.value, &running_var_.value}) std::fill(t->values().begin(), t->values().end(), T(1));
  for (auto* t : {&beta_.value, &running_mean_.value}) std::fill(t->values().begin(), t->values().end(), T(0));
}

template <typename T>
void BatchNorm2d<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

template <typename T>
void BatchNorm2d<T>::collect(std::vector<Buffer<T>*>& out) {
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

template <typename T>
Linear<T>::Linear(const std::string& name, int in_features, int out_features)
    : weight_(name + ".weight", Tensor<T>(Shape{out_features, in_features})),
      bias_(name + ".bias", Tensor<T>(Shape{out_features})) {}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return ops::linear(x, weight_.value, &bias_.value);
}

template <typename T>
void Linear<T>::init(std::uint64_t seed) {
  auto rng = make_rng(seed, weight_.name);
  init_fan_in_normal(weight_.value, weight_.value.dim(1), rng);
  std::fill(bias_.value.values().begin(), bias_.value.values().end(), T(0));
}

template <typename T>
void Linear<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class Linear<float>;
template class Linear<double>;

}  // namespace sskd
