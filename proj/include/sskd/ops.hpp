#pragma once

#include <optional>
#include <span>
#include <type_traits>

#include "sskd/tape.hpp"
#include "sskd/tensor.hpp"

// Differentiable operators. Each one records itself on the thread's active
// tape when any input requires a gradient; otherwise it is a plain forward.
// Reductions accumulate in double regardless of T.
namespace sskd::ops {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias, int stride, int padding);

// input [N, in], weight [out, in], bias [out]
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, int kernel, int stride);

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, int kernel, int stride);

// [N, C, H, W] -> [N, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// running_mean / running_var are plain buffers; in training mode they are
// updated in place from the batch statistics, otherwise they are used as the
// normalization statistics.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& options);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor);

// Sum of all elements -> scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);

// Row-wise softmax of logits / temperature. logits [N, C].
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, double temperature = 1.0);

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, double temperature = 1.0);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Sum of squared differences divided by the batch size (leading extent).
template <typename T>
Tensor<T> l2_distance(const Tensor<T>& a, const Tensor<T>& b);

// Corner-aligned bilinear resize of [N, C, H, W] to [N, C, out_h, out_w].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int out_h, int out_w);

// Rows of `input` (leading axis) selected by `rows`, non-differentiable.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& input, std::span<const std::size_t> rows);

}  // namespace sskd::ops
