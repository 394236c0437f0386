#include "sskd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "sskd/errors.hpp"

namespace sskd::ops {
namespace {

template <typename T>
using Storage = detail::Storage<T>;
template <typename T>
using StoragePtr = std::shared_ptr<Storage<T>>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t && t->requires_grad(); });
}

template <typename T>
void record(const char* op, std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& out,
            typename Tape<T>::BackwardFn fn) {
  out.set_requires_grad(true);
  std::vector<StoragePtr<T>> storages;
  for (const Tensor<T>* t : inputs) {
    if (t) storages.push_back(t->storage());
  }
  active_tape<T>()->record(op, std::move(storages), out.storage(), std::move(fn));
}

void require_rank(const Shape& shape, int rank, const char* op, const char* what) {
  if (static_cast<int>(shape.size()) != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         to_string(shape));
  }
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

int pooled_extent(int in, int kernel, int stride, int padding, const char* op) {
  if (stride < 1) throw ConfigError(std::string(op) + ": stride must be >= 1");
  if (padding < 0) throw ConfigError(std::string(op) + ": padding must be >= 0");
  const int span = in + 2 * padding - kernel;
  if (span < 0) {
    throw ConfigError(std::string(op) + ": kernel " + std::to_string(kernel) + " larger than padded extent " +
                      std::to_string(in + 2 * padding));
  }
  if (span % stride != 0) {
    throw ConfigError(std::string(op) + ": output extent (" + std::to_string(in) + " + 2*" + std::to_string(padding) +
                      " - " + std::to_string(kernel) + ")/" + std::to_string(stride) + " + 1 is not an integer");
  }
  return span / stride + 1;
}

struct ConvGeometry {
  int channels, height, width, kh, kw, stride, padding, out_h, out_w;
  int patch() const { return channels * kh * kw; }
  int positions() const { return out_h * out_w; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

// Range [lo, hi) of output columns whose input column ox*stride - pad + k
// falls inside [0, extent).
std::pair<int, int> valid_columns(int k, int extent, int out, int stride, int padding) {
  int lo = 0;
  while (lo < out && lo * stride - padding + k < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride - padding + k >= extent) --hi;
  return {lo, hi};
}

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const int positions = g.positions();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * positions;
        const auto [lo, hi] = valid_columns(kx, g.width, g.out_w, g.stride, g.padding);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + g.out_w, T(0));
          const T* src = image + (static_cast<std::size_t>(c) * g.height + iy) * g.width - g.padding + kx;
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  const int positions = g.positions();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * positions;
        const auto [lo, hi] = valid_columns(kx, g.width, g.out_w, g.stride, g.padding);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = image + (static_cast<std::size_t>(c) * g.height + iy) * g.width - g.padding + kx;
          const T* src = row + oy * g.out_w;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

template <typename T>
double accumulate(std::span<const T> values) {
  double total = 0.0;
  for (T v : values) total += static_cast<double>(v);
  return total;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias, int stride, int padding) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (input.dim(1) != weight.dim(1)) {
    throw DimensionError("conv2d: input channels of " + to_string(input.shape()) + " do not match weight " +
                         to_string(weight.shape()));
  }
  const int out_channels = weight.dim(0);
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_channels)) {
    throw DimensionError("conv2d: bias " + to_string(bias->shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
  g.out_h = pooled_extent(g.height, g.kh, stride, padding, "conv2d");
  g.out_w = pooled_extent(g.width, g.kw, stride, padding, "conv2d");

  const int batch = input.dim(0);
  const int patch = g.patch();
  const int positions = g.positions();
  const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(out_channels) * positions;

  Tensor<T> out(Shape{batch, out_channels, g.out_h, g.out_w});
  AlignedVector<T> cols(g.is_pointwise() ? 0 : static_cast<std::size_t>(patch) * positions);
  ConstMatMap<T> w(weight.data(), out_channels, patch);
  for (int n = 0; n < batch; ++n) {
    const T* x = input.data() + n * in_stride;
    const T* col_data = x;
    if (!g.is_pointwise()) {
      im2col(x, g, cols.data());
      col_data = cols.data();
    }
    MatMap<T> y(out.data() + n * out_stride, out_channels, positions);
    y.noalias() = w * ConstMatMap<T>(col_data, patch, positions);
    if (bias) {
      for (int o = 0; o < out_channels; ++o) y.row(o).array() += bias->data()[o];
    }
  }

  if (recording<T>({&input, &weight, bias})) {
    auto in_s = input.storage();
    auto w_s = weight.storage();
    StoragePtr<T> b_s = bias ? bias->storage() : nullptr;
    record<T>("conv2d", {&input, &weight, bias}, out, [=](Storage<T>& o) {
      AlignedVector<T> cols(g.is_pointwise() ? 0 : static_cast<std::size_t>(patch) * positions);
      AlignedVector<T> dcols(static_cast<std::size_t>(patch) * positions);
      ConstMatMap<T> w(w_s->data.data(), out_channels, patch);
      for (int n = 0; n < batch; ++n) {
        ConstMatMap<T> dy(o.grad.data() + n * out_stride, out_channels, positions);
        if (w_s->requires_grad) {
          const T* x = in_s->data.data() + n * in_stride;
          const T* col_data = x;
          if (!g.is_pointwise()) {
            im2col(x, g, cols.data());
            col_data = cols.data();
          }
          MatMap<T> dw(w_s->ensure_grad(), out_channels, patch);
          dw.noalias() += dy * ConstMatMap<T>(col_data, patch, positions).transpose();
        }
        if (b_s && b_s->requires_grad) {
          T* db = b_s->ensure_grad();
          for (int c = 0; c < out_channels; ++c) db[c] += dy.row(c).sum();
        }
        if (in_s->requires_grad) {
          T* dx = in_s->ensure_grad() + n * in_stride;
          if (g.is_pointwise()) {
            MatMap<T>(dx, patch, positions).noalias() += w.transpose() * dy;
          } else {
            MatMap<T>(dcols.data(), patch, positions).noalias() = w.transpose() * dy;
            col2im_add(dcols.data(), g, dx);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias) {
  require_rank(input.shape(), 2, "linear", "input");
  require_rank(weight.shape(), 2, "linear", "weight");
  if (input.dim(1) != weight.dim(1)) {
    throw DimensionError("linear: input " + to_string(input.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  const int batch = input.dim(0), in_features = input.dim(1), out_features = weight.dim(0);
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_features)) {
    throw DimensionError("linear: bias " + to_string(bias->shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  Tensor<T> out(Shape{batch, out_features});
  MatMap<T> y(out.data(), batch, out_features);
  y.noalias() = ConstMatMap<T>(input.data(), batch, in_features) *
                ConstMatMap<T>(weight.data(), out_features, in_features).transpose();
  if (bias) {
    for (int n = 0; n < batch; ++n) {
      for (int o = 0; o < out_features; ++o) y(n, o) += bias->data()[o];
    }
  }
  if (recording<T>({&input, &weight, bias})) {
    auto in_s = input.storage();
    auto w_s = weight.storage();
    StoragePtr<T> b_s = bias ? bias->storage() : nullptr;
    record<T>("linear", {&input, &weight, bias}, out, [=](Storage<T>& o) {
      ConstMatMap<T> dy(o.grad.data(), batch, out_features);
      if (in_s->requires_grad) {
        MatMap<T>(in_s->ensure_grad(), batch, in_features).noalias() +=
            dy * ConstMatMap<T>(w_s->data.data(), out_features, in_features);
      }
      if (w_s->requires_grad) {
        MatMap<T>(w_s->ensure_grad(), out_features, in_features).noalias() +=
            dy.transpose() * ConstMatMap<T>(in_s->data.data(), batch, in_features);
      }
      if (b_s && b_s->requires_grad) {
        T* db = b_s->ensure_grad();
        for (int n = 0; n < batch; ++n) {
          for (int c = 0; c < out_features; ++c) db[c] += dy(n, c);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const T* x = input.data();
  T* y = out.data();
  for (std::size_t i = 0; i < input.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  if (recording<T>({&input})) {
    auto in_s = input.storage();
    record<T>("relu", {&input}, out, [in_s](Storage<T>& o) {
      T* dx = in_s->ensure_grad();
      const T* x = in_s->data.data();
      const T* dy = o.grad.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) dx[i] += x[i] > T(0) ? dy[i] : T(0);
    });
  }
  return out;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, int kernel, int stride) {
  require_rank(input.shape(), 4, "max_pool2d", "input");
  const int planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oh = pooled_extent(h, kernel, stride, 0, "max_pool2d");
  const int ow = pooled_extent(w, kernel, stride, 0, "max_pool2d");
  Tensor<T> out(Shape{input.dim(0), input.dim(1), oh, ow});
  std::vector<std::size_t> argmax(out.size());
  for (int p = 0; p < planes; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        std::size_t best = base + static_cast<std::size_t>(oy * stride) * w + ox * stride;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = base + static_cast<std::size_t>(oy * stride + ky) * w + ox * stride + kx;
            if (input.data()[idx] > input.data()[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(p) * oh + oy) * ow + ox;
        argmax[o] = best;
        out.data()[o] = input.data()[best];
      }
    }
  }
  if (recording<T>({&input})) {
    auto in_s = input.storage();
    record<T>("max_pool2d", {&input}, out, [in_s, argmax = std::move(argmax)](Storage<T>& o) {
      T* dx = in_s->ensure_grad();
      for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += o.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, int kernel, int stride) {
  require_rank(input.shape(), 4, "avg_pool2d", "input");
  const int planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oh = pooled_extent(h, kernel, stride, 0, "avg_pool2d");
  const int ow = pooled_extent(w, kernel, stride, 0, "avg_pool2d");
  const double inv_area = 1.0 / (kernel * kernel);
  Tensor<T> out(Shape{input.dim(0), input.dim(1), oh, ow});
  for (int p = 0; p < planes; ++p) {
    const T* x = input.data() + static_cast<std::size_t>(p) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) acc += x[(oy * stride + ky) * w + ox * stride + kx];
        }
        out.data()[(static_cast<std::size_t>(p) * oh + oy) * ow + ox] = static_cast<T>(acc * inv_area);
      }
    }
  }
  if (recording<T>({&input})) {
    auto in_s = input.storage();
    record<T>("avg_pool2d", {&input}, out, [=](Storage<T>& o) {
      T* dx_all = in_s->ensure_grad();
      for (int p = 0; p < planes; ++p) {
        T* dx = dx_all + static_cast<std::size_t>(p) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const T g = static_cast<T>(o.grad[(static_cast<std::size_t>(p) * oh + oy) * ow + ox] * inv_area);
            for (int ky = 0; ky < kernel; ++ky) {
              for (int kx = 0; kx < kernel; ++kx) dx[(oy * stride + ky) * w + ox * stride + kx] += g;
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank(input.shape(), 4, "global_avg_pool", "input");
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t area = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  Tensor<T> out(Shape{n, c});
  for (std::size_t p = 0; p < out.size(); ++p) {
    out.data()[p] = static_cast<T>(accumulate<T>({input.data() + p * area, area}) / static_cast<double>(area));
  }
  if (recording<T>({&input})) {
    auto in_s = input.storage();
    record<T>("global_avg_pool", {&input}, out, [in_s, area](Storage<T>& o) {
      T* dx = in_s->ensure_grad();
      for (std::size_t p = 0; p < o.grad.size(); ++p) {
        const T g = static_cast<T>(o.grad[p] / static_cast<double>(area));
        for (std::size_t i = 0; i < area; ++i) dx[p * area + i] += g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& options) {
  require_rank(input.shape(), 4, "batch_norm2d", "input");
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t area = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  for (const Tensor<T>* t : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean), static_cast<const Tensor<T>*>(&running_var)}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw DimensionError("batch_norm2d: per-channel tensor " + to_string(t->shape()) + " does not match input " +
                           to_string(input.shape()));
    }
  }
  const std::size_t count = static_cast<std::size_t>(n) * area;
  if (options.training && count < 2) {
    throw DimensionError("batch_norm2d: training mode needs more than one value per channel, input " +
                         to_string(input.shape()));
  }

  std::vector<double> mean(c), inv_std(c);
  if (options.training) {
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int b = 0; b < n; ++b) {
        const T* x = input.data() + (static_cast<std::size_t>(b) * c + ch) * area;
        for (std::size_t i = 0; i < area; ++i) s += x[i];
      }
      const double mu = s / static_cast<double>(count);
      double sq = 0.0;
      for (int b = 0; b < n; ++b) {
        const T* x = input.data() + (static_cast<std::size_t>(b) * c + ch) * area;
        for (std::size_t i = 0; i < area; ++i) {
          const double d = x[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + options.eps);
      const double unbiased = sq / static_cast<double>(count - 1);
      T& rm = running_mean.data()[ch];
      T& rv = running_var.data()[ch];
      rm = static_cast<T>((1.0 - options.momentum) * rm + options.momentum * mu);
      rv = static_cast<T>((1.0 - options.momentum) * rv + options.momentum * unbiased);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean.data()[ch];
      inv_std[ch] = 1.0 / std::sqrt(static_cast<double>(running_var.data()[ch]) + options.eps);
    }
  }

  Tensor<T> out(input.shape());
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * area;
      const T scale = static_cast<T>(gamma.data()[ch] * inv_std[ch]);
      const T shift = static_cast<T>(beta.data()[ch] - gamma.data()[ch] * mean[ch] * inv_std[ch]);
      const T* x = input.data() + off;
      T* y = out.data() + off;
      for (std::size_t i = 0; i < area; ++i) y[i] = x[i] * scale + shift;
    }
  }

  if (recording<T>({&input, &gamma, &beta})) {
    auto in_s = input.storage();
    auto g_s = gamma.storage();
    auto b_s = beta.storage();
    const bool training = options.training;
    record<T>("batch_norm2d", {&input, &gamma, &beta}, out, [=](Storage<T>& o) {
      AlignedVector<T> xhat(area);
      for (int ch = 0; ch < c; ++ch) {
        const T mu = static_cast<T>(mean[ch]);
        const T istd = static_cast<T>(inv_std[ch]);
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int b = 0; b < n; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * area;
          const T* x = in_s->data.data() + off;
          const T* dy = o.grad.data() + off;
          for (std::size_t i = 0; i < area; ++i) xhat[i] = (x[i] - mu) * istd;
          sum_dy += accumulate<T>({dy, area});
          double dot = 0.0;
          for (std::size_t i = 0; i < area; ++i) dot += static_cast<double>(dy[i] * xhat[i]);
          sum_dy_xhat += dot;
        }
        if (g_s->requires_grad) g_s->ensure_grad()[ch] += static_cast<T>(sum_dy_xhat);
        if (b_s->requires_grad) b_s->ensure_grad()[ch] += static_cast<T>(sum_dy);
        if (!in_s->requires_grad) continue;
        T* dx_all = in_s->ensure_grad();
        const double m = static_cast<double>(count);
        const T k = static_cast<T>(g_s->data[ch] * inv_std[ch]);
        const T mean_dy = training ? static_cast<T>(sum_dy / m) : T(0);
        const T mean_dy_xhat = training ? static_cast<T>(sum_dy_xhat / m) : T(0);
        for (int b = 0; b < n; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * area;
          const T* x = in_s->data.data() + off;
          const T* dy = o.grad.data() + off;
          T* dx = dx_all + off;
          for (std::size_t i = 0; i < area; ++i) {
            const T xh = (x[i] - mu) * istd;
            dx[i] += k * (dy[i] - mean_dy - xh * mean_dy_xhat);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (recording<T>({&a, &b})) {
    auto a_s = a.storage();
    auto b_s = b.storage();
    record<T>("add", {&a, &b}, out, [a_s, b_s](Storage<T>& o) {
      for (auto* s : {a_s.get(), b_s.get()}) {
        if (!s->requires_grad) continue;
        T* d = s->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) d[i] += o.grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (recording<T>({&a, &b})) {
    auto a_s = a.storage();
    auto b_s = b.storage();
    record<T>("mul", {&a, &b}, out, [a_s, b_s](Storage<T>& o) {
      if (a_s->requires_grad) {
        T* d = a_s->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) d[i] += o.grad[i] * b_s->data[i];
      }
      if (b_s->requires_grad) {
        T* d = b_s->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) d[i] += o.grad[i] * a_s->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  Tensor<T> out(a.shape());
  const T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * f;
  if (recording<T>({&a})) {
    auto a_s = a.storage();
    record<T>("scale", {&a}, out, [a_s, f](Storage<T>& o) {
      T* d = a_s->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) d[i] += o.grad[i] * f;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(accumulate<T>(a.values())));
  if (recording<T>({&a})) {
    auto a_s = a.storage();
    record<T>("sum", {&a}, out, [a_s](Storage<T>& o) {
      T* d = a_s->ensure_grad();
      for (std::size_t i = 0; i < a_s->data.size(); ++i) d[i] += o.grad[0];
    });
  }
  return out;
}

namespace {

// Writes softmax(z / temperature) row-wise into probs (computed in double).
template <typename T>
void softmax_rows(const T* logits, int rows, int cols, double temperature, std::vector<double>& probs,
                  std::vector<double>* log_probs = nullptr) {
  probs.resize(static_cast<std::size_t>(rows) * cols);
  if (log_probs) log_probs->resize(probs.size());
  for (int r = 0; r < rows; ++r) {
    const T* z = logits + static_cast<std::size_t>(r) * cols;
    double peak = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < cols; ++j) peak = std::max(peak, z[j] / temperature);
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) denom += std::exp(z[j] / temperature - peak);
    const double log_denom = std::log(denom) + peak;
    for (int j = 0; j < cols; ++j) {
      const double lp = z[j] / temperature - log_denom;
      probs[static_cast<std::size_t>(r) * cols + j] = std::exp(lp);
      if (log_probs) (*log_probs)[static_cast<std::size_t>(r) * cols + j] = lp;
    }
  }
}

void require_temperature(double temperature, const char* op) {
  if (!(temperature > 0.0)) throw ConfigError(std::string(op) + ": temperature must be positive");
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, double temperature) {
  require_rank(logits.shape(), 2, "softmax", "logits");
  require_temperature(temperature, "softmax");
  const int rows = logits.dim(0), cols = logits.dim(1);
  std::vector<double> probs;
  softmax_rows(logits.data(), rows, cols, temperature, probs);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < probs.size(); ++i) out.data()[i] = static_cast<T>(probs[i]);
  if (recording<T>({&logits})) {
    auto in_s = logits.storage();
    record<T>("softmax", {&logits}, out, [=](Storage<T>& o) {
      T* dz = in_s->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += o.grad[off + j] * probs[off + j];
        for (int j = 0; j < cols; ++j) {
          dz[off + j] += static_cast<T>(probs[off + j] * (o.grad[off + j] - dot) / temperature);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, double temperature) {
  require_rank(logits.shape(), 2, "log_softmax", "logits");
  require_temperature(temperature, "log_softmax");
  const int rows = logits.dim(0), cols = logits.dim(1);
  std::vector<double> probs, log_probs;
  softmax_rows(logits.data(), rows, cols, temperature, probs, &log_probs);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < log_probs.size(); ++i) out.data()[i] = static_cast<T>(log_probs[i]);
  if (recording<T>({&logits})) {
    auto in_s = logits.storage();
    record<T>("log_softmax", {&logits}, out, [=](Storage<T>& o) {
      T* dz = in_s->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * cols;
        double total = 0.0;
        for (int j = 0; j < cols; ++j) total += o.grad[off + j];
        for (int j = 0; j < cols; ++j) {
          dz[off + j] += static_cast<T>((o.grad[off + j] - probs[off + j] * total) / temperature);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy", "logits");
  const int rows = logits.dim(0), cols = logits.dim(1);
  if (static_cast<int>(labels.size()) != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(logits.shape()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= cols) {
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at index " +
                            std::to_string(i) + " outside [0, " + std::to_string(cols) + ")");
    }
  }
  std::vector<double> probs, log_probs;
  softmax_rows(logits.data(), rows, cols, 1.0, probs, &log_probs);
  double total = 0.0;
  for (int r = 0; r < rows; ++r) total -= log_probs[static_cast<std::size_t>(r) * cols + labels[r]];
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / rows));
  if (recording<T>({&logits})) {
    auto in_s = logits.storage();
    std::vector<int> targets(labels.begin(), labels.end());
    record<T>("softmax_cross_entropy", {&logits}, out,
              [=, targets = std::move(targets), probs = std::move(probs)](Storage<T>& o) {
                T* dz = in_s->ensure_grad();
                const double g = o.grad[0] / rows;
                for (int r = 0; r < rows; ++r) {
                  for (int j = 0; j < cols; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(r) * cols + j;
                    const double onehot = (j == targets[r]) ? 1.0 : 0.0;
                    dz[idx] += static_cast<T>(g * (probs[idx] - onehot));
                  }
                }
              });
  }
  return out;
}

template <typename T>
Tensor<T> l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "l2_distance");
  const int batch = a.rank() == 0 ? 1 : a.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    total += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / batch));
  if (recording<T>({&a, &b})) {
    auto a_s = a.storage();
    auto b_s = b.storage();
    record<T>("l2_distance", {&a, &b}, out, [a_s, b_s, batch](Storage<T>& o) {
      const double g = 2.0 * o.grad[0] / batch;
      T* da = a_s->requires_grad ? a_s->ensure_grad() : nullptr;
      T* db = b_s->requires_grad ? b_s->ensure_grad() : nullptr;
      for (std::size_t i = 0; i < a_s->data.size(); ++i) {
        const double d = g * (static_cast<double>(a_s->data[i]) - static_cast<double>(b_s->data[i]));
        if (da) da[i] += static_cast<T>(d);
        if (db) db[i] -= static_cast<T>(d);
      }
    });
  }
  return out;
}

namespace {

struct LerpTap {
  int lo, hi;
  double frac;
};

std::vector<LerpTap> corner_aligned_taps(int in, int out) {
  std::vector<LerpTap> taps(out);
  for (int i = 0; i < out; ++i) {
    const double src = out > 1 ? static_cast<double>(i) * (in - 1) / (out - 1) : 0.0;
    const int lo = std::min(static_cast<int>(std::floor(src)), in - 1);
    taps[i] = LerpTap{lo, std::min(lo + 1, in - 1), src - lo};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int out_h, int out_w) {
  require_rank(input.shape(), 4, "resize_bilinear", "input");
  if (out_h < 1 || out_w < 1) {
    throw DimensionError("resize_bilinear: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " must be at least 1x1");
  }
  const int planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto ty = corner_aligned_taps(h, out_h);
  const auto tx = corner_aligned_taps(w, out_w);
  Tensor<T> out(Shape{input.dim(0), input.dim(1), out_h, out_w});
  for (int p = 0; p < planes; ++p) {
    const T* x = input.data() + static_cast<std::size_t>(p) * h * w;
    T* y = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      for (int j = 0; j < out_w; ++j) {
        const auto& a = ty[i];
        const auto& b = tx[j];
        const double top = (1.0 - b.frac) * x[a.lo * w + b.lo] + b.frac * x[a.lo * w + b.hi];
        const double bottom = (1.0 - b.frac) * x[a.hi * w + b.lo] + b.frac * x[a.hi * w + b.hi];
        y[i * out_w + j] = static_cast<T>((1.0 - a.frac) * top + a.frac * bottom);
      }
    }
  }
  if (recording<T>({&input})) {
    auto in_s = input.storage();
    record<T>("resize_bilinear", {&input}, out, [=](Storage<T>& o) {
      T* dx_all = in_s->ensure_grad();
      for (int p = 0; p < planes; ++p) {
        T* dx = dx_all + static_cast<std::size_t>(p) * h * w;
        const T* dy = o.grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
          for (int j = 0; j < out_w; ++j) {
            const auto& a = ty[i];
            const auto& b = tx[j];
            const double g = dy[i * out_w + j];
            dx[a.lo * w + b.lo] += static_cast<T>(g * (1.0 - a.frac) * (1.0 - b.frac));
            dx[a.lo * w + b.hi] += static_cast<T>(g * (1.0 - a.frac) * b.frac);
            dx[a.hi * w + b.lo] += static_cast<T>(g * a.frac * (1.0 - b.frac));
            dx[a.hi * w + b.hi] += static_cast<T>(g * a.frac * b.frac);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& input, std::span<const std::size_t> rows) {
  if (input.rank() < 1) throw DimensionError("gather_rows: scalar input");
  Shape shape = input.shape();
  const std::size_t row_size = input.size() / static_cast<std::size_t>(shape[0]);
  for (std::size_t r : rows) {
    if (r >= static_cast<std::size_t>(shape[0])) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " + to_string(shape));
    }
  }
  shape[0] = static_cast<int>(rows.size());
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(input.data() + rows[i] * row_size, row_size, out.data() + i * row_size);
  }
  return out;
}

#define SSKD_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, int, int);                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                           \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> max_pool2d(const Tensor<T>&, int, int);                                                 \
  template Tensor<T> avg_pool2d(const Tensor<T>&, int, int);                                                 \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                      \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, \
                                  const BatchNormOptions&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> scale(const Tensor<T>&, double);                                                        \
  template Tensor<T> sum(const Tensor<T>&);                                                                  \
  template Tensor<T> softmax(const Tensor<T>&, double);                                                      \
  template Tensor<T> log_softmax(const Tensor<T>&, double);                                                  \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);                          \
  template Tensor<T> l2_distance(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);                                            \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);

SSKD_INSTANTIATE_OPS(float)
SSKD_INSTANTIATE_OPS(double)

#undef SSKD_INSTANTIATE_OPS

}  // namespace sskd::ops
