#include "sskd/distill.hpp"

#include <cmath>

#include <Eigen/Dense>
#include <limits>

#include "sskd/errors.hpp"
#include "sskd/ops.hpp"
#include "sskd/random.hpp"
#include "sskd/tape.hpp"

namespace sskd {

void KDSpec::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("kd temperature must be positive");
  if (!(loss_weight >= 0.0)) throw ConfigError("kd loss weight must be non-negative");
}

template <typename T>
Adapter<T>::Adapter(int student_channels, int teacher_channels, std::optional<std::pair<int, int>> resize_to,
                    int owner_stage, std::uint64_t seed)
    : resize_to_(resize_to), owner_stage_(owner_stage) {
  if (student_channels != teacher_channels) {
    conv_.emplace("adapter" + std::to_string(owner_stage), student_channels, teacher_channels, 1, 1, 0, true);
    conv_->init(seed);
  }
}

template <typename T>
Tensor<T> Adapter<T>::apply(const Tensor<T>& student_feature) const {
  Tensor<T> out = conv_ ? conv_->forward(student_feature) : student_feature;
  if (resize_to_) out = ops::resize_bilinear(out, resize_to_->first, resize_to_->second);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> Adapter<T>::parameters() {
  std::vector<Parameter<T>*> out;
  if (conv_) conv_->collect(out);
  return out;
}

template <typename T>
void Adapter<T>::set_trainable(bool on) {
  for (auto* p : parameters()) p->set_trainable(on);
}

template <typename T>
void Adapter<T>::set_kernel(const std::vector<T>& values) {
  if (!conv_) throw UsageError("adapter has no 1x1 convolution");
  auto dst = conv_->weight().value.values();
  if (values.size() != dst.size()) throw DimensionError("adapter kernel size mismatch");
  std::copy(values.begin(), values.end(), dst.begin());
}

template <typename T>
void Adapter<T>::fit(const Tensor<T>& student_feature, const Tensor<T>& teacher_feature, double ridge) {
  if (!conv_) return;
  const Tensor<T> x = resize_to_ ? ops::resize_bilinear(student_feature.detach(), resize_to_->first, resize_to_->second)
                                 : student_feature.detach();
  if (x.rank() != 4 || teacher_feature.rank() != 4 || x.dim(0) != teacher_feature.dim(0) ||
      x.dim(2) != teacher_feature.dim(2) || x.dim(3) != teacher_feature.dim(3) || x.dim(1) != conv_->in_channels() ||
      teacher_feature.dim(1) != conv_->out_channels()) {
    throw DimensionError("adapter fit: student " + to_string(student_feature.shape()) + " and teacher " +
                         to_string(teacher_feature.shape()) + " do not match the adapter");
  }
  const int n = x.dim(0), cs = x.dim(1), ct = teacher_feature.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  // Normal equations over every (sample, position) row; the last column is the bias.
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(cs + 1, cs + 1);
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(cs + 1, ct);
  Eigen::VectorXd row(cs + 1);
  Eigen::VectorXd target(ct);
  const auto xv = x.values();
  const auto yv = teacher_feature.values();
  for (int i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < hw; ++k) {
      for (int c = 0; c < cs; ++c) row[c] = xv[(static_cast<std::size_t>(i) * cs + c) * hw + k];
      row[cs] = 1.0;
      for (int c = 0; c < ct; ++c) target[c] = yv[(static_cast<std::size_t>(i) * ct + c) * hw + k];
      gram.selfadjointView<Eigen::Lower>().rankUpdate(row);
      cross.noalias() += row * target.transpose();
    }
  }
  gram.template triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  const double scale = gram.diagonal().head(cs).mean();
  gram.diagonal().head(cs).array() += ridge * (scale > 0 ? scale : 1.0);
  const Eigen::MatrixXd solution = gram.ldlt().solve(cross);
  auto kernel = conv_->weight().value.values();
  auto bias = conv_->bias()->value.values();
  for (int t = 0; t < ct; ++t) {
    for (int c = 0; c < cs; ++c) kernel[static_cast<std::size_t>(t) * cs + c] = static_cast<T>(solution(c, t));
    bias[t] = static_cast<T>(solution(cs, t));
  }
}

template <typename T>
std::optional<Adapter<T>> make_adapter(const Shape& teacher_shape, const Shape& student_shape, int owner_stage,
                                       std::uint64_t seed) {
  if (teacher_shape.size() != 4 || student_shape.size() != 4) {
    throw DimensionError("make_adapter: expected [N,C,H,W] shapes, got teacher " + to_string(teacher_shape) +
                         " and student " + to_string(student_shape));
  }
  if (teacher_shape[0] != student_shape[0]) {
    throw DimensionError("make_adapter: batch mismatch between teacher " + to_string(teacher_shape) + " and student " +
                         to_string(student_shape));
  }
  if (teacher_shape == student_shape) return std::nullopt;
  std::optional<std::pair<int, int>> resize;
  if (teacher_shape[2] != student_shape[2] || teacher_shape[3] != student_shape[3]) {
    resize = std::make_pair(teacher_shape[2], teacher_shape[3]);
  }
  return Adapter<T>(student_shape[1], teacher_shape[1], resize, owner_stage,
                    derive_seed(seed, static_cast<std::uint64_t>(owner_stage)));
}

template <typename T>
Tensor<T> mimic_loss(const Tensor<T>& teacher_feature, const Tensor<T>& student_feature, const Adapter<T>* adapter) {
  Tensor<T> adapted = adapter ? adapter->apply(student_feature) : student_feature;
  if (adapted.shape() != teacher_feature.shape()) {
    throw DimensionError("mimic_loss: student feature " + to_string(student_feature.shape()) +
                         (adapter ? " (adapted to " + to_string(adapted.shape()) + ")" : std::string()) +
                         " cannot be compared with teacher feature " + to_string(teacher_feature.shape()));
  }
  const Tensor<T> target = teacher_feature.requires_grad() ? teacher_feature.detach() : teacher_feature;
  return ops::l2_distance(target, adapted);
}

template <typename T>
Tensor<T> kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, const KDSpec& spec) {
  spec.validate();
  if (teacher_logits.shape() != student_logits.shape() || student_logits.rank() != 2) {
    throw DimensionError("kd_loss: teacher logits " + to_string(teacher_logits.shape()) +
                         " and student logits " + to_string(student_logits.shape()) + " must be matching [N,C]");
  }
  const int rows = student_logits.dim(0), cols = student_logits.dim(1);
  const double temperature = spec.temperature;
  const double rescale = spec.t2_rescale ? temperature * temperature : 1.0;

  auto soften = [&](const T* z, std::vector<double>& p, std::vector<double>& logp) {
    p.resize(static_cast<std::size_t>(rows) * cols);
    logp.resize(p.size());
    for (int r = 0; r < rows; ++r) {
      const T* row = z + static_cast<std::size_t>(r) * cols;
      double peak = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < cols; ++j) peak = std::max(peak, row[j] / temperature);
      double denom = 0.0;
      for (int j = 0; j < cols; ++j) denom += std::exp(row[j] / temperature - peak);
      const double log_denom = std::log(denom) + peak;
      for (int j = 0; j < cols; ++j) {
        const std::size_t idx = static_cast<std::size_t>(r) * cols + j;
        logp[idx] = row[j] / temperature - log_denom;
        p[idx] = std::exp(logp[idx]);
      }
    }
  };

  std::vector<double> p, logp, q, logq;
  soften(teacher_logits.data(), p, logp);
  soften(student_logits.data(), q, logq);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) total += p[i] * (logp[i] - logq[i]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(rescale * total / rows));

  Tape<T>* tape = active_tape<T>();
  if (tape && student_logits.requires_grad()) {
    out.set_requires_grad(true);
    auto s = student_logits.storage();
    tape->record("kd_loss", {s}, out.storage(),
                 [s, p = std::move(p), q = std::move(q), rows, temperature, rescale](detail::Storage<T>& o) {
                   T* dz = s->ensure_grad();
                   const double g = o.grad[0] * rescale / (temperature * rows);
                   for (std::size_t i = 0; i < p.size(); ++i) dz[i] += static_cast<T>(g * (q[i] - p[i]));
                 });
  }
  return out;
}

template <typename T>
Tensor<T> joint_kd_objective(const Tensor<T>& task, const Tensor<T>& kd, double weight) {
  if (task.size() != 1 || kd.size() != 1) {
    throw DimensionError("joint_kd_objective: task " + to_string(task.shape()) + " and kd " + to_string(kd.shape()) +
                         " must be scalars");
  }
  return ops::add(task, ops::scale(kd, weight));
}

template <typename T>
void set_frozen(StagedModel<T>& model, const std::set<OwnerId>& owners, bool frozen) {
  const auto valid = model.owners();
  for (OwnerId owner : owners) {
    if (!valid.contains(owner)) {
      throw UsageError("set_frozen: unknown owner " + std::to_string(owner) + " (model has " +
                       std::to_string(model.num_stages()) + " stages plus head 0)");
    }
  }
  for (OwnerId owner : owners) {
    for (auto* p : model.parameters_of(owner)) p->set_trainable(!frozen);
  }
}

template <typename T>
void set_frozen_all(StagedModel<T>& model, bool frozen) {
  set_frozen(model, model.owners(), frozen);
}

#define SSKD_INSTANTIATE_DISTILL(T)                                                                                  \
  template class Adapter<T>;                                                                                         \
  template std::optional<Adapter<T>> make_adapter<T>(const Shape&, const Shape&, int, std::uint64_t);                \
  template Tensor<T> mimic_loss<T>(const Tensor<T>&, const Tensor<T>&, const Adapter<T>*);                           \
  template Tensor<T> kd_loss<T>(const Tensor<T>&, const Tensor<T>&, const KDSpec&);                                  \
  template Tensor<T> joint_kd_objective<T>(const Tensor<T>&, const Tensor<T>&, double);                              \
  template void set_frozen<T>(StagedModel<T>&, const std::set<OwnerId>&, bool);                                      \
  template void set_frozen_all<T>(StagedModel<T>&, bool);

SSKD_INSTANTIATE_DISTILL(float)
SSKD_INSTANTIATE_DISTILL(double)

#undef SSKD_INSTANTIATE_DISTILL

}  // namespace sskd
