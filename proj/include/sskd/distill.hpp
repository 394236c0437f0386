#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "sskd/model.hpp"
#include "sskd/nn.hpp"
#include "sskd/tensor.hpp"

namespace sskd {

struct KDSpec {
  double temperature = 4.0;
  double loss_weight = 1.0;
  bool t2_rescale = true;

  void validate() const;
};

// Training-only bridge from a student stage output to the teacher's shape:
// a bias-free 1x1 convolution when channel counts differ, then a
// corner-aligned bilinear resize when resolutions differ.
template <typename T>
class Adapter {
 public:
  Adapter(int student_channels, int teacher_channels, std::optional<std::pair<int, int>> resize_to, int owner_stage,
          std::uint64_t seed);

  Tensor<T> apply(const Tensor<T>& student_feature) const;
  std::vector<Parameter<T>*> parameters();
  bool has_conv() const { return conv_.has_value(); }
  std::optional<std::pair<int, int>> resize_to() const { return resize_to_; }
  int owner_stage() const { return owner_stage_; }
  void set_trainable(bool on);
  // Overwrites the 1x1 kernel (shape [C_t, C_s]); used for fixed embeddings.
  void set_kernel(const std::vector<T>& values);
  // Ridge least-squares fit of kernel and bias mapping `student_feature` to
  // `teacher_feature`. No-op for resize-only adapters.
  void fit(const Tensor<T>& student_feature, const Tensor<T>& teacher_feature, double ridge = 1e-3);

 private:
  std::optional<Conv2d<T>> conv_;
  std::optional<std::pair<int, int>> resize_to_;
  int owner_stage_;
};

// Absent when the shapes already agree. Both shapes are [N, C, H, W].
template <typename T>
std::optional<Adapter<T>> make_adapter(const Shape& teacher_shape, const Shape& student_shape, int owner_stage,
                                       std::uint64_t seed);

// Squared l2 distance (batch-normalized) between the fixed teacher feature
// and the adapted student feature. No gradient reaches the teacher side.
template <typename T>
Tensor<T> mimic_loss(const Tensor<T>& teacher_feature, const Tensor<T>& student_feature,
                     const Adapter<T>* adapter = nullptr);

// KL(softmax(teacher / T) || softmax(student / T)) averaged over the batch,
// times T^2 when spec.t2_rescale is set. Differentiable in the student only.
template <typename T>
Tensor<T> kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, const KDSpec& spec);

// task + weight * kd
template <typename T>
Tensor<T> joint_kd_objective(const Tensor<T>& task, const Tensor<T>& kd, double weight);

// Flips the trainable flag of every parameter owned by `owners`. Frozen
// batch-norm layers switch to running statistics automatically.
template <typename T>
void set_frozen(StagedModel<T>& model, const std::set<OwnerId>& owners, bool frozen);

template <typename T>
void set_frozen_all(StagedModel<T>& model, bool frozen);

extern template class Adapter<float>;
extern template class Adapter<double>;

}  // namespace sskd
