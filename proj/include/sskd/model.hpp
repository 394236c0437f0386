#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "sskd/nn.hpp"
#include "sskd/tensor.hpp"

namespace sskd {

enum class Family { kPlainCnn, kResidualCnn };

std::string to_string(Family family);
Family parse_family(const std::string& text);

struct ModelConfig {
  Family family = Family::kResidualCnn;
  int input_h = 32;
  int input_w = 32;
  int input_channels = 3;
  int num_classes = 10;
  std::vector<int> stage_widths;
  std::vector<int> blocks_per_stage;
  // Max-pool factor applied at the end of the stem (1 = none).
  int stem_pool = 1;

  int num_stages() const { return static_cast<int>(stage_widths.size()); }
  // Throws ConfigError describing the first inconsistency.
  void validate() const;
  // Spatial extent (h, w) of each native stage output.
  std::vector<std::pair<int, int>> stage_resolutions() const;

  bool operator==(const ModelConfig&) const = default;
};

// Desk-scale reference pair: deeper/wider teacher, narrow single-block student.
ModelConfig desk_teacher_config(int input_hw = 32, int input_channels = 3, int num_classes = 10);
ModelConfig desk_student_config(int input_hw = 32, int input_channels = 3, int num_classes = 10);

// Owner id of a parameter: stage index 1..K, or kHeadOwner for the task head.
using OwnerId = int;
inline constexpr OwnerId kHeadOwner = 0;

// One contiguous piece of the backbone (stem or block). Units are the
// granularity at which stages are split or merged.
template <typename T>
class Unit {
 public:
  virtual ~Unit() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool training) = 0;
  virtual void init(std::uint64_t seed) = 0;
  virtual void collect(std::vector<Parameter<T>*>& out) = 0;
  virtual void collect(std::vector<Buffer<T>*>& out) = 0;
};

template <typename T>
struct StageFeatures {
  Tensor<T> input;                  // f_0
  std::vector<Tensor<T>> features;  // f_1 .. f_upto
};

// A backbone split into K stages plus a global-pool + fully-connected head.
// Copies share parameters (handle semantics); clone() makes a deep copy.
template <typename T>
class StagedModel {
 public:
  const ModelConfig& config() const { return config_; }
  int num_stages() const { return static_cast<int>(bounds_.size()) - 1; }
  int num_units() const { return static_cast<int>(units_->size()); }
  // Units [stage_begin(i), stage_end(i)) form stage i (1-based).
  std::size_t stage_begin(int stage) const;
  std::size_t stage_end(int stage) const;

  Tensor<T> forward_stage(int stage, const Tensor<T>& x, bool training = false);
  StageFeatures<T> forward_stages(const Tensor<T>& x, int upto, bool training = false);
  Tensor<T> forward_backbone(const Tensor<T>& x, bool training = false);
  // Global average pool of f_K, the input of the fully-connected layer.
  Tensor<T> pool_features(const Tensor<T>& f_k) const;
  Tensor<T> forward_classifier(const Tensor<T>& pooled) const;
  Tensor<T> forward_head(const Tensor<T>& f_k) const;
  Tensor<T> forward_full(const Tensor<T>& x, bool training = false);

  std::vector<Parameter<T>*> parameters() const;
  std::vector<Parameter<T>*> parameters_of(OwnerId owner) const;
  std::vector<Buffer<T>*> buffers() const;
  OwnerId owner_of(const std::string& parameter_name) const;
  std::set<OwnerId> owners() const;

  void reinit_head(std::uint64_t seed);

  // Same units and parameters, different stage boundaries.
  StagedModel repartition(int n_stages) const;
  StagedModel clone() const;

  void check_input(const Tensor<T>& x) const;

  // Per-channel input normalization stored in the stem.
  void set_input_normalization(const std::vector<double>& mean, const std::vector<double>& std);

 private:
  template <typename U>
  friend StagedModel<U> build_model(const ModelConfig& config, std::uint64_t seed);

  struct Head;

  ModelConfig config_;
  std::shared_ptr<std::vector<std::unique_ptr<Unit<T>>>> units_;
  std::shared_ptr<Head> head_;
  std::vector<std::size_t> bounds_;  // size K+1, bounds_[0] == 0
};

template <typename T>
StagedModel<T> build_model(const ModelConfig& config, std::uint64_t seed);

// Unit boundaries for the native partition (one stage per resolution).
std::vector<std::size_t> native_bounds(const ModelConfig& config);
// Boundaries after splitting/merging the native partition into n stages:
// n > K splits stages 1, 2, ... in half (larger half first); n < K merges the
// leading stages so that the deepest breakpoints are kept.
std::vector<std::size_t> repartition_bounds(const std::vector<std::size_t>& native, int n_stages);

extern template class StagedModel<float>;
extern template class StagedModel<double>;

}  // namespace sskd
