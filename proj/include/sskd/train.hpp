#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sskd/data.hpp"
#include "sskd/distill.hpp"
#include "sskd/model.hpp"
#include "sskd/nn.hpp"

namespace sskd {

using ModelF = StagedModel<float>;

template <typename T>
struct SGDState {
  double lr = 0.01;
  double momentum = 0.9;
  std::map<std::string, std::vector<T>> velocity;
};

// v <- momentum * v + grad; value <- value - lr * v; grad cleared.
// Parameters that are not trainable are skipped even if they hold a grad.
template <typename T>
void sgd_step(SGDState<T>& state, const std::vector<Parameter<T>*>& params);

enum class PolicyKind { kPlateau, kMilestone };

struct PolicyConfig {
  PolicyKind kind = PolicyKind::kPlateau;
  double initial_lr = 0.01;
  double factor = 0.1;
  // plateau
  int patience = 3;
  double min_lr = 1e-5;
  double threshold = 1e-4;  // relative improvement needed to reset patience
  // milestone: epochs at which lr is multiplied by factor (strictly
  // increasing, within the phase budget); when empty, the fractions of the
  // budget are used instead.
  std::vector<int> milestones;
  std::vector<double> milestone_fractions;

  void validate(int max_epochs) const;
  std::vector<int> resolved_milestones(int max_epochs) const;
};

struct PolicyStep {
  double lr = 0.0;
  bool reduced = false;
  bool phase_end = false;
};

class PlateauPolicy {
 public:
  explicit PlateauPolicy(const PolicyConfig& config);
  double lr() const { return lr_; }
  // Feed the monitored metric of a finished epoch. Throws NumericError for
  // a non-finite metric.
  PolicyStep update(double metric);

 private:
  PolicyConfig config_;
  double lr_;
  double best_;
  int bad_epochs_ = 0;
};

class MilestonePolicy {
 public:
  MilestonePolicy(const PolicyConfig& config, int total_epochs);
  double lr() const { return lr_; }
  PolicyStep update(double metric);

 private:
  PolicyConfig config_;
  std::vector<int> milestones_;
  int total_epochs_;
  int epoch_ = 0;
  double lr_;
};

enum class Method { kScratch, kKdJoint, kMultiloss, kSskd };

std::string to_string(Method method);
Method parse_method(const std::string& text);

enum class PhaseKind { kBackbone, kHead, kEndToEnd };

struct PhaseDescriptor {
  std::string id;
  PhaseKind kind = PhaseKind::kBackbone;
  // Backbone phases train stages [first_stage, last_stage] against the sum of
  // their mimic losses; the prefix before first_stage is frozen.
  int first_stage = 0;
  int last_stage = 0;
  PolicyConfig policy;
  int max_epochs = 0;
};

struct PlanSettings {
  int batch_size = 64;
  double momentum = 0.9;
  PolicyConfig stage_policy;
  int stage_epochs = 10;
  // Optional per-stage initial lr (length K). The mimic loss sums over
  // feature elements, so shallow high-resolution stages need smaller steps.
  // Multi-loss uses the smallest entry for its single backbone phase.
  std::vector<double> stage_lrs;
  PolicyConfig head_policy;
  int head_epochs = 10;
  PolicyConfig joint_policy;
  // End-to-end budget for scratch / kd_joint; defaults to
  // K * stage_epochs + head_epochs so the step counts line up.
  std::optional<int> joint_epochs;
  // Number of stages used for distillation (repartitions both networks).
  std::optional<int> stages;
  // Evaluate the test split every n epochs in head / end-to-end phases
  // (0 = only at the end of such phases).
  int eval_every = 0;
};

struct TrainPlan {
  Method method = Method::kSskd;
  int stages = 1;
  int batch_size = 64;
  double momentum = 0.9;
  int eval_every = 0;
  std::vector<PhaseDescriptor> phases;
  std::uint64_t seed = 0;

  // Throws ConfigError when the phase list breaks the method's structure.
  void validate() const;
  int total_budget_epochs() const;
};

TrainPlan make_plan(Method method, int stages, const PlanSettings& settings, std::uint64_t seed);

struct MetricsRecord {
  std::string phase;
  int epoch = 0;
  std::vector<std::pair<std::string, double>> scalars;
  double wall_seconds = 0.0;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct TrainHooks {
  MetricsSink metrics;
  // Called once per backbone phase with the cached student input of its first
  // stage, i.e. the feature the trained prefix produces.
  std::function<void(const std::string& phase, int stage, const TensorF& input)> on_stage_input;
};

struct PhaseReport {
  std::string id;
  int epochs = 0;
  long long steps = 0;
  double final_lr = 0.0;
  bool ended_by_policy = false;
  std::vector<double> loss_trace;
  std::vector<double> lr_trace;
};

struct Accuracy {
  double top1 = 0.0;
  double top5 = 0.0;
};

struct RunReport {
  Method method = Method::kSskd;
  int stages = 1;
  std::uint64_t seed = 0;
  std::vector<PhaseReport> phases;
  long long total_steps = 0;
  std::optional<KDSpec> kd;
  std::optional<Accuracy> test;
};

struct TrainData {
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;  // optional, used for accuracy metrics
  std::vector<double> input_mean;  // empty = no input normalization
  std::vector<double> input_std;
};

struct TrainResult {
  ModelF student;
  RunReport report;
};

// One backbone phase on stages [first, last] (SSKD stage i is first = last = i;
// multi-loss is first = 1, last = K). Adapters are built for the phase and
// discarded afterwards.
PhaseReport train_backbone_phase(ModelF& student, ModelF& teacher, const Dataset& train, int first, int last,
                                 const PhaseDescriptor& phase, const TrainPlan& plan, int phase_ordinal,
                                 const TrainHooks& hooks = {});

PhaseReport train_stage_sskd(ModelF& student, ModelF& teacher, const Dataset& train, int stage,
                             const PhaseDescriptor& phase, const TrainPlan& plan, int phase_ordinal,
                             const TrainHooks& hooks = {});

// Re-initializes the head, freezes the backbone and fits the head with
// cross-entropy on cached pooled stage-K features.
PhaseReport train_head(ModelF& student, const TrainData& data, const PhaseDescriptor& phase, const TrainPlan& plan,
                       int phase_ordinal, const TrainHooks& hooks = {});

TrainResult train_sskd(ModelF& teacher, const ModelConfig& student_config, const TrainData& data,
                       const TrainPlan& plan, const TrainHooks& hooks = {});
TrainResult train_multiloss(ModelF& teacher, const ModelConfig& student_config, const TrainData& data,
                            const TrainPlan& plan, const TrainHooks& hooks = {});
TrainResult train_scratch(const ModelConfig& config, const TrainData& data, const TrainPlan& plan,
                          const TrainHooks& hooks = {});
TrainResult train_kd_joint(ModelF& teacher, const ModelConfig& student_config, const TrainData& data,
                           const KDSpec& spec, const TrainPlan& plan, const TrainHooks& hooks = {});

// Top-1 / top-5 (top-min(5, C)) accuracy in inference mode.
Accuracy evaluate(ModelF& model, const Dataset& dataset, int batch_size = 256);
// Logits for every sample, inference mode.
TensorF predict_logits(ModelF& model, const TensorF& images, int batch_size = 256);

// Fixed-size digest of every parameter and buffer, for isolation checks.
std::map<std::string, std::uint64_t> parameter_hashes(const ModelF& model);

}  // namespace sskd
