#include "sskd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <variant>

#include "sskd/errors.hpp"
#include "sskd/ops.hpp"
#include "sskd/random.hpp"
#include "sskd/tape.hpp"

namespace sskd {

template <typename T>
void sgd_step(SGDState<T>& state, const std::vector<Parameter<T>*>& params) {
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    if (!p->value.has_grad()) throw StateError("sgd_step: trainable parameter '" + p->name + "' has no gradient");
    auto grad = p->value.grad();
    auto value = p->value.values();
    auto& v = state.velocity[p->name];
    if (v.empty()) v.assign(value.size(), T(0));
    const T m = static_cast<T>(state.momentum);
    const T lr = static_cast<T>(state.lr);
    for (std::size_t i = 0; i < value.size(); ++i) {
      v[i] = m * v[i] + grad[i];
      value[i] -= lr * v[i];
    }
    p->value.clear_grad();
  }
}

template void sgd_step<float>(SGDState<float>&, const std::vector<Parameter<float>*>&);
template void sgd_step<double>(SGDState<double>&, const std::vector<Parameter<double>*>&);

void PolicyConfig::validate(int max_epochs) const {
  if (!(initial_lr > 0.0)) throw ConfigError("initial_lr must be positive");
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("lr factor must lie in (0, 1)");
  if (kind == PolicyKind::kPlateau) {
    if (patience < 1) throw ConfigError("plateau patience must be >= 1");
    if (!(min_lr > 0.0)) throw ConfigError("plateau min_lr must be positive");
    if (!(threshold >= 0.0 && threshold < 1.0)) throw ConfigError("plateau threshold must lie in [0, 1)");
  } else {
    if (!milestones.empty() && !milestone_fractions.empty()) {
      throw ConfigError("give either milestones or milestone_fractions, not both");
    }
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] < 1 || milestones[i] >= max_epochs) {
        throw ConfigError("milestone " + std::to_string(milestones[i]) + " outside [1, " +
                          std::to_string(max_epochs) + ")");
      }
      if (i > 0 && milestones[i] <= milestones[i - 1]) throw ConfigError("milestones must be strictly increasing");
    }
    for (std::size_t i = 0; i < milestone_fractions.size(); ++i) {
      if (!(milestone_fractions[i] > 0.0 && milestone_fractions[i] < 1.0)) {
        throw ConfigError("milestone fractions must lie in (0, 1)");
      }
      if (i > 0 && milestone_fractions[i] <= milestone_fractions[i - 1]) {
        throw ConfigError("milestone fractions must be strictly increasing");
      }
    }
  }
}

std::vector<int> PolicyConfig::resolved_milestones(int max_epochs) const {
  if (!milestones.empty()) return milestones;
  std::vector<int> out;
  for (double f : milestone_fractions) {
    const int m = static_cast<int>(std::floor(f * max_epochs));
    if (m >= 1 && m < max_epochs && (out.empty() || m > out.back())) out.push_back(m);
  }
  return out;
}

PlateauPolicy::PlateauPolicy(const PolicyConfig& config)
    : config_(config), lr_(config.initial_lr), best_(std::numeric_limits<double>::infinity()) {}

PolicyStep PlateauPolicy::update(double metric) {
  if (!std::isfinite(metric)) {
    throw NumericError("monitored metric is not finite (" + std::to_string(metric) + ") at lr " + std::to_string(lr_));
  }
  PolicyStep step;
  if (metric < best_ - std::abs(best_) * config_.threshold || !std::isfinite(best_)) {
    best_ = metric;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= config_.patience) {
    lr_ *= config_.factor;
    bad_epochs_ = 0;
    step.reduced = true;
  }
  step.lr = lr_;
  // The tolerance keeps 1e-4 * 0.1 == 1e-5 from counting as below the floor.
  step.phase_end = lr_ < config_.min_lr * (1.0 - 1e-9);
  return step;
}

MilestonePolicy::MilestonePolicy(const PolicyConfig& config, int total_epochs)
    : config_(config), total_epochs_(total_epochs), lr_(config.initial_lr) {
  config_.validate(total_epochs);
  milestones_ = config_.resolved_milestones(total_epochs);
}

PolicyStep MilestonePolicy::update(double metric) {
  if (!std::isfinite(metric)) throw NumericError("monitored metric is not finite (" + std::to_string(metric) + ")");
  ++epoch_;
  PolicyStep step;
  int passed = 0;
  for (int m : milestones_) passed += m <= epoch_ ? 1 : 0;
  const double lr = config_.initial_lr * std::pow(config_.factor, passed);
  step.reduced = lr < lr_;
  lr_ = lr;
  step.lr = lr_;
  step.phase_end = epoch_ >= total_epochs_;
  return step;
}

std::string to_string(Method method) {
  switch (method) {
    case Method::kScratch: return "scratch";
    case Method::kKdJoint: return "kd_joint";
    case Method::kMultiloss: return "multiloss";
    case Method::kSskd: return "sskd";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "scratch") return Method::kScratch;
  if (text == "kd_joint") return Method::kKdJoint;
  if (text == "multiloss") return Method::kMultiloss;
  if (text == "sskd") return Method::kSskd;
  throw ConfigError("unknown method '" + text + "' (expected scratch, kd_joint, multiloss or sskd)");
}

TrainPlan make_plan(Method method, int stages, const PlanSettings& s, std::uint64_t seed) {
  if (stages < 1) throw ConfigError("plan needs at least one stage");
  TrainPlan plan;
  plan.method = method;
  plan.stages = stages;
  plan.batch_size = s.batch_size;
  plan.momentum = s.momentum;
  plan.eval_every = s.eval_every;
  plan.seed = seed;
  if (!s.stage_lrs.empty() && static_cast<int>(s.stage_lrs.size()) != stages) {
    throw ConfigError("stage_lrs has " + std::to_string(s.stage_lrs.size()) + " entries for " +
                      std::to_string(stages) + " stages");
  }
  const auto stage_policy = [&](int stage) {
    PolicyConfig p = s.stage_policy;
    if (stage > 0 && !s.stage_lrs.empty()) p.initial_lr = s.stage_lrs[stage - 1];
    if (stage == 0 && !s.stage_lrs.empty()) p.initial_lr = *std::min_element(s.stage_lrs.begin(), s.stage_lrs.end());
    return p;
  };
  const PhaseDescriptor head{"head", PhaseKind::kHead, 0, 0, s.head_policy, s.head_epochs};
  switch (method) {
    case Method::kSskd:
      for (int i = 1; i <= stages; ++i) {
        plan.phases.push_back({"stage" + std::to_string(i), PhaseKind::kBackbone, i, i, stage_policy(i), s.stage_epochs});
      }
      plan.phases.push_back(head);
      break;
    case Method::kMultiloss:
      plan.phases.push_back({"backbone", PhaseKind::kBackbone, 1, stages, stage_policy(0), stages * s.stage_epochs});
      plan.phases.push_back(head);
      break;
    case Method::kScratch:
    case Method::kKdJoint:
      plan.phases.push_back({"end_to_end", PhaseKind::kEndToEnd, 0, 0, s.joint_policy,
                             s.joint_epochs.value_or(stages * s.stage_epochs + s.head_epochs)});
      break;
  }
  plan.validate();
  return plan;
}

void TrainPlan::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (stages < 1) throw ConfigError("plan needs at least one stage");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  for (const auto& p : phases) {
    if (p.max_epochs < 0) throw ConfigError("phase '" + p.id + "' has a negative epoch budget");
    p.policy.validate(p.max_epochs);
  }
  const auto fail = [&](const std::string& why) {
    throw ConfigError(to_string(method) + " plan: " + why);
  };
  switch (method) {
    case Method::kSskd:
      if (static_cast<int>(phases.size()) != stages + 1) fail("needs K stage phases followed by one head phase");
      for (int i = 1; i <= stages; ++i) {
        const auto& p = phases[i - 1];
        if (p.kind != PhaseKind::kBackbone || p.first_stage != i || p.last_stage != i) {
          fail("phase " + std::to_string(i) + " must train stage " + std::to_string(i) + " alone");
        }
      }
      if (phases.back().kind != PhaseKind::kHead) fail("last phase must be the head phase");
      break;
    case Method::kMultiloss:
      if (phases.size() != 2 || phases[0].kind != PhaseKind::kBackbone || phases[0].first_stage != 1 ||
          phases[0].last_stage != stages || phases[1].kind != PhaseKind::kHead) {
        fail("needs one backbone phase over all stages followed by one head phase");
      }
      break;
    case Method::kScratch:
    case Method::kKdJoint:
      if (phases.size() != 1 || phases[0].kind != PhaseKind::kEndToEnd) fail("needs exactly one end-to-end phase");
      break;
  }
}

int TrainPlan::total_budget_epochs() const {
  int total = 0;
  for (const auto& p : phases) total += p.max_epochs;
  return total;
}

namespace {

using Clock = std::chrono::steady_clock;

constexpr int kCacheChunk = 256;
constexpr std::size_t kAdapterFitSamples = 256;

// Applies fn to the dataset in chunks and stacks the results along axis 0.
template <typename Fn>
TensorF map_chunks(const TensorF& input, Fn fn, int chunk_size = kCacheChunk) {
  NoGradScope<float> no_grad;
  const int n = input.dim(0);
  TensorF out;
  std::size_t offset = 0;
  std::vector<std::size_t> rows;
  for (int start = 0; start < n; start += chunk_size) {
    const int end = std::min(n, start + chunk_size);
    rows.clear();
    for (int i = start; i < end; ++i) rows.push_back(static_cast<std::size_t>(i));
    TensorF chunk = fn(ops::gather_rows(input, std::span<const std::size_t>(rows)));
    if (start == 0) {
      Shape shape = chunk.shape();
      shape[0] = n;
      out = TensorF(shape, 0.0f);
    }
    std::memcpy(out.data() + offset, chunk.data(), chunk.size() * sizeof(float));
    offset += chunk.size();
  }
  return out;
}

// Several outputs per chunk, stacked independently.
template <typename Fn>
std::vector<TensorF> map_chunks_multi(const TensorF& input, std::size_t outputs, Fn fn) {
  NoGradScope<float> no_grad;
  const int n = input.dim(0);
  std::vector<TensorF> out(outputs);
  std::vector<std::size_t> offsets(outputs, 0);
  std::vector<std::size_t> rows;
  for (int start = 0; start < n; start += kCacheChunk) {
    const int end = std::min(n, start + kCacheChunk);
    rows.clear();
    for (int i = start; i < end; ++i) rows.push_back(static_cast<std::size_t>(i));
    std::vector<TensorF> chunk = fn(ops::gather_rows(input, std::span<const std::size_t>(rows)));
    for (std::size_t k = 0; k < outputs; ++k) {
      if (start == 0) {
        Shape shape = chunk[k].shape();
        shape[0] = n;
        out[k] = TensorF(shape, 0.0f);
      }
      std::memcpy(out[k].data() + offsets[k], chunk[k].data(), chunk[k].size() * sizeof(float));
      offsets[k] += chunk[k].size();
    }
  }
  return out;
}

TensorF rows_of(const TensorF& t, const std::vector<std::size_t>& idx) {
  return ops::gather_rows(t, std::span<const std::size_t>(idx));
}

std::vector<int> labels_of(const Dataset& d, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(d.labels[i]);
  return out;
}

class LrSchedule {
 public:
  LrSchedule(const PolicyConfig& config, int max_epochs) : policy_(make(config, max_epochs)) {}
  double lr() const {
    return std::visit([](const auto& p) { return p.lr(); }, policy_);
  }
  PolicyStep update(double metric) {
    return std::visit([&](auto& p) { return p.update(metric); }, policy_);
  }

 private:
  using Policy = std::variant<PlateauPolicy, MilestonePolicy>;
  static Policy make(const PolicyConfig& config, int max_epochs) {
    if (config.kind == PolicyKind::kPlateau) return PlateauPolicy(config);
    return MilestonePolicy(config, max_epochs);
  }
  Policy policy_;
};

struct StepResult {
  // First entry is the monitored loss.
  std::vector<std::pair<std::string, double>> losses;
};

using StepFn = std::function<StepResult(const std::vector<std::size_t>&)>;

std::uint64_t shuffle_seed(const TrainPlan& plan, int phase_ordinal) {
  return derive_seed(derive_seed(plan.seed, "shuffle"), static_cast<std::uint64_t>(phase_ordinal));
}

PhaseReport run_phase(const PhaseDescriptor& phase, const TrainPlan& plan, int phase_ordinal, int n_samples,
                      const std::vector<Parameter<float>*>& params, const StepFn& step,
                      const std::function<Accuracy()>& eval, const TrainHooks& hooks) {
  PhaseReport report;
  report.id = phase.id;
  report.final_lr = phase.policy.initial_lr;
  if (phase.max_epochs == 0) return report;

  LrSchedule schedule(phase.policy, phase.max_epochs);
  SGDState<float> sgd;
  sgd.momentum = plan.momentum;
  const std::uint64_t seed = shuffle_seed(plan, phase_ordinal);
  const auto started = Clock::now();

  for (int epoch = 0; epoch < phase.max_epochs; ++epoch) {
    sgd.lr = schedule.lr();
    std::vector<std::pair<std::string, double>> sums;
    for (const auto& batch : batches(n_samples, plan.batch_size, seed, epoch)) {
      StepResult r = step(batch);
      sgd_step(sgd, params);
      ++report.steps;
      if (sums.empty()) {
        for (const auto& [name, v] : r.losses) sums.emplace_back(name, 0.0);
      }
      for (std::size_t k = 0; k < r.losses.size(); ++k) sums[k].second += r.losses[k].second * batch.size();
    }
    for (auto& s : sums) s.second /= n_samples;
    const double monitored = sums.front().second;
    PolicyStep ps;
    try {
      ps = schedule.update(monitored);
    } catch (const NumericError& e) {
      throw NumericError("training diverged in phase '" + phase.id + "' at epoch " + std::to_string(epoch) + ": " +
                         e.what());
    }
    report.epochs = epoch + 1;
    report.loss_trace.push_back(monitored);
    report.lr_trace.push_back(sgd.lr);
    report.final_lr = ps.lr;

    const bool last = ps.phase_end || epoch + 1 == phase.max_epochs;
    MetricsRecord record;
    record.phase = phase.id;
    record.epoch = epoch;
    record.scalars = sums;
    record.scalars.emplace_back("lr", sgd.lr);
    if (eval && (last || (plan.eval_every > 0 && (epoch + 1) % plan.eval_every == 0))) {
      const Accuracy acc = eval();
      record.scalars.emplace_back("top1", acc.top1);
      record.scalars.emplace_back("top5", acc.top5);
    }
    record.wall_seconds = std::chrono::duration<double>(Clock::now() - started).count();
    if (hooks.metrics) hooks.metrics(record);
    if (ps.phase_end) {
      report.ended_by_policy = true;
      break;
    }
  }
  return report;
}

// Restores every parameter's trainable flag on scope exit.
class TrainableGuard {
 public:
  explicit TrainableGuard(const ModelF& model) {
    for (auto* p : model.parameters()) saved_.emplace_back(p, p->trainable);
  }
  ~TrainableGuard() {
    for (auto& [p, on] : saved_) p->set_trainable(on);
  }
  TrainableGuard(const TrainableGuard&) = delete;
  TrainableGuard& operator=(const TrainableGuard&) = delete;

 private:
  std::vector<std::pair<Parameter<float>*, bool>> saved_;
};

void apply_normalization(ModelF& model, const TrainData& data) {
  if (!data.input_mean.empty()) model.set_input_normalization(data.input_mean, data.input_std);
}

std::uint64_t init_seed(const TrainPlan& plan) { return derive_seed(plan.seed, "init"); }

const Dataset& require_train(const TrainData& data) {
  if (!data.train) throw UsageError("training data missing");
  return *data.train;
}

void unfreeze(ModelF& model) { set_frozen_all(model, false); }

ModelF prepare_teacher_view(ModelF& teacher, int stages) {
  if (teacher.num_stages() == stages) return teacher;
  return teacher.repartition(stages);
}

}  // namespace

PhaseReport train_backbone_phase(ModelF& student, ModelF& teacher, const Dataset& train, int first, int last,
                                 const PhaseDescriptor& phase, const TrainPlan& plan, int phase_ordinal,
                                 const TrainHooks& hooks) {
  if (student.num_stages() != teacher.num_stages()) {
    throw ConfigError("teacher has " + std::to_string(teacher.num_stages()) + " stages but student has " +
                      std::to_string(student.num_stages()));
  }
  if (first < 1 || last < first || last > student.num_stages()) {
    throw ConfigError("backbone phase stages [" + std::to_string(first) + ", " + std::to_string(last) +
                      "] outside 1.." + std::to_string(student.num_stages()));
  }
  student.check_input(train.images);
  teacher.check_input(train.images);

  TrainableGuard teacher_flags(teacher);
  set_frozen_all(teacher, true);
  set_frozen_all(student, true);
  std::set<OwnerId> active;
  for (int s = first; s <= last; ++s) active.insert(s);
  set_frozen(student, active, false);

  // The frozen prefix is deterministic, so its output is computed once.
  TensorF input = first == 1 ? train.images
                             : map_chunks(train.images, [&](const TensorF& x) {
                                 return student.forward_stages(x, first - 1, false).features.back();
                               });
  if (hooks.on_stage_input) hooks.on_stage_input(phase.id, first, input);
  std::vector<TensorF> targets =
      map_chunks_multi(train.images, static_cast<std::size_t>(last - first + 1), [&](const TensorF& x) {
        auto f = teacher.forward_stages(x, last, false).features;
        return std::vector<TensorF>(f.begin() + (first - 1), f.end());
      });

  // Adapter shapes come from one probe sample.
  std::vector<std::optional<Adapter<float>>> adapters;
  {
    NoGradScope<float> no_grad;
    const std::vector<std::size_t> probe{0};
    TensorF h = rows_of(input, probe);
    for (int s = first; s <= last; ++s) {
      h = student.forward_stage(s, h, false);
      Shape target = targets[s - first].shape();
      target[0] = 1;
      adapters.push_back(make_adapter<float>(target, h.shape(), s, derive_seed(plan.seed, "adapter")));
    }
  }

  // Adapters start at the least-squares map from the initial student
  // features to the teacher's, so early steps are not spent undoing a
  // random projection.
  {
    NoGradScope<float> no_grad;
    std::vector<std::size_t> probe(std::min(static_cast<std::size_t>(input.dim(0)), kAdapterFitSamples));
    std::iota(probe.begin(), probe.end(), std::size_t{0});
    TensorF h = rows_of(input, probe);
    for (int s = first; s <= last; ++s) {
      h = student.forward_stage(s, h, false);
      if (adapters[s - first]) adapters[s - first]->fit(h, rows_of(targets[s - first], probe));
    }
  }

  std::vector<Parameter<float>*> params;
  for (int s = first; s <= last; ++s) {
    for (auto* p : student.parameters_of(s)) params.push_back(p);
  }
  for (auto& a : adapters) {
    if (a) {
      for (auto* p : a->parameters()) params.push_back(p);
    }
  }

  const StepFn step = [&](const std::vector<std::size_t>& idx) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    TensorF h = rows_of(input, idx);
    TensorF total;
    StepResult r;
    r.losses.emplace_back("loss", 0.0);
    for (int s = first; s <= last; ++s) {
      h = student.forward_stage(s, h, true);
      const auto& adapter = adapters[s - first];
      TensorF l = mimic_loss(rows_of(targets[s - first], idx), h, adapter ? &*adapter : nullptr);
      r.losses.emplace_back("mimic_loss/stage" + std::to_string(s), l.item());
      total = s == first ? l : ops::add(total, l);
    }
    r.losses.front().second = total.item();
    tape.backward(total);
    return r;
  };
  return run_phase(phase, plan, phase_ordinal, train.size(), params, step, {}, hooks);
}

PhaseReport train_stage_sskd(ModelF& student, ModelF& teacher, const Dataset& train, int stage,
                             const PhaseDescriptor& phase, const TrainPlan& plan, int phase_ordinal,
                             const TrainHooks& hooks) {
  return train_backbone_phase(student, teacher, train, stage, stage, phase, plan, phase_ordinal, hooks);
}

PhaseReport train_head(ModelF& student, const TrainData& data, const PhaseDescriptor& phase, const TrainPlan& plan,
                       int phase_ordinal, const TrainHooks& hooks) {
  const Dataset& train = require_train(data);
  student.check_input(train.images);
  if (phase.max_epochs == 0) {
    PhaseReport empty;
    empty.id = phase.id;
    empty.final_lr = phase.policy.initial_lr;
    return empty;
  }
  student.reinit_head(derive_seed(plan.seed, "head"));
  set_frozen_all(student, true);
  set_frozen(student, {kHeadOwner}, false);

  const TensorF pooled = map_chunks(train.images, [&](const TensorF& x) {
    return student.pool_features(student.forward_backbone(x, false));
  });
  const std::vector<Parameter<float>*> params = student.parameters_of(kHeadOwner);
  const StepFn step = [&](const std::vector<std::size_t>& idx) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    const std::vector<int> labels = labels_of(train, idx);
    TensorF loss = ops::softmax_cross_entropy(student.forward_classifier(rows_of(pooled, idx)),
                                              std::span<const int>(labels));
    StepResult r;
    r.losses.emplace_back("task_loss", loss.item());
    tape.backward(loss);
    return r;
  };
  std::function<Accuracy()> eval;
  if (data.test) eval = [&] { return evaluate(student, *data.test); };
  return run_phase(phase, plan, phase_ordinal, train.size(), params, step, eval, hooks);
}

namespace {

PhaseReport train_end_to_end(ModelF& student, const TrainData& data, const PhaseDescriptor& phase,
                             const TrainPlan& plan, const TensorF* teacher_logits, const KDSpec* kd,
                             const TrainHooks& hooks) {
  const Dataset& train = require_train(data);
  student.check_input(train.images);
  set_frozen_all(student, false);
  const std::vector<Parameter<float>*> params = student.parameters();
  const StepFn step = [&](const std::vector<std::size_t>& idx) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    const std::vector<int> labels = labels_of(train, idx);
    TensorF logits = student.forward_full(rows_of(train.images, idx), true);
    TensorF task = ops::softmax_cross_entropy(logits, std::span<const int>(labels));
    StepResult r;
    if (kd) {
      TensorF kd_term = kd_loss(rows_of(*teacher_logits, idx), logits, *kd);
      TensorF loss = joint_kd_objective(task, kd_term, kd->loss_weight);
      r.losses = {{"loss", loss.item()}, {"task_loss", task.item()}, {"kd_loss", kd_term.item()}};
      tape.backward(loss);
    } else {
      r.losses = {{"loss", task.item()}, {"task_loss", task.item()}};
      tape.backward(task);
    }
    return r;
  };
  std::function<Accuracy()> eval;
  if (data.test) eval = [&] { return evaluate(student, *data.test); };
  return run_phase(phase, plan, 0, train.size(), params, step, eval, hooks);
}

void finish(RunReport& report, ModelF& student, const TrainData& data) {
  report.total_steps = 0;
  for (const auto& p : report.phases) report.total_steps += p.steps;
  unfreeze(student);
  if (data.test) report.test = evaluate(student, *data.test);
}

TrainResult train_distilled(Method method, ModelF& teacher, const ModelConfig& student_config, const TrainData& data,
                            const TrainPlan& plan, const TrainHooks& hooks) {
  plan.validate();
  if (plan.method != method) {
    throw ConfigError("plan is for " + to_string(plan.method) + ", not " + to_string(method));
  }
  const Dataset& train = require_train(data);
  ModelF student = build_model<float>(student_config, init_seed(plan)).repartition(plan.stages);
  apply_normalization(student, data);
  ModelF teacher_view = prepare_teacher_view(teacher, plan.stages);

  RunReport report;
  report.method = method;
  report.stages = plan.stages;
  report.seed = plan.seed;
  for (std::size_t k = 0; k < plan.phases.size(); ++k) {
    const auto& phase = plan.phases[k];
    const int ordinal = static_cast<int>(k);
    if (phase.kind == PhaseKind::kBackbone) {
      report.phases.push_back(train_backbone_phase(student, teacher_view, train, phase.first_stage, phase.last_stage,
                                                   phase, plan, ordinal, hooks));
    } else {
      report.phases.push_back(train_head(student, data, phase, plan, ordinal, hooks));
    }
  }
  finish(report, student, data);
  return {student, report};
}

}  // namespace

TrainResult train_sskd(ModelF& teacher, const ModelConfig& student_config, const TrainData& data,
                       const TrainPlan& plan, const TrainHooks& hooks) {
  return train_distilled(Method::kSskd, teacher, student_config, data, plan, hooks);
}

TrainResult train_multiloss(ModelF& teacher, const ModelConfig& student_config, const TrainData& data,
                            const TrainPlan& plan, const TrainHooks& hooks) {
  return train_distilled(Method::kMultiloss, teacher, student_config, data, plan, hooks);
}

TrainResult train_scratch(const ModelConfig& config, const TrainData& data, const TrainPlan& plan,
                          const TrainHooks& hooks) {
  plan.validate();
  if (plan.method != Method::kScratch) throw ConfigError("plan is for " + to_string(plan.method) + ", not scratch");
  ModelF student = build_model<float>(config, init_seed(plan));
  apply_normalization(student, data);
  RunReport report;
  report.method = Method::kScratch;
  report.stages = plan.stages;
  report.seed = plan.seed;
  report.phases.push_back(train_end_to_end(student, data, plan.phases[0], plan, nullptr, nullptr, hooks));
  finish(report, student, data);
  return {student, report};
}

TrainResult train_kd_joint(ModelF& teacher, const ModelConfig& student_config, const TrainData& data,
                           const KDSpec& spec, const TrainPlan& plan, const TrainHooks& hooks) {
  plan.validate();
  spec.validate();
  if (plan.method != Method::kKdJoint) throw ConfigError("plan is for " + to_string(plan.method) + ", not kd_joint");
  const Dataset& train = require_train(data);
  const TensorF teacher_logits = predict_logits(teacher, train.images);
  ModelF student = build_model<float>(student_config, init_seed(plan));
  apply_normalization(student, data);
  RunReport report;
  report.method = Method::kKdJoint;
  report.stages = plan.stages;
  report.seed = plan.seed;
  report.kd = spec;
  report.phases.push_back(train_end_to_end(student, data, plan.phases[0], plan, &teacher_logits, &spec, hooks));
  finish(report, student, data);
  return {student, report};
}

TensorF predict_logits(ModelF& model, const TensorF& images, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  model.check_input(images);
  return map_chunks(images, [&](const TensorF& x) { return model.forward_full(x, false); }, batch_size);
}

Accuracy evaluate(ModelF& model, const Dataset& dataset, int batch_size) {
  const TensorF logits = predict_logits(model, dataset.images, batch_size);
  const int n = logits.dim(0), c = logits.dim(1);
  const int k5 = std::min(5, c);
  long long hit1 = 0, hit5 = 0;
  const float* l = logits.data();
  for (int i = 0; i < n; ++i) {
    const float* row = l + static_cast<std::size_t>(i) * c;
    const int y = dataset.labels[i];
    // Rank of the true class; ties are broken towards the lower index.
    int rank = 0;
    for (int j = 0; j < c; ++j) {
      if (row[j] > row[y] || (row[j] == row[y] && j < y)) ++rank;
    }
    hit1 += rank < 1 ? 1 : 0;
    hit5 += rank < k5 ? 1 : 0;
  }
  return {100.0 * hit1 / n, 100.0 * hit5 / n};
}

std::map<std::string, std::uint64_t> parameter_hashes(const ModelF& model) {
  std::map<std::string, std::uint64_t> out;
  const auto digest = [](std::span<const float> v) {
    return hash_tag(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float)));
  };
  for (auto* p : model.parameters()) out[p->name] = digest(p->value.values());
  for (auto* b : model.buffers()) out[b->name] = digest(b->value.values());
  return out;
}

}  // namespace sskd
