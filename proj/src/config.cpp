#include "sskd/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "sskd/errors.hpp"

namespace sskd {

ModelConfig ArchSpec::resolve(const Dataset& data) const {
  ModelConfig c;
  c.family = family;
  c.input_h = data.height();
  c.input_w = data.width();
  c.input_channels = data.channels();
  c.num_classes = data.num_classes;
  c.stage_widths = stage_widths;
  c.blocks_per_stage = blocks_per_stage;
  c.stem_pool = stem_pool;
  return c;
}

namespace {

ArchSpec arch_of(const ModelConfig& c) {
  return ArchSpec{c.family, c.stage_widths, c.blocks_per_stage, c.stem_pool};
}

PolicyConfig milestone_policy(double lr) {
  PolicyConfig p;
  p.kind = PolicyKind::kMilestone;
  p.initial_lr = lr;
  p.milestone_fractions = {2.0 / 3.0};
  return p;
}

}  // namespace

ArchSpec desk_teacher_arch() { return arch_of(desk_teacher_config()); }
ArchSpec desk_student_arch() { return arch_of(desk_student_config()); }

RunConfig default_run_config() {
  RunConfig c;
  SyntheticSpec s;
  s.contrast = 0.0375;
  c.dataset.synthetic = s;
  TeacherSource t;
  t.arch = desk_teacher_arch();
  t.policy = milestone_policy(0.05);
  c.teacher = t;
  c.student = desk_student_arch();
  c.plan.stage_policy = milestone_policy(1e-5);
  c.plan.head_policy = milestone_policy(0.2);
  c.plan.joint_policy = milestone_policy(0.05);
  return c;
}

void apply_quick_budget(RunConfig& config) {
  if (config.teacher && config.teacher->arch) config.teacher->epochs = 10;
  config.plan.stage_epochs = 8;
  config.plan.head_epochs = 8;
  config.plan.joint_epochs.reset();
}

void RunConfig::validate() const {
  if (name.empty() || name.find('/') != std::string::npos || name == "." || name == "..") {
    throw ConfigError("name: must be a non-empty directory name");
  }
  const bool synth = dataset.synthetic.has_value();
  const bool files = !dataset.train_path.empty() || !dataset.test_path.empty();
  if (synth == files) throw ConfigError("dataset: give exactly one of synthetic or train_path/test_path");
  if (files && (dataset.train_path.empty() || dataset.test_path.empty())) {
    throw ConfigError("dataset: both train_path and test_path are required");
  }
  if (synth) dataset.synthetic->validate();
  if (distills()) {
    if (!teacher) throw ConfigError("teacher: required for method " + to_string(method));
    if (teacher->arch.has_value() == !teacher->checkpoint.empty()) {
      throw ConfigError("teacher: give exactly one of arch or checkpoint");
    }
    if (teacher->arch) {
      if (teacher->epochs < 0) throw ConfigError("teacher.epochs: must be >= 0");
      if (teacher->batch_size < 1) throw ConfigError("teacher.batch_size: must be >= 1");
      try {
        teacher->policy.validate(std::max(1, teacher->epochs));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("teacher.policy: ") + e.what());
      }
    }
  } else if (teacher) {
    throw ConfigError("teacher: not allowed for method scratch");
  }
  if (student.stage_widths.empty()) throw ConfigError("student.stage_widths: must not be empty");
  if (plan.batch_size < 1) throw ConfigError("plan.batch_size: must be >= 1");
  if (plan.stage_epochs < 0 || plan.head_epochs < 0 || plan.joint_epochs.value_or(0) < 0) {
    throw ConfigError("plan: epoch budgets must be >= 0");
  }
  if (plan.eval_every < 0) throw ConfigError("plan.eval_every: must be >= 0");
  if (plan.stages && *plan.stages < 1) throw ConfigError("plan.stages: must be >= 1");
  if (!(mimic_lr >= 0.0)) throw ConfigError("plan.mimic_lr: must be >= 0");
  for (double lr : plan.stage_lrs) {
    if (!(lr > 0.0)) throw ConfigError("plan.stage_lrs: entries must be > 0");
  }
  if (method == Method::kKdJoint) kd.validate();
}

namespace {

using Keys = std::set<std::string>;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void check_map(const YAML::Node& node, const std::string& path, const Keys& allowed) {
  if (!node.IsMap()) throw ConfigError((path.empty() ? "config" : path) + ": expected a mapping");
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    if (!allowed.count(key)) {
      std::string list;
      for (const auto& k : allowed) list += (list.empty() ? "" : ", ") + k;
      throw ConfigError("unknown key '" + join(path, key) + "' (allowed: " + list + ")");
    }
  }
}

template <typename V>
void get(const YAML::Node& node, const std::string& key, const std::string& path, V& out) {
  const YAML::Node v = node[key];
  if (!v) return;
  try {
    if (!v.IsScalar() && !v.IsSequence()) throw YAML::Exception(v.Mark(), "bad type");
    out = v.as<V>();
  } catch (const YAML::Exception&) {
    throw ConfigError(join(path, key) + ": invalid value");
  }
}

PolicyConfig parse_policy(const YAML::Node& n, const std::string& path, PolicyConfig p) {
  check_map(n, path,
            {"kind", "initial_lr", "factor", "patience", "min_lr", "threshold", "milestones", "milestone_fractions"});
  std::string kind = p.kind == PolicyKind::kPlateau ? "plateau" : "milestone";
  get(n, "kind", path, kind);
  if (kind == "plateau") {
    p.kind = PolicyKind::kPlateau;
  } else if (kind == "milestone") {
    p.kind = PolicyKind::kMilestone;
  } else {
    throw ConfigError(join(path, "kind") + ": expected plateau or milestone, got '" + kind + "'");
  }
  get(n, "initial_lr", path, p.initial_lr);
  get(n, "factor", path, p.factor);
  get(n, "patience", path, p.patience);
  get(n, "min_lr", path, p.min_lr);
  get(n, "threshold", path, p.threshold);
  if (n["milestones"]) {
    p.milestones.clear();
    p.milestone_fractions.clear();
    get(n, "milestones", path, p.milestones);
  }
  if (n["milestone_fractions"]) {
    p.milestone_fractions.clear();
    get(n, "milestone_fractions", path, p.milestone_fractions);
  }
  return p;
}

ArchSpec parse_arch(const YAML::Node& n, const std::string& path, ArchSpec a) {
  check_map(n, path, {"family", "stage_widths", "blocks_per_stage", "stem_pool"});
  std::string family = to_string(a.family);
  get(n, "family", path, family);
  try {
    a.family = parse_family(family);
  } catch (const Error& e) {
    throw ConfigError(join(path, "family") + ": " + e.what());
  }
  get(n, "stage_widths", path, a.stage_widths);
  get(n, "blocks_per_stage", path, a.blocks_per_stage);
  if (n["stage_widths"] && !n["blocks_per_stage"]) a.blocks_per_stage.assign(a.stage_widths.size(), 1);
  get(n, "stem_pool", path, a.stem_pool);
  return a;
}

RunConfig from_yaml(const YAML::Node& root) {
  RunConfig c = default_run_config();
  if (!root || root.IsNull()) return c;
  check_map(root, "", {"name", "method", "seed", "output_dir", "dataset", "teacher", "student", "plan", "kd"});
  get(root, "name", "", c.name);
  std::string method = to_string(c.method);
  get(root, "method", "", method);
  try {
    c.method = parse_method(method);
  } catch (const Error& e) {
    throw ConfigError(std::string("method: ") + e.what());
  }
  get(root, "seed", "", c.seed);
  std::string out;
  get(root, "output_dir", "", out);
  c.output_dir = out;

  if (const YAML::Node d = root["dataset"]) {
    check_map(d, "dataset", {"synthetic", "train_path", "test_path"});
    std::string train, test;
    get(d, "train_path", "dataset", train);
    get(d, "test_path", "dataset", test);
    c.dataset.train_path = train;
    c.dataset.test_path = test;
    if (const YAML::Node s = d["synthetic"]) {
      check_map(s, "dataset.synthetic",
                {"num_classes", "samples_per_class", "resolution", "channels", "noise_std", "contrast", "seed"});
      SyntheticSpec spec = *c.dataset.synthetic;
      get(s, "num_classes", "dataset.synthetic", spec.num_classes);
      get(s, "samples_per_class", "dataset.synthetic", spec.samples_per_class);
      get(s, "resolution", "dataset.synthetic", spec.resolution);
      get(s, "channels", "dataset.synthetic", spec.channels);
      get(s, "noise_std", "dataset.synthetic", spec.noise_std);
      get(s, "contrast", "dataset.synthetic", spec.contrast);
      get(s, "seed", "dataset.synthetic", spec.seed);
      c.dataset.synthetic = spec;
    } else if (!train.empty() || !test.empty()) {
      c.dataset.synthetic.reset();
    }
  }

  const TeacherSource default_teacher = *c.teacher;
  if (c.method == Method::kScratch) c.teacher.reset();
  if (const YAML::Node t = root["teacher"]) {
    check_map(t, "teacher", {"arch", "checkpoint", "epochs", "policy", "batch_size", "seed"});
    TeacherSource ts = default_teacher;
    std::string ckpt;
    get(t, "checkpoint", "teacher", ckpt);
    ts.checkpoint = ckpt;
    if (t["arch"]) {
      ts.arch = parse_arch(t["arch"], "teacher.arch", *default_teacher.arch);
    } else if (!ckpt.empty()) {
      ts.arch.reset();
    }
    get(t, "epochs", "teacher", ts.epochs);
    get(t, "batch_size", "teacher", ts.batch_size);
    get(t, "seed", "teacher", ts.seed);
    if (t["policy"]) ts.policy = parse_policy(t["policy"], "teacher.policy", ts.policy);
    c.teacher = ts;
  }
  if (root["student"]) c.student = parse_arch(root["student"], "student", c.student);

  if (const YAML::Node p = root["plan"]) {
    const std::string path = "plan";
    check_map(p, path,
              {"batch_size", "momentum", "stages", "stage_epochs", "stage_lrs", "mimic_lr", "head_epochs",
               "joint_epochs", "eval_every", "stage_policy", "head_policy", "joint_policy"});
    get(p, "batch_size", path, c.plan.batch_size);
    get(p, "momentum", path, c.plan.momentum);
    if (p["stages"]) {
      int k = 0;
      get(p, "stages", path, k);
      c.plan.stages = k;
    }
    get(p, "stage_epochs", path, c.plan.stage_epochs);
    get(p, "stage_lrs", path, c.plan.stage_lrs);
    get(p, "mimic_lr", path, c.mimic_lr);
    get(p, "head_epochs", path, c.plan.head_epochs);
    if (p["joint_epochs"]) {
      int e = 0;
      get(p, "joint_epochs", path, e);
      c.plan.joint_epochs = e;
    }
    get(p, "eval_every", path, c.plan.eval_every);
    if (p["stage_policy"]) c.plan.stage_policy = parse_policy(p["stage_policy"], "plan.stage_policy", c.plan.stage_policy);
    if (p["head_policy"]) c.plan.head_policy = parse_policy(p["head_policy"], "plan.head_policy", c.plan.head_policy);
    if (p["joint_policy"]) c.plan.joint_policy = parse_policy(p["joint_policy"], "plan.joint_policy", c.plan.joint_policy);
  }
  if (const YAML::Node k = root["kd"]) {
    check_map(k, "kd", {"temperature", "loss_weight", "t2_rescale"});
    get(k, "temperature", "kd", c.kd.temperature);
    get(k, "loss_weight", "kd", c.kd.loss_weight);
    get(k, "t2_rescale", "kd", c.kd.t2_rescale);
  }
  return c;
}

std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void emit_list(YAML::Emitter& e, const std::vector<double>& v) {
  e << YAML::Flow << YAML::BeginSeq;
  for (double x : v) e << num(x);
  e << YAML::EndSeq;
}

void emit_policy(YAML::Emitter& e, const PolicyConfig& p) {
  e << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << (p.kind == PolicyKind::kPlateau ? "plateau" : "milestone");
  e << YAML::Key << "initial_lr" << YAML::Value << num(p.initial_lr);
  e << YAML::Key << "factor" << YAML::Value << num(p.factor);
  e << YAML::Key << "patience" << YAML::Value << p.patience;
  e << YAML::Key << "min_lr" << YAML::Value << num(p.min_lr);
  e << YAML::Key << "threshold" << YAML::Value << num(p.threshold);
  if (!p.milestones.empty()) {
    e << YAML::Key << "milestones" << YAML::Value << YAML::Flow << p.milestones;
  } else {
    e << YAML::Key << "milestone_fractions" << YAML::Value;
    emit_list(e, p.milestone_fractions);
  }
  e << YAML::EndMap;
}

void emit_arch(YAML::Emitter& e, const ArchSpec& a) {
  e << YAML::BeginMap;
  e << YAML::Key << "family" << YAML::Value << to_string(a.family);
  e << YAML::Key << "stage_widths" << YAML::Value << YAML::Flow << a.stage_widths;
  e << YAML::Key << "blocks_per_stage" << YAML::Value << YAML::Flow << a.blocks_per_stage;
  e << YAML::Key << "stem_pool" << YAML::Value << a.stem_pool;
  e << YAML::EndMap;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("config is not valid YAML: line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  RunConfig c = from_yaml(root);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string dump_run_config(const RunConfig& c) {
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "name" << YAML::Value << c.name;
  e << YAML::Key << "method" << YAML::Value << to_string(c.method);
  e << YAML::Key << "seed" << YAML::Value << c.seed;
  if (!c.output_dir.empty()) e << YAML::Key << "output_dir" << YAML::Value << c.output_dir.string();

  e << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  if (c.dataset.synthetic) {
    const SyntheticSpec& s = *c.dataset.synthetic;
    e << YAML::Key << "synthetic" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "num_classes" << YAML::Value << s.num_classes;
    e << YAML::Key << "samples_per_class" << YAML::Value << s.samples_per_class;
    e << YAML::Key << "resolution" << YAML::Value << s.resolution;
    e << YAML::Key << "channels" << YAML::Value << s.channels;
    e << YAML::Key << "noise_std" << YAML::Value << num(s.noise_std);
    e << YAML::Key << "contrast" << YAML::Value << num(s.contrast);
    e << YAML::Key << "seed" << YAML::Value << s.seed;
    e << YAML::EndMap;
  } else {
    e << YAML::Key << "train_path" << YAML::Value << c.dataset.train_path.string();
    e << YAML::Key << "test_path" << YAML::Value << c.dataset.test_path.string();
  }
  e << YAML::EndMap;

  if (c.teacher) {
    const TeacherSource& t = *c.teacher;
    e << YAML::Key << "teacher" << YAML::Value << YAML::BeginMap;
    if (t.arch) {
      e << YAML::Key << "arch" << YAML::Value;
      emit_arch(e, *t.arch);
      e << YAML::Key << "epochs" << YAML::Value << t.epochs;
      e << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
      e << YAML::Key << "seed" << YAML::Value << t.seed;
      e << YAML::Key << "policy" << YAML::Value;
      emit_policy(e, t.policy);
    } else {
      e << YAML::Key << "checkpoint" << YAML::Value << t.checkpoint.string();
    }
    e << YAML::EndMap;
  }
  e << YAML::Key << "student" << YAML::Value;
  emit_arch(e, c.student);

  const PlanSettings& p = c.plan;
  e << YAML::Key << "plan" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "batch_size" << YAML::Value << p.batch_size;
  e << YAML::Key << "momentum" << YAML::Value << num(p.momentum);
  if (p.stages) e << YAML::Key << "stages" << YAML::Value << *p.stages;
  e << YAML::Key << "stage_epochs" << YAML::Value << p.stage_epochs;
  if (!p.stage_lrs.empty()) {
    e << YAML::Key << "stage_lrs" << YAML::Value;
    emit_list(e, p.stage_lrs);
  }
  e << YAML::Key << "mimic_lr" << YAML::Value << num(c.mimic_lr);
  e << YAML::Key << "head_epochs" << YAML::Value << p.head_epochs;
  if (p.joint_epochs) e << YAML::Key << "joint_epochs" << YAML::Value << *p.joint_epochs;
  e << YAML::Key << "eval_every" << YAML::Value << p.eval_every;
  e << YAML::Key << "stage_policy" << YAML::Value;
  emit_policy(e, p.stage_policy);
  e << YAML::Key << "head_policy" << YAML::Value;
  emit_policy(e, p.head_policy);
  e << YAML::Key << "joint_policy" << YAML::Value;
  emit_policy(e, p.joint_policy);
  e << YAML::EndMap;

  e << YAML::Key << "kd" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "temperature" << YAML::Value << num(c.kd.temperature);
  e << YAML::Key << "loss_weight" << YAML::Value << num(c.kd.loss_weight);
  e << YAML::Key << "t2_rescale" << YAML::Value << c.kd.t2_rescale;
  e << YAML::EndMap;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

std::filesystem::path default_output_root() {
  const char* root = std::getenv("SSKD_OUTPUT_ROOT");
  return (root && *root) ? std::filesystem::path(root) : std::filesystem::path("runs");
}

std::filesystem::path resolve_output_dir(const RunConfig& config) {
  return config.output_dir.empty() ? default_output_root() / config.name : config.output_dir;
}

std::vector<double> resolution_scaled_lrs(const ModelConfig& config, int stages, double base) {
  const auto native = native_bounds(config);
  const auto bounds = repartition_bounds(native, stages);
  const auto res = config.stage_resolutions();
  const double first = static_cast<double>(res[0].first) * res[0].second;
  std::vector<double> out;
  for (int i = 1; i <= stages; ++i) {
    std::size_t j = 1;
    while (native[j] < bounds[i]) ++j;
    out.push_back(base * first / (static_cast<double>(res[j - 1].first) * res[j - 1].second));
  }
  return out;
}

}  // namespace sskd
