#include "sskd/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sskd/binary_io.hpp"
#include "sskd/checkpoint.hpp"
#include "sskd/errors.hpp"
#include "sskd/ops.hpp"
#include "sskd/tape.hpp"

namespace sskd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string dataset_key(const DatasetSource& s) {
  json j;
  if (s.synthetic) {
    const SyntheticSpec& p = *s.synthetic;
    j = {{"classes", p.num_classes}, {"per_class", p.samples_per_class}, {"resolution", p.resolution},
         {"channels", p.channels},   {"noise", p.noise_std},             {"contrast", p.contrast},
         {"seed", p.seed}};
  } else {
    j = {{"train", s.train_path.string()}, {"test", s.test_path.string()}};
  }
  return j.dump();
}

json policy_json(const PolicyConfig& p) {
  return {{"kind", p.kind == PolicyKind::kPlateau ? "plateau" : "milestone"},
          {"initial_lr", p.initial_lr},
          {"factor", p.factor},
          {"patience", p.patience},
          {"min_lr", p.min_lr},
          {"threshold", p.threshold},
          {"milestones", p.milestones},
          {"milestone_fractions", p.milestone_fractions}};
}

std::string teacher_key(const RunConfig& c) {
  const TeacherSource& t = *c.teacher;
  json j;
  j["data"] = dataset_key(c.dataset);
  if (t.arch) {
    j["arch"] = {to_string(t.arch->family), t.arch->stage_widths, t.arch->blocks_per_stage, t.arch->stem_pool};
    j["epochs"] = t.epochs;
    j["batch"] = t.batch_size;
    j["seed"] = t.seed;
    j["policy"] = policy_json(t.policy);
  } else {
    j["checkpoint"] = t.checkpoint.string();
  }
  return j.dump();
}

std::string run_key(RunConfig c) {
  c.name = "run";
  c.output_dir.clear();
  return dump_run_config(c);
}

TrainData train_data(const PreparedData& d) { return {&d.train, &d.test, d.stats.mean, d.stats.std}; }

json accuracy_json(const Accuracy& a) { return {{"top1", a.top1}, {"top5", a.top5}}; }

json metrics_json(const std::string& run, const MetricsRecord& r) {
  json scalars = json::object();
  for (const auto& [k, v] : r.scalars) scalars[k] = v;
  return {{"run", run}, {"phase", r.phase}, {"epoch", r.epoch}, {"scalars", scalars}};
}

json timing_json(const MetricsRecord& r) {
  return {{"phase", r.phase}, {"epoch", r.epoch}, {"wall_seconds", r.wall_seconds}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text;
  if (!out) throw UsageError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void make_fresh_dir(const fs::path& dir) {
  if (fs::exists(dir)) {
    throw UsageError("output directory " + dir.string() + " already exists; refusing to overwrite a previous run");
  }
  fs::create_directories(dir);
}

int native_stages(const RunConfig& c) { return static_cast<int>(c.student.stage_widths.size()); }

}  // namespace

PreparedData load_data(const DatasetSource& source) {
  PreparedData d;
  if (source.synthetic) {
    auto s = gen_synthetic(*source.synthetic);
    d.train = std::move(s.train);
    d.test = std::move(s.test);
  } else {
    d.train = load_binary(source.train_path, Split::kTrain);
    d.test = load_binary(source.test_path, Split::kTest);
    if (d.train.images.dim(1) != d.test.images.dim(1) || d.train.images.dim(2) != d.test.images.dim(2) ||
        d.train.images.dim(3) != d.test.images.dim(3) || d.train.num_classes != d.test.num_classes) {
      throw ValidationError("train and test files disagree on image shape or class count");
    }
  }
  d.stats = channel_stats(d.train);
  return d;
}

const PreparedData& Workspace::data(const DatasetSource& source) {
  auto& slot = data_[dataset_key(source)];
  if (!slot) slot = std::make_unique<PreparedData>(load_data(source));
  return *slot;
}

const TeacherEntry& Workspace::teacher(const RunConfig& config) {
  if (!config.teacher) throw ConfigError("teacher: required for method " + to_string(config.method));
  auto& slot = teachers_[teacher_key(config)];
  if (slot) return *slot;
  const PreparedData& d = data(config.dataset);
  const TeacherSource& t = *config.teacher;
  auto entry = std::make_unique<TeacherEntry>(TeacherEntry{build_model<float>(desk_teacher_config(), 0), {}, {}, false});
  if (t.arch) {
    const ModelConfig mc = t.arch->resolve(d.train);
    PlanSettings ps;
    ps.batch_size = t.batch_size;
    ps.joint_policy = t.policy;
    ps.joint_epochs = t.epochs;
    TrainHooks hooks;
    hooks.metrics = [&](const MetricsRecord& r) {
      MetricsRecord tagged = r;
      tagged.phase = "teacher/" + r.phase;
      entry->records.push_back(tagged);
      if (progress) progress(tagged);
    };
    auto result = train_scratch(mc, train_data(d), make_plan(Method::kScratch, mc.num_stages(), ps, t.seed), hooks);
    entry->model = result.student;
    entry->trained_here = true;
  } else {
    entry->model = load_checkpoint(t.checkpoint);
    const ModelConfig& mc = entry->model.config();
    if (mc.input_channels != d.train.channels() || mc.input_h != d.train.height() || mc.input_w != d.train.width() ||
        mc.num_classes != d.train.num_classes) {
      throw ConfigError("teacher.checkpoint: model expects " + std::to_string(mc.input_channels) + "x" +
                        std::to_string(mc.input_h) + "x" + std::to_string(mc.input_w) + " inputs and " +
                        std::to_string(mc.num_classes) + " classes, dataset does not match");
    }
  }
  entry->test = evaluate(entry->model, d.test);
  slot = std::move(entry);
  return *slot;
}

namespace {

struct Resolved {
  ModelConfig student;
  TrainPlan plan;
};

// Everything that can be checked without training.
Resolved resolve(const RunConfig& config, const PreparedData& d) {
  config.validate();
  Resolved r;
  r.student = config.student.resolve(d.train);
  r.student.validate();
  const int k = config.plan.stages.value_or(r.student.num_stages());
  repartition_bounds(native_bounds(r.student), k);
  PlanSettings settings = config.plan;
  const bool staged = config.method == Method::kSskd || config.method == Method::kMultiloss;
  if (staged && settings.stage_lrs.empty() && config.mimic_lr > 0.0) {
    settings.stage_lrs = resolution_scaled_lrs(r.student, k, config.mimic_lr);
  }
  r.plan = make_plan(config.method, k, settings, config.seed);
  r.plan.validate();
  if (config.teacher && config.teacher->arch) {
    const ModelConfig tc = config.teacher->arch->resolve(d.train);
    tc.validate();
    repartition_bounds(native_bounds(tc), k);
  } else if (config.teacher && !std::filesystem::exists(config.teacher->checkpoint)) {
    throw ConfigError("teacher.checkpoint: " + config.teacher->checkpoint.string() + " does not exist");
  }
  return r;
}

}  // namespace

RunOutcome execute(const RunConfig& config, Workspace& ws, const TrainHooks& hooks) {
  const PreparedData& d = ws.data(config.dataset);
  const Resolved resolved = resolve(config, d);
  const ModelConfig& sc = resolved.student;
  const TrainPlan& plan = resolved.plan;
  const TrainData td = train_data(d);

  std::optional<RunOutcome> out;
  if (config.method == Method::kScratch) {
    out = RunOutcome{train_scratch(sc, td, plan, hooks), {}, std::nullopt};
  } else {
    const TeacherEntry& t = ws.teacher(config);
    ModelF teacher = t.model;
    switch (config.method) {
      case Method::kSskd:
        out = RunOutcome{train_sskd(teacher, sc, td, plan, hooks), {}, t.test};
        break;
      case Method::kMultiloss:
        out = RunOutcome{train_multiloss(teacher, sc, td, plan, hooks), {}, t.test};
        break;
      default:
        out = RunOutcome{train_kd_joint(teacher, sc, td, config.kd, plan, hooks), {}, t.test};
        break;
    }
  }
  out->train = evaluate(out->result.student, d.train);
  return std::move(*out);
}

const RunOutcome& Workspace::outcome(const RunConfig& config) {
  auto& slot = runs_[run_key(config)];
  if (!slot) {
    TrainHooks hooks;
    hooks.metrics = progress;
    slot = std::make_unique<RunOutcome>(execute(config, *this, hooks));
  }
  return *slot;
}

RunArtifacts run(const RunConfig& config, Workspace* ws) {
  config.validate();
  Workspace local;
  Workspace& w = ws ? *ws : local;
  const fs::path dir = resolve_output_dir(config);
  if (fs::exists(dir)) {
    throw UsageError("output directory " + dir.string() + " already exists; refusing to overwrite a previous run");
  }
  resolve(config, w.data(config.dataset));
  make_fresh_dir(dir);
  write_text(dir / "config.yaml", dump_run_config(config));

  const TeacherEntry* teacher = nullptr;
  if (config.distills()) {
    teacher = &w.teacher(config);
    if (teacher->trained_here) {
      fs::create_directories(dir / "teacher");
      std::string lines;
      for (const auto& r : teacher->records) lines += metrics_json(config.name, r).dump() + "\n";
      write_text(dir / "teacher" / "metrics.jsonl", lines);
      save_checkpoint(teacher->model, dir / "teacher" / "teacher.ckpt");
    }
  }

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  std::ofstream timing(dir / "timing.jsonl", std::ios::binary);
  if (!metrics || !timing) throw UsageError("cannot create metrics files in " + dir.string());
  TrainHooks hooks;
  hooks.metrics = [&](const MetricsRecord& r) {
    metrics << metrics_json(config.name, r).dump() << "\n" << std::flush;
    timing << timing_json(r).dump() << "\n" << std::flush;
    if (w.progress) w.progress(r);
  };
  RunOutcome outcome = execute(config, w, hooks);
  save_checkpoint(outcome.result.student, dir / "student.ckpt");

  const RunReport& rep = outcome.result.report;
  const PreparedData& d = w.data(config.dataset);
  json report;
  report["run"] = config.name;
  report["method"] = to_string(rep.method);
  report["seed"] = rep.seed;
  report["stages"] = rep.stages;
  report["total_steps"] = rep.total_steps;
  json phases = json::array();
  for (const auto& p : rep.phases) {
    phases.push_back({{"id", p.id},
                      {"epochs", p.epochs},
                      {"steps", p.steps},
                      {"final_lr", p.final_lr},
                      {"ended_by_policy", p.ended_by_policy},
                      {"loss_trace", p.loss_trace},
                      {"lr_trace", p.lr_trace}});
  }
  report["phases"] = phases;
  if (rep.test) report["test"] = accuracy_json(*rep.test);
  report["train"] = accuracy_json(outcome.train);
  report["normalization"] = {{"mean", d.stats.mean}, {"std", d.stats.std}};
  if (teacher) {
    report["teacher"] = {{"test", accuracy_json(teacher->test)},
                         {"source", teacher->trained_here ? std::string("teacher/teacher.ckpt")
                                                          : config.teacher->checkpoint.string()}};
  }
  if (rep.kd) {
    report["kd"] = {{"temperature", rep.kd->temperature},
                    {"loss_weight", rep.kd->loss_weight},
                    {"t2_rescale", rep.kd->t2_rescale}};
  }
  write_text(dir / "report.json", report.dump(2) + "\n");
  return {dir, rep, outcome.train, outcome.teacher_test};
}

Accuracy eval_checkpoint(const fs::path& checkpoint, const Dataset& dataset) {
  ModelF model = load_checkpoint(checkpoint);
  const ModelConfig& c = model.config();
  if (c.input_channels != dataset.channels() || c.input_h != dataset.height() || c.input_w != dataset.width()) {
    throw UsageError("checkpoint expects " + std::to_string(c.input_channels) + "x" + std::to_string(c.input_h) +
                     "x" + std::to_string(c.input_w) + " images, dataset has " +
                     std::to_string(dataset.channels()) + "x" + std::to_string(dataset.height()) + "x" +
                     std::to_string(dataset.width()));
  }
  if (dataset.num_classes > c.num_classes) {
    throw UsageError("dataset has " + std::to_string(dataset.num_classes) + " classes, checkpoint only " +
                     std::to_string(c.num_classes));
  }
  return evaluate(model, dataset);
}

// ---- sweep -----------------------------------------------------------------

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "method,lambda,top1,top5\n";
  for (const auto& r : rows) {
    out += r.method + "," + (r.lambda ? num(*r.lambda) : std::string("lambda-free")) + "," + fixed(r.acc.top1, 4) +
           "," + fixed(r.acc.top5, 4) + "\n";
  }
  return out;
}

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "method,lambda,top1,top5") {
    throw ValidationError("sweep CSV line 1: expected header 'method,lambda,top1,top5'");
  }
  std::vector<SweepRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 4) throw ValidationError("sweep CSV line " + std::to_string(line_no) + ": expected 4 fields");
    auto to_double = [&](const std::string& s) {
      double v = 0.0;
      const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ValidationError("sweep CSV line " + std::to_string(line_no) + ": '" + s + "' is not a number");
      }
      return v;
    };
    SweepRow r;
    r.method = f[0];
    if (f[1] != "lambda-free") r.lambda = to_double(f[1]);
    r.acc = {to_double(f[2]), to_double(f[3])};
    rows.push_back(r);
  }
  return rows;
}

std::string sweep_svg(const std::vector<SweepRow>& rows) {
  std::vector<const SweepRow*> kd;
  std::optional<double> ref;
  for (const auto& r : rows) {
    if (r.lambda) {
      kd.push_back(&r);
    } else if (!ref) {
      ref = r.acc.top1;
    }
  }
  std::sort(kd.begin(), kd.end(), [](const SweepRow* a, const SweepRow* b) { return *a->lambda < *b->lambda; });

  const double w = 640, h = 400, left = 60, right = 20, top = 30, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 100;
  if (!kd.empty()) {
    x0 = *kd.front()->lambda;
    x1 = *kd.back()->lambda;
  }
  if (x1 - x0 < 1e-12) {
    x0 -= 1;
    x1 += 1;
  }
  std::vector<double> ys;
  for (const auto* r : kd) ys.push_back(r->acc.top1);
  if (ref) ys.push_back(*ref);
  if (!ys.empty()) {
    y0 = *std::min_element(ys.begin(), ys.end()) - 1.0;
    y1 = *std::max_element(ys.begin(), ys.end()) + 1.0;
  }
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  auto py = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
    << " " << h << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line class=\"axis\" x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\""
    << h - bottom << "\" stroke=\"black\"/>\n";
  s << "<line class=\"axis\" x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
    << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0;
    s << "<text class=\"tick\" x=\"" << left - 6 << "\" y=\"" << fixed(py(yv) + 4, 1)
      << "\" font-size=\"11\" text-anchor=\"end\">" << fixed(yv, 1) << "</text>\n";
  }
  for (const auto* r : kd) {
    s << "<text class=\"tick\" x=\"" << fixed(px(*r->lambda), 1) << "\" y=\"" << h - bottom + 16
      << "\" font-size=\"11\" text-anchor=\"middle\">" << num(*r->lambda) << "</text>\n";
  }
  s << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 10
    << "\" font-size=\"12\" text-anchor=\"middle\">loss weight (lambda)</text>\n";
  s << "<text x=\"14\" y=\"" << (top + h - bottom) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
    << (top + h - bottom) / 2 << ")\">top-1 (%)</text>\n";
  if (ref) {
    s << "<line class=\"sskd-ref\" x1=\"" << left << "\" y1=\"" << fixed(py(*ref), 2) << "\" x2=\"" << w - right
      << "\" y2=\"" << fixed(py(*ref), 2) << "\" stroke=\"#d62728\" stroke-dasharray=\"6 4\"/>\n";
    s << "<text x=\"" << w - right - 4 << "\" y=\"" << fixed(py(*ref) - 6, 2)
      << "\" font-size=\"11\" text-anchor=\"end\" fill=\"#d62728\">SSKD " << fixed(*ref) << "</text>\n";
  }
  if (!kd.empty()) {
    s << "<polyline class=\"kd-line\" fill=\"none\" stroke=\"#1f77b4\" points=\"";
    for (std::size_t i = 0; i < kd.size(); ++i) {
      s << (i ? " " : "") << fixed(px(*kd[i]->lambda), 2) << "," << fixed(py(kd[i]->acc.top1), 2);
    }
    s << "\"/>\n";
    for (const auto* r : kd) {
      s << "<circle class=\"kd-point\" cx=\"" << fixed(px(*r->lambda), 2) << "\" cy=\"" << fixed(py(r->acc.top1), 2)
        << "\" r=\"4\" fill=\"#1f77b4\"><title>lambda " << num(*r->lambda) << ": " << fixed(r->acc.top1)
        << "</title></circle>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

void plot_csv(const fs::path& csv, const fs::path& svg) { write_text(svg, sweep_svg(parse_sweep_csv(read_text(csv)))); }

SweepResult sweep_loss_weight(const RunConfig& base, const std::vector<double>& lambdas, Workspace* ws) {
  if (lambdas.empty()) throw UsageError("sweep needs at least one loss weight");
  if (base.method != Method::kKdJoint) {
    throw UsageError("sweep base config must use method kd_joint, got " + to_string(base.method));
  }
  base.validate();
  Workspace local;
  Workspace& w = ws ? *ws : local;
  SweepResult result;
  result.dir = resolve_output_dir(base);
  make_fresh_dir(result.dir);

  for (double lambda : lambdas) {
    RunConfig c = base;
    c.kd.loss_weight = lambda;
    c.name = "kd_lambda_" + num(lambda);
    c.output_dir = result.dir / c.name;
    const RunArtifacts a = run(c, &w);
    result.rows.push_back({"kd_joint", lambda, *a.report.test});
  }
  RunConfig s = base;
  s.method = Method::kSskd;
  s.name = "sskd";
  s.output_dir = result.dir / s.name;
  const RunArtifacts a = run(s, &w);
  result.rows.push_back({"sskd", std::nullopt, *a.report.test});

  double lo = 1e300, hi = -1e300;
  for (const auto& r : result.rows) {
    if (!r.lambda) continue;
    lo = std::min(lo, r.acc.top1);
    hi = std::max(hi, r.acc.top1);
  }
  result.kd_top1_spread = hi - lo;
  write_text(result.dir / "sweep.csv", sweep_csv(result.rows));
  write_text(result.dir / "sweep.svg", sweep_svg(result.rows));
  json j;
  j["kd_top1_spread"] = result.kd_top1_spread;
  j["sskd_top1"] = result.rows.back().acc.top1;
  j["lambdas"] = lambdas;
  write_text(result.dir / "sweep.json", j.dump(2) + "\n");
  return result;
}

// ---- recipes ---------------------------------------------------------------

std::string RecipeReport::markdown() const {
  std::string out = "# " + name + "\n\n|";
  for (const auto& c : columns) out += " " + c + " |";
  out += "\n|";
  for (std::size_t i = 0; i < columns.size(); ++i) out += "---|";
  out += "\n";
  for (const auto& r : rows) {
    out += "|";
    for (const auto& cell : r) out += " " + cell + " |";
    out += "\n";
  }
  if (!flags.empty()) {
    out += "\n";
    for (const auto& f : flags) out += "**FLAG:** " + f + "\n";
  }
  return out;
}

std::string RecipeReport::csv() const {
  std::string out;
  for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
  out += "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + r[i];
    out += "\n";
  }
  return out;
}

const std::vector<std::string>& recipe_names() {
  static const std::vector<std::string> names = {"separate-head", "multiloss-vs-sskd", "stage-count", "teacher-zoo"};
  return names;
}

RunConfig variant(const RunConfig& base, Method method, std::uint64_t seed, std::optional<int> stages) {
  RunConfig c = base;
  c.method = method;
  c.seed = seed;
  c.output_dir.clear();
  if (method == Method::kScratch) {
    c.teacher.reset();
    c.plan.stages.reset();
  } else {
    if (!c.teacher) c.teacher = default_run_config().teacher;
    c.plan.stages = stages;
    if (stages && *stages == native_stages(c)) c.plan.stages.reset();
  }
  // Scratch keeps parity with the K-stage distillation budget.
  if (method == Method::kScratch && !c.plan.joint_epochs) {
    c.plan.joint_epochs = native_stages(base) * base.plan.stage_epochs + base.plan.head_epochs;
  }
  return c;
}

namespace {

double top1(const RunOutcome& o) { return o.result.report.test->top1; }

std::string arch_label(const ArchSpec& a) {
  std::string s;
  for (std::size_t i = 0; i < a.stage_widths.size(); ++i) s += (i ? "/" : "") + std::to_string(a.stage_widths[i]);
  bool uniform = std::all_of(a.blocks_per_stage.begin(), a.blocks_per_stage.end(),
                             [&](int b) { return b == a.blocks_per_stage.front(); });
  if (uniform && !a.blocks_per_stage.empty()) {
    s += " x" + std::to_string(a.blocks_per_stage.front());
  }
  return s;
}

RecipeReport separate_head(const RunConfig& base, const RecipeOptions& o, Workspace& ws) {
  RecipeReport r;
  r.name = "separate-head";
  r.columns = {"seed", "end_to_end_top1", "retrained_head_top1", "difference"};
  std::vector<double> e2e, re, diff;
  for (auto seed : o.seeds) {
    const RunConfig c = variant(base, Method::kScratch, seed);
    const RunOutcome& out = ws.outcome(c);
    ModelF student = out.result.student.clone();
    const PreparedData& d = ws.data(c.dataset);
    const TrainPlan plan = make_plan(Method::kSskd, student.num_stages(), c.plan, seed);
    const PhaseDescriptor& head = plan.phases.back();
    TrainHooks hooks;
    hooks.metrics = ws.progress;
    train_head(student, train_data(d), head, plan, static_cast<int>(plan.phases.size()) - 1, hooks);
    set_frozen_all(student, false);
    const double a = top1(out);
    const double b = evaluate(student, d.test).top1;
    e2e.push_back(a);
    re.push_back(b);
    diff.push_back(b - a);
    r.rows.push_back({std::to_string(seed), fixed(a), fixed(b), fixed(b - a)});
  }
  r.rows.push_back({"mean", fixed(mean(e2e)), fixed(mean(re)), fixed(mean(diff))});
  r.summary = {{"end_to_end_top1", e2e},
               {"retrained_head_top1", re},
               {"mean_end_to_end_top1", mean(e2e)},
               {"mean_retrained_head_top1", mean(re)},
               {"mean_difference", mean(diff)}};
  if (std::abs(mean(diff)) >= 0.5) {
    r.flags.push_back("mean head-retraining difference " + fixed(mean(diff)) + " is not below 0.5 points");
  }
  return r;
}

RecipeReport multiloss_vs_sskd(const RunConfig& base, const RecipeOptions& o, Workspace& ws) {
  RecipeReport r;
  r.name = "multiloss-vs-sskd";
  r.columns = {"stages", "seed", "multiloss_top1", "sskd_top1", "improvement"};
  json per_k = json::array();
  for (int k : o.stages) {
    std::vector<double> ml, sk;
    for (auto seed : o.seeds) {
      const double a = top1(ws.outcome(variant(base, Method::kMultiloss, seed, k)));
      const double b = top1(ws.outcome(variant(base, Method::kSskd, seed, k)));
      ml.push_back(a);
      sk.push_back(b);
      r.rows.push_back({std::to_string(k), std::to_string(seed), fixed(a), fixed(b), fixed(b - a)});
    }
    r.rows.push_back({std::to_string(k), "mean", fixed(mean(ml)), fixed(mean(sk)), fixed(mean(sk) - mean(ml))});
    per_k.push_back({{"stages", k},
                     {"multiloss_top1", ml},
                     {"sskd_top1", sk},
                     {"mean_multiloss_top1", mean(ml)},
                     {"mean_sskd_top1", mean(sk)},
                     {"improvement", mean(sk) - mean(ml)}});
  }
  r.summary = {{"rows", per_k}};
  return r;
}

RecipeReport stage_count(const RunConfig& base, const RecipeOptions& o, Workspace& ws) {
  RecipeReport r;
  r.name = "stage-count";
  r.columns = {"stages", "seed", "sskd_top1"};
  std::vector<double> means;
  json per_k = json::array();
  for (int k : o.stages) {
    std::vector<double> v;
    for (auto seed : o.seeds) {
      v.push_back(top1(ws.outcome(variant(base, Method::kSskd, seed, k))));
      r.rows.push_back({std::to_string(k), std::to_string(seed), fixed(v.back())});
    }
    means.push_back(mean(v));
    r.rows.push_back({std::to_string(k), "mean", fixed(means.back())});
    per_k.push_back({{"stages", k}, {"sskd_top1", v}, {"mean_top1", means.back()}});
  }
  bool monotone = true;
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] < means[i - 1]) {
      monotone = false;
      r.flags.push_back("mean top-1 is not monotone non-decreasing in K: K=" + std::to_string(o.stages[i - 1]) +
                        " gives " + fixed(means[i - 1]) + ", K=" + std::to_string(o.stages[i]) + " gives " +
                        fixed(means[i]));
    }
  }
  r.summary = {{"rows", per_k}, {"mean_top1", means}, {"monotone_nondecreasing", monotone}};
  return r;
}

RecipeReport teacher_zoo(const RunConfig& base, const RecipeOptions& o, Workspace& ws) {
  RecipeReport r;
  r.name = "teacher-zoo";
  r.columns = {"teacher", "seed", "teacher_top1", "scratch_top1", "sskd_top1", "improvement"};
  const TeacherSource proto = base.teacher ? *base.teacher : *default_run_config().teacher;
  std::vector<TeacherSource> teachers;
  if (o.teachers.empty()) {
    teachers.push_back(proto);
    TeacherSource small = proto;
    small.checkpoint.clear();
    small.arch = ArchSpec{Family::kResidualCnn, {12, 24, 48, 96}, {1, 1, 1, 1}, 1};
    if (proto.arch) small.arch->stem_pool = proto.arch->stem_pool;
    teachers.push_back(small);
  } else {
    for (const auto& a : o.teachers) {
      TeacherSource t = proto;
      t.checkpoint.clear();
      t.arch = a;
      teachers.push_back(t);
    }
  }
  std::vector<double> scratch;
  for (auto seed : o.seeds) scratch.push_back(top1(ws.outcome(variant(base, Method::kScratch, seed))));
  json per_t = json::array();
  for (const auto& t : teachers) {
    RunConfig tb = base;
    tb.teacher = t;
    const std::string label = t.arch ? arch_label(*t.arch) : t.checkpoint.filename().string();
    std::vector<double> sk;
    double teacher_top1 = 0.0;
    for (std::size_t i = 0; i < o.seeds.size(); ++i) {
      const RunOutcome& out = ws.outcome(variant(tb, Method::kSskd, o.seeds[i]));
      teacher_top1 = out.teacher_test->top1;
      sk.push_back(top1(out));
      r.rows.push_back({label, std::to_string(o.seeds[i]), fixed(teacher_top1), fixed(scratch[i]), fixed(sk.back()),
                        fixed(sk.back() - scratch[i])});
    }
    r.rows.push_back(
        {label, "mean", fixed(teacher_top1), fixed(mean(scratch)), fixed(mean(sk)), fixed(mean(sk) - mean(scratch))});
    per_t.push_back({{"teacher", label},
                     {"teacher_top1", teacher_top1},
                     {"sskd_top1", sk},
                     {"mean_sskd_top1", mean(sk)},
                     {"improvement", mean(sk) - mean(scratch)}});
  }
  r.summary = {{"scratch_top1", scratch}, {"mean_scratch_top1", mean(scratch)}, {"teachers", per_t}};
  return r;
}

}  // namespace

RecipeReport run_recipe(const std::string& name, const RunConfig& base, const RecipeOptions& options,
                        Workspace& ws) {
  if (options.seeds.empty()) throw UsageError("recipe needs at least one seed");
  base.validate();
  if (name == "separate-head") return separate_head(base, options, ws);
  if (name == "multiloss-vs-sskd") return multiloss_vs_sskd(base, options, ws);
  if (name == "stage-count") return stage_count(base, options, ws);
  if (name == "teacher-zoo") return teacher_zoo(base, options, ws);
  std::string list;
  for (const auto& n : recipe_names()) list += (list.empty() ? "" : ", ") + n;
  throw UsageError("unknown recipe '" + name + "' (expected one of: " + list + ")");
}

void write_recipe(const RecipeReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  for (const char* ext : {".md", ".csv", ".json"}) {
    if (fs::exists(dir / (report.name + ext))) {
      throw UsageError((dir / (report.name + ext)).string() + " already exists; refusing to overwrite");
    }
  }
  write_text(dir / (report.name + ".md"), report.markdown());
  write_text(dir / (report.name + ".csv"), report.csv());
  json j = {{"recipe", report.name}, {"summary", report.summary}, {"flags", report.flags}};
  write_text(dir / (report.name + ".json"), j.dump(2) + "\n");
}

// ---- features --------------------------------------------------------------

namespace {
constexpr char kFeatureMagic[] = "SKFE";
constexpr std::uint16_t kFeatureVersion = 1;
}  // namespace

FeatureMatrix extract_features(ModelF& model, const Dataset& dataset, int stage, bool pooled) {
  if (stage < 1 || stage > model.num_stages()) {
    throw UsageError("stage " + std::to_string(stage) + " out of range 1.." + std::to_string(model.num_stages()));
  }
  model.check_input(dataset.images);
  NoGradScope<float> no_grad;
  FeatureMatrix f;
  f.stage = stage;
  f.pooled = pooled;
  f.rows = dataset.size();
  f.labels = dataset.labels;
  const int n = dataset.size();
  constexpr int kChunk = 256;
  for (int begin = 0; begin < n; begin += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, n - begin));
    std::iota(idx.begin(), idx.end(), static_cast<std::size_t>(begin));
    const TensorF x = ops::gather_rows(dataset.images, std::span<const std::size_t>(idx));
    TensorF feat = model.forward_stages(x, stage, false).features.back();
    if (pooled) feat = model.pool_features(feat);
    f.cols = static_cast<int>(feat.size() / idx.size());
    f.values.insert(f.values.end(), feat.values().begin(), feat.values().end());
  }
  return f;
}

std::vector<std::uint8_t> encode_features(const FeatureMatrix& f) {
  if (static_cast<std::size_t>(f.rows) * f.cols != f.values.size() || f.labels.size() != static_cast<std::size_t>(f.rows)) {
    throw ValidationError("feature matrix extents do not match its payload");
  }
  ByteWriter w;
  w.raw(std::string_view(kFeatureMagic, 4));
  w.u16(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(f.rows));
  w.u32(static_cast<std::uint32_t>(f.cols));
  w.u8(static_cast<std::uint8_t>(f.stage));
  w.u8(f.pooled ? 1 : 0);
  for (float v : f.values) w.f32(v);
  for (int y : f.labels) {
    if (y < 0 || y > 0xFFFF) throw ValidationError("label " + std::to_string(y) + " does not fit in u16");
    w.u16(static_cast<std::uint16_t>(y));
  }
  w.u32(crc32_of(w.bytes()));
  return w.take();
}

FeatureMatrix decode_features(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(4, "magic") != std::string_view(kFeatureMagic, 4)) throw ParseError(0, "bad magic, expected \"SKFE\"");
  const std::uint16_t version = r.u16();
  if (version != kFeatureVersion) throw ParseError(4, "unsupported feature file version " + std::to_string(version));
  FeatureMatrix f;
  f.rows = static_cast<int>(r.u32());
  f.cols = static_cast<int>(r.u32());
  f.stage = r.u8();
  const std::size_t flag_at = r.offset();
  const std::uint8_t pooled = r.u8();
  if (pooled > 1) throw ParseError(flag_at, "invalid pooled flag " + std::to_string(pooled));
  f.pooled = pooled == 1;
  const std::size_t expected = 16 + static_cast<std::size_t>(f.rows) * f.cols * 4 + static_cast<std::size_t>(f.rows) * 2 + 4;
  if (bytes.size() != expected) {
    throw ParseError(bytes.size() < expected ? bytes.size() : expected,
                     "feature file length mismatch: expected " + std::to_string(expected) + " bytes, got " +
                         std::to_string(bytes.size()));
  }
  const std::size_t crc_at = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[crc_at + i]) << (8 * i);
  if (stored != crc32_of(bytes.first(crc_at))) throw ParseError(crc_at, "checksum mismatch");
  f.values.resize(static_cast<std::size_t>(f.rows) * f.cols);
  for (auto& v : f.values) v = r.f32();
  f.labels.resize(f.rows);
  for (auto& y : f.labels) y = r.u16();
  return f;
}

FeatureMatrix export_features(const fs::path& checkpoint, const Dataset& dataset, int stage, const fs::path& out,
                              bool pooled) {
  ModelF model = load_checkpoint(checkpoint);
  FeatureMatrix f = extract_features(model, dataset, stage, pooled);
  write_file(out, encode_features(f));
  return f;
}

}  // namespace sskd
