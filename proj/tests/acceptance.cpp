// Acceptance run: one PASS/FAIL line per criterion. Exit status is non-zero
// when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>

#include "sskd/binary_io.hpp"
#include "sskd/checkpoint.hpp"
#include "sskd/config.hpp"
#include "sskd/errors.hpp"
#include "sskd/harness.hpp"
#include "support/gradient_suite.hpp"

using namespace sskd;
using sskd::testing::run_gradient_suite;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* title, double limit_seconds, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_seconds > 0 && secs >= limit_seconds) {
    v.pass = false;
    v.detail += "; over the " + std::to_string(static_cast<int>(limit_seconds)) + " s limit";
  }
  if (!v.pass) ++failures;
  std::printf("criterion %d %s: %s (%s) [%.1f s]\n", id, title, v.pass ? "PASS" : "FAIL", v.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.2f", x);
  return s;
}

// Owner of a parameter, or of the module a buffer belongs to (same name
// prefix); -1 when nothing matches.
int owner_label(const ModelF& m, const std::string& name) {
  const auto prefix = [](const std::string& n) { return n.substr(0, n.rfind('.')); };
  for (auto* p : m.parameters()) {
    if (p->name == name) return m.owner_of(name);
  }
  for (auto* p : m.parameters()) {
    if (prefix(p->name) == prefix(name)) return m.owner_of(p->name);
  }
  return -1;
}

// Names whose digest changed between two snapshots.
std::vector<std::string> changed(const std::map<std::string, std::uint64_t>& before,
                                 const std::map<std::string, std::uint64_t>& after) {
  std::vector<std::string> out;
  for (const auto& [name, h] : before) {
    if (after.at(name) != h) out.push_back(name);
  }
  return out;
}

std::uint64_t parse_offset(const std::function<void()>& decode) {
  try {
    decode();
  } catch (const ParseError& e) {
    return e.offset();
  }
  throw StateError("corrupted bytes were accepted");
}

std::string slurp(const fs::path& p) {
  const auto b = read_file(p);
  return std::string(b.begin(), b.end());
}

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

struct DeskPair {
  ModelConfig teacher = desk_teacher_config();
  ModelConfig student = desk_student_config();
  PlanSettings settings;
  TrainData data;
};

DeskPair desk_pair(const RunConfig& base, const PreparedData& d, int stages, int stage_epochs, int head_epochs) {
  DeskPair p;
  p.settings = base.plan;
  p.settings.stage_epochs = stage_epochs;
  p.settings.head_epochs = head_epochs;
  p.settings.joint_epochs.reset();
  p.settings.stage_lrs = resolution_scaled_lrs(p.student, stages, base.mimic_lr);
  p.data = {&d.train, &d.test, d.stats.mean, d.stats.std};
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "sskd_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);

  RunConfig base = default_run_config();
  apply_quick_budget(base);
  base.output_dir = root;
  Workspace ws;
  const PreparedData& desk = ws.data(base.dataset);
  const std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

  // The trained desk teacher is shared by every criterion that distills.
  const auto t0 = std::chrono::steady_clock::now();
  const TeacherEntry& desk_teacher = ws.teacher(variant(base, Method::kSskd, 1));
  const double teacher_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("setup: desk teacher trained for %d epochs, test top1 %.2f [%.1f s]\n", base.teacher->epochs,
              desk_teacher.test.top1, teacher_seconds);
  std::fflush(stdout);

  criterion(1, "gradient suite", 120, [] {
    const auto reports = run_gradient_suite(20, 20240611);
    double worst = 0.0;
    std::string worst_op;
    int min_cases = 1 << 30;
    for (const auto& r : reports) {
      min_cases = std::min(min_cases, r.cases);
      if (r.max_rel_error >= worst) worst = r.max_rel_error, worst_op = r.op;
    }
    return Verdict{worst < 1e-6 && min_cases >= 20, std::to_string(reports.size()) + " ops, >= " +
                                                        std::to_string(min_cases) + " cases each, max rel err " +
                                                        fmt("%.2e", worst) + " (" + worst_op + ")"};
  });

  criterion(2, "phase isolation", 300, [&] {
    const DeskPair p = desk_pair(base, desk, 4, 1, 1);
    ModelF teacher = desk_teacher.model.clone();
    ModelF student = build_model<float>(p.student, 2);
    const TrainPlan plan = make_plan(Method::kSskd, 4, p.settings, 3);
    std::string bad;
    // Every tensor of `owner` must move, every other one must keep its bytes.
    const auto check = [&](const std::string& phase, int owner, const std::map<std::string, std::uint64_t>& before) {
      bool moved = false;
      for (const auto& name : changed(before, parameter_hashes(student))) {
        if (owner_label(student, name) == owner) {
          moved = true;
        } else {
          bad += " " + phase + " touched " + name + ";";
        }
      }
      if (!moved) bad += " " + phase + " did not move;";
    };
    for (int stage = 1; stage <= 4; ++stage) {
      const auto before = parameter_hashes(student);
      train_stage_sskd(student, teacher, desk.train, stage, plan.phases[stage - 1], plan, stage - 1);
      check("stage" + std::to_string(stage), stage, before);
    }
    const auto before = parameter_hashes(student);
    train_head(student, p.data, plan.phases[4], plan, 4);
    check("head", kHeadOwner, before);
    return Verdict{bad.empty(), bad.empty() ? "4 stage phases and the head phase touch only their owners" : bad};
  });

  criterion(3, "K=1 SSKD equals multi-loss", 300, [&] {
    const DeskPair p = desk_pair(base, desk, 1, 2, 1);
    ModelF teacher = desk_teacher.model.clone();
    TrainResult a = train_sskd(teacher, p.student, p.data, make_plan(Method::kSskd, 1, p.settings, 7));
    TrainResult b = train_multiloss(teacher, p.student, p.data, make_plan(Method::kMultiloss, 1, p.settings, 7));
    const bool same = encode_checkpoint(a.student) == encode_checkpoint(b.student);
    return Verdict{same && a.report.total_steps == b.report.total_steps,
                   std::string(same ? "bit-identical" : "weights differ") + " after " +
                       std::to_string(a.report.total_steps) + " steps, test top1 " +
                       fmt("%.2f", a.report.test->top1) + " vs " + fmt("%.2f", b.report.test->top1)};
  });

  criterion(4, "kd_joint with lambda 0 equals scratch", 0, [&] {
    DeskPair p = desk_pair(base, desk, 4, 1, 1);
    p.settings.joint_epochs = 2;
    ModelF teacher = desk_teacher.model.clone();
    KDSpec kd = base.kd;
    kd.loss_weight = 0.0;
    TrainResult a = train_kd_joint(teacher, p.student, p.data, kd, make_plan(Method::kKdJoint, 4, p.settings, 5));
    TrainResult b = train_scratch(p.student, p.data, make_plan(Method::kScratch, 4, p.settings, 5));
    const bool same = encode_checkpoint(a.student) == encode_checkpoint(b.student);
    return Verdict{same, std::string(same ? "bit-identical" : "weights differ") + " after " +
                             std::to_string(a.report.total_steps) + " steps"};
  });

  std::vector<double> sskd_top1, scratch_top1;
  // The teacher counts against the time limit.
  criterion(5, "desk-scale distillation effect", 1800 - teacher_seconds, [&] {
    const TeacherEntry& t = desk_teacher;
    for (auto seed : seeds) {
      sskd_top1.push_back(ws.outcome(variant(base, Method::kSskd, seed)).result.report.test->top1);
      scratch_top1.push_back(ws.outcome(variant(base, Method::kScratch, seed)).result.report.test->top1);
    }
    const bool ok = t.test.top1 >= 95.0 && mean(sskd_top1) > mean(scratch_top1);
    return Verdict{ok, "teacher " + fmt("%.2f", t.test.top1) + " (" + fmt("%.0f", teacher_seconds) + " s), SSKD mean " + fmt("%.2f", mean(sskd_top1)) +
                           " [" + join(sskd_top1) + "] vs scratch mean " + fmt("%.2f", mean(scratch_top1)) + " [" +
                           join(scratch_top1) + "]"};
  });

  criterion(6, "separate head recovers end-to-end accuracy", 0, [&] {
    RecipeOptions o;
    o.seeds = seeds;
    const RecipeReport r = run_recipe("separate-head", base, o, ws);
    write_recipe(r, root / "recipes");
    const double d = r.summary.at("mean_difference").get<double>();
    return Verdict{std::abs(d) <= 1.0, "end-to-end " + fmt("%.2f", r.summary.at("mean_end_to_end_top1").get<double>()) +
                                           ", retrained head " +
                                           fmt("%.2f", r.summary.at("mean_retrained_head_top1").get<double>()) +
                                           ", mean difference " + fmt("%.2f", d)};
  });

  criterion(7, "loss-weight sweep", 0, [&] {
    RunConfig c = variant(base, Method::kKdJoint, 1);
    c.name = "sweep";
    c.output_dir = root / "sweep";
    const SweepResult r = sweep_loss_weight(c, {1, 5, 10, 15, 25}, &ws);
    const std::string csv = slurp(r.dir / "sweep.csv");
    const std::string svg = slurp(r.dir / "sweep.svg");
    const auto rows = parse_sweep_csv(csv);
    const std::size_t lines = std::count(csv.begin(), csv.end(), '\n');
    const std::size_t points = count_of(svg, "class=\"kd-point\"");
    const std::size_t refs = count_of(svg, "class=\"sskd-ref\"");
    const bool ok = rows.size() == 6 && lines == 7 && points == 5 && refs == 1 && r.kd_top1_spread > 0.0;
    std::string kd;
    for (const auto& row : rows) kd += (kd.empty() ? "" : " ") + fmt("%.2f", row.acc.top1);
    return Verdict{ok, std::to_string(rows.size()) + " rows, " + std::to_string(points) + " KD points, " +
                           std::to_string(refs) + " SSKD line, top1 [" + kd + "], KD spread " +
                           fmt("%.2f", r.kd_top1_spread) + " points"};
  });

  criterion(8, "stage-count trend check", 0, [&] {
    RecipeOptions o;
    o.seeds = seeds;
    o.stages = {1, 2, 4};
    const RecipeReport r = run_recipe("stage-count", base, o, ws);
    write_recipe(r, root / "recipes");
    const auto means = r.summary.at("mean_top1").get<std::vector<double>>();
    const bool monotone = r.summary.at("monotone_nondecreasing").get<bool>();
    const bool ok = means.size() == 3 && monotone == r.flags.empty();
    return Verdict{ok, "mean top1 for K=1,2,4 [" + join(means) + "], " +
                           (monotone ? "monotone" : "not monotone, flagged: " + r.flags.front())};
  });

  criterion(9, "serialization", 0, [&] {
    std::string bad;
    ModelF student = ws.outcome(variant(base, Method::kSskd, 1)).result.student;
    const auto ckpt = encode_checkpoint(student);
    if (encode_checkpoint(decode_checkpoint(ckpt)) != ckpt) bad += " checkpoint re-encode differs;";
    save_checkpoint(student, root / "student.ckpt");
    if (encode_checkpoint(load_checkpoint(root / "student.ckpt")) != ckpt) bad += " checkpoint file differs;";

    save_binary(desk.train, root / "train.skds");
    const auto data = read_file(root / "train.skds");
    if (encode_dataset(load_binary(root / "train.skds")) != data) bad += " dataset round trip differs;";

    auto flipped = ckpt;
    flipped[ckpt.size() / 2] ^= 0x10;
    if (parse_offset([&] { decode_checkpoint(flipped); }) != ckpt.size() - 4) bad += " flipped checkpoint offset;";
    auto magic = ckpt;
    magic[0] ^= 0x01;
    if (parse_offset([&] { decode_checkpoint(magic); }) != 0) bad += " checkpoint magic offset;";
    auto version = data;
    version[4] ^= 0x7f;
    if (parse_offset([&] { decode_dataset(version); }) != 4) bad += " dataset version offset;";
    auto truncated = data;
    truncated.resize(data.size() - 100);
    parse_offset([&] { decode_dataset(truncated); });

    const FeatureMatrix f = extract_features(student, desk.test, 2, true);
    const auto fbytes = encode_features(f);
    if (encode_features(decode_features(fbytes)) != fbytes) bad += " feature round trip differs;";
    auto fcorrupt = fbytes;
    fcorrupt[20] ^= 0x01;
    parse_offset([&] { decode_features(fcorrupt); });

    return Verdict{bad.empty(), bad.empty() ? "checkpoint (" + std::to_string(ckpt.size()) + " B), dataset (" +
                                                  std::to_string(data.size()) +
                                                  " B) and feature files round-trip; corruption located"
                                            : bad};
  });

  criterion(10, "determinism", 0, [&] {
    RunConfig c = default_run_config();
    c.dataset.synthetic->samples_per_class = 20;
    c.teacher->epochs = 2;
    c.plan.stage_epochs = 1;
    c.plan.head_epochs = 1;
    c.plan.joint_epochs = 3;
    std::string bad;
    const std::vector<std::string> files = {"metrics.jsonl", "student.ckpt", "report.json", "teacher/metrics.jsonl",
                                            "teacher/teacher.ckpt"};
    for (Method m : {Method::kSskd, Method::kMultiloss, Method::kKdJoint, Method::kScratch}) {
      c.method = m;
      if (m == Method::kScratch) c.teacher.reset();
      std::vector<fs::path> dirs;
      c.name = to_string(m);
      for (int rep = 0; rep < 2; ++rep) {
        c.output_dir = root / "determinism" / std::to_string(rep) / c.name;
        dirs.push_back(run(c).dir);
      }
      for (const auto& f : files) {
        const bool a = fs::exists(dirs[0] / f), b = fs::exists(dirs[1] / f);
        if (a != b || (a && read_file(dirs[0] / f) != read_file(dirs[1] / f))) {
          bad += " " + to_string(m) + " " + f + " differs;";
        }
      }
    }
    return Verdict{bad.empty(), bad.empty() ? "two executions of 4 configs give identical metrics and checkpoints"
                                            : bad};
  });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
