#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "doctest.h"
#include "sskd/binary_io.hpp"
#include "sskd/checkpoint.hpp"
#include "sskd/errors.hpp"
#include "sskd/harness.hpp"

using namespace sskd;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
name: tiny
method: sskd
dataset:
  synthetic: {num_classes: 4, samples_per_class: 6, resolution: 8}
teacher:
  arch: {stage_widths: [6, 8], blocks_per_stage: [1, 1]}
  epochs: 2
student:
  stage_widths: [3, 5]
plan:
  batch_size: 8
  stage_epochs: 2
  head_epochs: 2
)";

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sskd_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count(const std::string& text, const std::string& needle) {
  int n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

RunConfig tiny(const std::string& dir_name) {
  RunConfig c = parse_run_config(kTiny);
  c.output_dir = scratch_dir(dir_name);
  return c;
}

std::string config_error(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("run configs parse strictly and round-trip through YAML") {
  const RunConfig d = parse_run_config("");
  CHECK(d.method == Method::kSskd);
  CHECK(d.teacher->epochs == 30);
  CHECK(d.plan.stage_epochs == 10);
  CHECK(d.plan.head_epochs == 10);
  CHECK(d.kd.temperature == 4.0);
  CHECK(d.dataset.synthetic->samples_per_class == 200);
  CHECK(d.dataset.synthetic->noise_std == 0.3);

  const RunConfig c = parse_run_config(kTiny);
  CHECK(c.student.stage_widths == std::vector<int>{3, 5});
  CHECK(c.student.blocks_per_stage == std::vector<int>{1, 1});
  CHECK(dump_run_config(parse_run_config(dump_run_config(c))) == dump_run_config(c));

  CHECK(config_error("kd: {temprature: 4}").find("kd.temprature") != std::string::npos);
  CHECK(config_error("plan: {stage_epochs: ten}").find("plan.stage_epochs") != std::string::npos);
  CHECK(config_error("method: distill").find("method") != std::string::npos);
  CHECK(config_error("method: scratch\nteacher: {epochs: 3}").find("teacher") != std::string::npos);
  CHECK(config_error("teacher: {checkpoint: t.ckpt, arch: {stage_widths: [4]}}").find("exactly one") !=
        std::string::npos);
  CHECK(config_error("dataset: {train_path: a.skds}").find("test_path") != std::string::npos);
  CHECK(config_error("plan: {joint_policy: {kind: milestone, milestones: [60]}}").empty());
  CHECK_FALSE(config_error("method: kd_joint\nkd: {temperature: 0}").empty());
  CHECK_FALSE(config_error("a: [").empty());

  const RunConfig s = parse_run_config("method: scratch");
  CHECK_FALSE(s.teacher.has_value());
}

TEST_CASE("per-stage lrs scale with the feature-map area") {
  const ModelConfig c = desk_student_config();
  const auto k4 = resolution_scaled_lrs(c, 4, 1e-5);
  REQUIRE(k4.size() == 4);
  CHECK(k4[0] == doctest::Approx(1e-5));
  CHECK(k4[1] == doctest::Approx(4e-5));
  CHECK(k4[2] == doctest::Approx(1.6e-4));
  CHECK(k4[3] == doctest::Approx(6.4e-4));
  const auto k2 = resolution_scaled_lrs(c, 2, 1e-5);
  CHECK(k2[0] == doctest::Approx(1.6e-4));
  CHECK(k2[1] == doctest::Approx(6.4e-4));
}

TEST_CASE("a run writes its artifacts and is reproducible byte for byte") {
  const RunConfig a = tiny("det_a");
  RunConfig b = a;
  b.output_dir = scratch_dir("det_b");
  const RunArtifacts ra = run(a);
  run(b);
  for (const char* f : {"metrics.jsonl", "student.ckpt", "report.json", "teacher/teacher.ckpt",
                        "teacher/metrics.jsonl"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(ra.dir / f));
    CHECK(slurp(ra.dir / f) == slurp(b.output_dir / f));
  }
  CHECK(fs::exists(ra.dir / "timing.jsonl"));
  CHECK(slurp(ra.dir / "metrics.jsonl").find("wall") == std::string::npos);

  const auto report = nlohmann::json::parse(slurp(ra.dir / "report.json"));
  CHECK(report["phases"].size() == 3);  // K stage phases + head
  CHECK(report["total_steps"].get<long long>() == ra.report.total_steps);
  CHECK(report["normalization"]["mean"].size() == 3);
  CHECK(report.contains("teacher"));

  std::set<std::string> phases;
  std::istringstream lines(slurp(ra.dir / "metrics.jsonl"));
  std::string line;
  while (std::getline(lines, line)) phases.insert(nlohmann::json::parse(line)["phase"].get<std::string>());
  CHECK(phases == std::set<std::string>{"stage1", "stage2", "head"});

  CHECK_THROWS_AS(run(a), UsageError);
  CHECK(eval_checkpoint(ra.dir / "student.ckpt", load_data(a.dataset).test).top1 == ra.report.test->top1);
}

TEST_CASE("scratch on noiseless data fits the training set; kd runs record T") {
  RunConfig c = parse_run_config(R"(
method: scratch
dataset:
  synthetic: {num_classes: 4, samples_per_class: 5, resolution: 8, noise_std: 0, contrast: 0.4}
student: {stage_widths: [8, 16]}
plan: {batch_size: 4, joint_epochs: 15}
)");
  c.output_dir = scratch_dir("noiseless");
  const RunArtifacts r = run(c);
  CHECK(r.train.top1 == 100.0);

  RunConfig kd = tiny("kd");
  kd.method = Method::kKdJoint;
  run(kd);
  const auto report = nlohmann::json::parse(slurp(kd.output_dir / "report.json"));
  CHECK(report["kd"]["temperature"].get<double>() == 4.0);
  CHECK(report["phases"].size() == 1);
}

TEST_CASE("inconsistent configs are rejected before any training") {
  RunConfig c = tiny("early");
  c.plan.stage_lrs = {1e-3};
  CHECK_THROWS_AS(run(c), ConfigError);
  CHECK_FALSE(fs::exists(c.output_dir));
  c = tiny("early");
  c.plan.stages = 7;
  CHECK_THROWS_AS(run(c), ConfigError);
  CHECK_FALSE(fs::exists(c.output_dir));
}

TEST_CASE("divergence aborts with the phase and epoch") {
  RunConfig c = tiny("nan");
  c.plan.stage_lrs = {1e20, 1e20};
  try {
    run(c);
    FAIL("diverging run finished");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    CHECK(what.find("stage1") != std::string::npos);
    CHECK(what.find("epoch") != std::string::npos);
  }
}

TEST_CASE("evaluation of random weights sits at chance") {
  SyntheticSpec spec;
  spec.samples_per_class = 100;
  const auto d = gen_synthetic(spec).test;
  const auto path = scratch_dir("random.ckpt");
  save_checkpoint(build_model<float>(desk_student_config(), 3), path);
  const Accuracy a = eval_checkpoint(path, d);
  CHECK(a.top1 >= 7.0);
  CHECK(a.top1 <= 13.0);
  CHECK(a.top5 >= a.top1);

  spec.num_classes = 5;
  spec.samples_per_class = 4;
  const auto five = gen_synthetic(spec).test;
  save_checkpoint(build_model<float>(desk_student_config(32, 3, 5), 3), path);
  CHECK(eval_checkpoint(path, five).top5 == 100.0);

  spec.resolution = 16;
  CHECK_THROWS_AS(eval_checkpoint(path, gen_synthetic(spec).test), UsageError);
  fs::remove(path);
}

TEST_CASE("loss-weight sweep emits one row per lambda plus SSKD") {
  RunConfig base = tiny("sweep");
  base.method = Method::kKdJoint;
  const std::vector<double> lambdas{1, 5, 10, 15, 25};
  Workspace ws;
  const SweepResult r = sweep_loss_weight(base, lambdas, &ws);
  REQUIRE(r.rows.size() == 6);
  CHECK_FALSE(r.rows.back().lambda.has_value());

  const std::string csv = slurp(r.dir / "sweep.csv");
  CHECK(count(csv, "\n") == 7);
  CHECK(csv.find("sskd,lambda-free,") != std::string::npos);
  const std::string svg = slurp(r.dir / "sweep.svg");
  CHECK(count(svg, "class=\"kd-point\"") == 5);
  CHECK(count(svg, "class=\"sskd-ref\"") == 1);

  const auto parsed = parse_sweep_csv(csv);
  REQUIRE(parsed.size() == 6);
  CHECK(*parsed[2].lambda == 10.0);
  const fs::path replot = r.dir / "replot.svg";
  plot_csv(r.dir / "sweep.csv", replot);
  CHECK(slurp(replot) == svg);

  RunConfig again = base;
  again.output_dir = scratch_dir("sweep_empty");
  CHECK_THROWS_AS(sweep_loss_weight(again, {}, &ws), UsageError);
  again.method = Method::kSskd;
  CHECK_THROWS_AS(sweep_loss_weight(again, {1.0}, &ws), UsageError);
  CHECK_THROWS_AS(parse_sweep_csv("lambda,top1\n"), ValidationError);
}

TEST_CASE("recipes produce per-seed rows, means and trend flags") {
  const RunConfig base = tiny("recipes");
  Workspace ws;
  RecipeOptions o;
  o.seeds = {1, 2};
  o.stages = {1, 2};
  const RecipeReport sc = run_recipe("stage-count", base, o, ws);
  CHECK(sc.rows.size() == 6);
  const auto means = sc.summary["mean_top1"].get<std::vector<double>>();
  CHECK(sc.summary["monotone_nondecreasing"].get<bool>() == (means[1] >= means[0]));
  CHECK(sc.flags.empty() == (means[1] >= means[0]));

  const RecipeReport sh = run_recipe("separate-head", base, o, ws);
  CHECK(sh.rows.size() == 3);
  CHECK(sh.summary.contains("mean_difference"));
  const RecipeReport ml = run_recipe("multiloss-vs-sskd", base, o, ws);
  CHECK(ml.rows.size() == 6);
  // K = 1 multi-loss and SSKD are the same procedure.
  CHECK(ml.summary["rows"][0]["improvement"].get<double>() == 0.0);
  o.teachers = {ArchSpec{Family::kResidualCnn, {6, 8}, {1, 1}, 1}, ArchSpec{Family::kPlainCnn, {4, 6}, {1, 1}, 1}};
  const RecipeReport tz = run_recipe("teacher-zoo", base, o, ws);
  CHECK(tz.summary["teachers"].size() == 2);
  CHECK(tz.columns.back() == "improvement");

  const fs::path dir = scratch_dir("recipe_out");
  write_recipe(sc, dir);
  CHECK(fs::exists(dir / "stage-count.md"));
  CHECK(slurp(dir / "stage-count.csv").rfind("stages,seed,sskd_top1\n", 0) == 0);
  CHECK_THROWS_AS(write_recipe(sc, dir), UsageError);
  CHECK_THROWS_AS(run_recipe("no-such-recipe", base, o, ws), UsageError);
}

TEST_CASE("feature export has the documented shape and round-trips") {
  const RunConfig c = tiny("features");
  const RunArtifacts r = run(c);
  const Dataset test = load_data(c.dataset).test;
  const fs::path out = r.dir / "stage2.skfe";
  const FeatureMatrix f = export_features(r.dir / "student.ckpt", test, 2, out);
  CHECK(f.rows == test.size());
  CHECK(f.cols == 5);
  const FeatureMatrix back = decode_features(read_file(out));
  CHECK(back.values == f.values);
  CHECK(back.labels == test.labels);
  CHECK(back.stage == 2);

  const FeatureMatrix flat = export_features(r.dir / "student.ckpt", test, 1, r.dir / "flat.skfe", false);
  CHECK(flat.cols == 3 * 8 * 8);

  const fs::path copy = r.dir / "copy.ckpt";
  save_checkpoint(load_checkpoint(r.dir / "student.ckpt"), copy);
  export_features(copy, test, 2, r.dir / "copy.skfe");
  CHECK(read_file(r.dir / "copy.skfe") == read_file(out));

  CHECK_THROWS_AS(export_features(r.dir / "student.ckpt", test, 3, r.dir / "bad.skfe"), UsageError);
  CHECK_THROWS_AS(export_features(r.dir / "student.ckpt", test, 0, r.dir / "bad.skfe"), UsageError);
  auto bytes = read_file(out);
  bytes[30] ^= 1;
  CHECK_THROWS_AS(decode_features(bytes), ParseError);
}
