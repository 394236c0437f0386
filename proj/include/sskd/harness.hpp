#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sskd/config.hpp"
#include "sskd/train.hpp"

namespace sskd {

struct PreparedData {
  Dataset train;
  Dataset test;
  ChannelStats stats;
};

PreparedData load_data(const DatasetSource& source);

struct TeacherEntry {
  ModelF model;
  std::vector<MetricsRecord> records;  // empty when loaded from a checkpoint
  Accuracy test;
  bool trained_here = false;
};

struct RunOutcome {
  TrainResult result;
  Accuracy train;
  std::optional<Accuracy> teacher_test;
};

// Memo of datasets, teachers and finished runs keyed by their canonical
// config text. Lets sweeps and recipes share a teacher and reuse identical
// runs; results are the same as with a fresh workspace.
class Workspace {
 public:
  const PreparedData& data(const DatasetSource& source);
  const TeacherEntry& teacher(const RunConfig& config);
  // Trains (or returns the memoized) student for `config`, in memory.
  const RunOutcome& outcome(const RunConfig& config);

  // Optional progress sink for every record produced by fresh training.
  MetricsSink progress;

 private:
  std::map<std::string, std::unique_ptr<PreparedData>> data_;
  std::map<std::string, std::unique_ptr<TeacherEntry>> teachers_;
  std::map<std::string, std::unique_ptr<RunOutcome>> runs_;
};

// Executes the method without touching the filesystem.
RunOutcome execute(const RunConfig& config, Workspace& ws, const TrainHooks& hooks = {});

struct RunArtifacts {
  std::filesystem::path dir;
  RunReport report;
  Accuracy train;
  std::optional<Accuracy> teacher_test;
};

// Validates, creates the (new) output directory and writes config.yaml,
// metrics.jsonl, timing.jsonl, student.ckpt, report.json and, for
// distillation runs with a trained teacher, teacher/{metrics.jsonl,
// teacher.ckpt}. Throws UsageError when the directory already exists and
// NumericError (with phase and epoch) when training diverges.
RunArtifacts run(const RunConfig& config, Workspace* ws = nullptr);

Accuracy eval_checkpoint(const std::filesystem::path& checkpoint, const Dataset& dataset);

struct SweepRow {
  std::string method;
  std::optional<double> lambda;  // absent for the lambda-free SSKD row
  Accuracy acc;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double kd_top1_spread = 0.0;  // max - min over the KD rows
  std::filesystem::path dir;
};

// One kd_joint run per lambda plus one SSKD run, shared teacher and seed.
// Writes sweep.csv, sweep.svg and sweep.json under the base output dir.
SweepResult sweep_loss_weight(const RunConfig& base, const std::vector<double>& lambdas, Workspace* ws = nullptr);

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::vector<SweepRow> parse_sweep_csv(const std::string& text);
// Line chart of KD top-1 against lambda; each KD point is a circle with class
// "kd-point" and SSKD is one horizontal line with class "sskd-ref".
std::string sweep_svg(const std::vector<SweepRow>& rows);
void plot_csv(const std::filesystem::path& csv, const std::filesystem::path& svg);

struct RecipeOptions {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<int> stages = {1, 2, 3, 4};
  // Teacher architectures for teacher-zoo (base teacher plus a smaller one
  // when empty).
  std::vector<ArchSpec> teachers;
};

struct RecipeReport {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  nlohmann::json summary;
  std::vector<std::string> flags;

  std::string markdown() const;
  std::string csv() const;
};

// The config a recipe runs for one method, seed and stage count. Scratch
// drops the teacher and gets the step budget of the native-stage SSKD run.
RunConfig variant(const RunConfig& base, Method method, std::uint64_t seed, std::optional<int> stages = {});

const std::vector<std::string>& recipe_names();
RecipeReport run_recipe(const std::string& name, const RunConfig& base, const RecipeOptions& options,
                        Workspace& ws);
// Writes <name>.md, <name>.csv and <name>.json into `dir` (created; must not
// already contain them).
void write_recipe(const RecipeReport& report, const std::filesystem::path& dir);

// "SKFE" feature file: magic, u16 version, u32 N, u32 D, u8 stage, u8 pooled,
// N*D float32 row-major, N u16 labels, CRC-32 trailer.
struct FeatureMatrix {
  int stage = 0;
  bool pooled = true;
  int rows = 0;
  int cols = 0;
  std::vector<float> values;
  std::vector<int> labels;
};

FeatureMatrix extract_features(ModelF& model, const Dataset& dataset, int stage, bool pooled);
std::vector<std::uint8_t> encode_features(const FeatureMatrix& features);
FeatureMatrix decode_features(std::span<const std::uint8_t> bytes);
// Stage index refers to the checkpoint's native partition; out of range is a
// UsageError.
FeatureMatrix export_features(const std::filesystem::path& checkpoint, const Dataset& dataset, int stage,
                              const std::filesystem::path& out, bool pooled = true);

}  // namespace sskd
