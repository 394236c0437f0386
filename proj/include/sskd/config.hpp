#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sskd/data.hpp"
#include "sskd/distill.hpp"
#include "sskd/model.hpp"
#include "sskd/train.hpp"

namespace sskd {

// Architecture without the input/class extents, which come from the dataset.
struct ArchSpec {
  Family family = Family::kResidualCnn;
  std::vector<int> stage_widths;
  std::vector<int> blocks_per_stage;
  int stem_pool = 1;

  ModelConfig resolve(const Dataset& data) const;
  bool operator==(const ArchSpec&) const = default;
};

ArchSpec desk_teacher_arch();
ArchSpec desk_student_arch();

struct DatasetSource {
  // Exactly one of: a synthetic spec, or a pair of SKDS files.
  std::optional<SyntheticSpec> synthetic;
  std::filesystem::path train_path;
  std::filesystem::path test_path;
};

struct TeacherSource {
  std::optional<ArchSpec> arch;
  std::filesystem::path checkpoint;
  int epochs = 30;
  PolicyConfig policy;
  int batch_size = 64;
  std::uint64_t seed = 1;
};

struct RunConfig {
  std::string name = "run";
  Method method = Method::kSskd;
  std::uint64_t seed = 1;
  // The run directory itself; empty = <output root>/<name>.
  std::filesystem::path output_dir;
  DatasetSource dataset;
  std::optional<TeacherSource> teacher;
  ArchSpec student;
  PlanSettings plan;
  // Base lr of the shallowest stage when plan.stage_lrs is not given; deeper
  // stages are scaled by the ratio of feature-map areas.
  double mimic_lr = 1e-5;
  KDSpec kd;

  // Throws ConfigError naming the offending key.
  void validate() const;
  bool distills() const { return method != Method::kScratch; }
};

// Desk-scale defaults: synthetic 10-class task, desk teacher/student pair,
// teacher 30 epochs, 10 epochs per stage and 10 head epochs.
RunConfig default_run_config();
// Shorter budgets (teacher 10, 8 per stage, 8 head) for single-core desks.
void apply_quick_budget(RunConfig& config);

// Nested YAML mapping; every key is optional and falls back to the defaults
// above. Unknown keys and wrong types are ConfigErrors with the key path.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string dump_run_config(const RunConfig& config);

// Default root for run directories: $SSKD_OUTPUT_ROOT, else "runs".
std::filesystem::path default_output_root();
std::filesystem::path resolve_output_dir(const RunConfig& config);

// Per-stage initial lrs for a K-stage view of `config`: base at the first
// native resolution, multiplied by (area of first / area of stage output).
std::vector<double> resolution_scaled_lrs(const ModelConfig& config, int stages, double base);

}  // namespace sskd
