#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sskd/checkpoint.hpp"
#include "sskd/config.hpp"
#include "sskd/errors.hpp"
#include "sskd/harness.hpp"

using namespace sskd;

namespace {

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw UsageError(std::string("bad ") + what + " entry '" + item + "'");
    out.push_back(v);
  }
  return out;
}

void print_progress(const MetricsRecord& r) {
  std::fprintf(stderr, "[%s] epoch %d", r.phase.c_str(), r.epoch);
  for (const auto& [k, v] : r.scalars) std::fprintf(stderr, " %s=%.5g", k.c_str(), v);
  std::fprintf(stderr, "\n");
}

RunConfig base_config(const std::string& path, bool quick) {
  RunConfig c = path.empty() ? default_run_config() : load_run_config(path);
  if (quick) apply_quick_budget(c);
  c.validate();
  return c;
}

Dataset dataset_from(const std::string& data_path, const std::string& config_path, const std::string& split) {
  if (!data_path.empty()) return load_binary(data_path, split == "train" ? Split::kTrain : Split::kTest);
  const RunConfig c = base_config(config_path, false);
  PreparedData d = load_data(c.dataset);
  return split == "train" ? d.train : d.test;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stage-by-stage knowledge distillation: training, evaluation and experiment recipes"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Do not print per-epoch progress");

  std::string config_path, name, output, data_path, split = "test", checkpoint, out_path, csv_path, svg_path;
  std::string lambdas = "1,5,10,15,25", seeds = "1,2,3,4,5", stages = "1,2,3,4", recipe;
  std::string train_out, test_out;
  std::uint64_t seed = 0;
  int stage = 0;
  bool flat = false, quick = false;

  auto* train = app.add_subcommand("train", "Run one configuration and write its artifacts");
  train->add_option("config", config_path, "YAML run configuration")->required()->check(CLI::ExistingFile);
  train->add_option("--name", name, "Override the run name");
  train->add_option("-o,--output", output, "Override the output directory");
  train->add_option("--seed", seed, "Override the run seed");
  train->add_flag("--quick", quick, "Use the shortened desk budgets");

  auto* eval = app.add_subcommand("eval", "Top-1/top-5 accuracy of a checkpoint");
  eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  auto* eval_data = eval->add_option("--data", data_path, "SKDS dataset file");
  auto* eval_cfg = eval->add_option("--config", config_path, "Take the dataset from a run configuration");
  eval_data->excludes(eval_cfg);
  eval->add_option("--split", split, "Split when using --config")->check(CLI::IsMember({"train", "test"}));

  auto* sweep = app.add_subcommand("sweep", "Loss-weight sweep of joint KD against SSKD");
  sweep->add_option("config", config_path, "kd_joint run configuration")->required()->check(CLI::ExistingFile);
  sweep->add_option("--lambdas", lambdas, "Comma-separated loss weights")->capture_default_str();
  sweep->add_option("-o,--output", output, "Override the output directory");
  sweep->add_flag("--quick", quick, "Use the shortened desk budgets");

  auto* rec = app.add_subcommand("recipe", "Run a paired multi-seed experiment");
  rec->add_option("name", recipe, "separate-head | multiloss-vs-sskd | stage-count | teacher-zoo")->required();
  rec->add_option("--config", config_path, "Base configuration (desk defaults when omitted)");
  rec->add_option("--seeds", seeds, "Comma-separated seeds")->capture_default_str();
  rec->add_option("--stages", stages, "Comma-separated stage counts")->capture_default_str();
  rec->add_option("-o,--output", output, "Directory for the report (default: <output root>/recipes)");
  rec->add_flag("--quick", quick, "Use the shortened desk budgets");

  auto* exp = app.add_subcommand("export-features", "Write stage features of a checkpoint to an SKFE file");
  exp->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  exp->add_option("--stage", stage, "Stage index (1-based)")->required();
  exp->add_option("--out", out_path, "Output file")->required();
  auto* exp_data = exp->add_option("--data", data_path, "SKDS dataset file");
  auto* exp_cfg = exp->add_option("--config", config_path, "Take the dataset from a run configuration");
  exp_data->excludes(exp_cfg);
  exp->add_option("--split", split, "Split when using --config")->check(CLI::IsMember({"train", "test"}));
  exp->add_flag("--flat", flat, "Flatten C*H*W instead of global average pooling");

  auto* plot = app.add_subcommand("plot", "Render a sweep CSV as SVG");
  plot->add_option("csv", csv_path, "Sweep CSV")->required()->check(CLI::ExistingFile);
  plot->add_option("svg", svg_path, "Output SVG")->required();

  auto* make = app.add_subcommand("make-dataset", "Write the synthetic dataset of a configuration as SKDS files");
  make->add_option("--config", config_path, "Run configuration (desk defaults when omitted)");
  make->add_option("--train", train_out, "Train split output")->required();
  make->add_option("--test", test_out, "Test split output")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    Workspace ws;
    if (!quiet) ws.progress = print_progress;

    if (*train) {
      RunConfig c = base_config(config_path, quick);
      if (!name.empty()) c.name = name;
      if (!output.empty()) c.output_dir = output;
      if (seed) c.seed = seed;
      const RunArtifacts a = run(c, &ws);
      std::printf("run %s: %s test top1 %.2f top5 %.2f, %lld steps, artifacts in %s\n", c.name.c_str(),
                  to_string(a.report.method).c_str(), a.report.test->top1, a.report.test->top5, a.report.total_steps,
                  a.dir.string().c_str());
    } else if (*eval) {
      if (data_path.empty() && config_path.empty()) throw UsageError("eval needs --data or --config");
      const Accuracy acc = eval_checkpoint(checkpoint, dataset_from(data_path, config_path, split));
      std::printf("top1 %.2f top5 %.2f\n", acc.top1, acc.top5);
    } else if (*sweep) {
      RunConfig c = base_config(config_path, quick);
      if (!output.empty()) c.output_dir = output;
      const SweepResult r = sweep_loss_weight(c, parse_list<double>(lambdas, "lambda"), &ws);
      std::fputs(sweep_csv(r.rows).c_str(), stdout);
      std::printf("kd top1 spread %.2f points; sweep written to %s\n", r.kd_top1_spread, r.dir.string().c_str());
    } else if (*rec) {
      RecipeOptions o;
      o.seeds = parse_list<std::uint64_t>(seeds, "seed");
      o.stages = parse_list<int>(stages, "stage count");
      const RunConfig c = base_config(config_path, quick);
      const RecipeReport r = run_recipe(recipe, c, o, ws);
      write_recipe(r, output.empty() ? default_output_root() / "recipes" : std::filesystem::path(output));
      std::fputs(r.markdown().c_str(), stdout);
    } else if (*exp) {
      if (data_path.empty() && config_path.empty()) throw UsageError("export-features needs --data or --config");
      const FeatureMatrix f =
          export_features(checkpoint, dataset_from(data_path, config_path, split), stage, out_path, !flat);
      std::printf("wrote %d x %d features of stage %d to %s\n", f.rows, f.cols, f.stage, out_path.c_str());
    } else if (*plot) {
      plot_csv(csv_path, svg_path);
    } else if (*make) {
      const RunConfig c = base_config(config_path, false);
      if (!c.dataset.synthetic) throw UsageError("configuration does not describe a synthetic dataset");
      const auto d = gen_synthetic(*c.dataset.synthetic);
      save_binary(d.train, train_out);
      save_binary(d.test, test_out);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
