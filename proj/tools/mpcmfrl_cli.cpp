#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "mpcmfrl/config.hpp"
#include "mpcmfrl/errors.hpp"
#include "mpcmfrl/harness.hpp"

namespace {

using namespace mpcmfrl;

void PrintSummary(const RunSummary& summary) {
  for (const auto& r : summary.results) {
    std::printf("%s/%s:", r.config.env.c_str(), r.config.Label().c_str());
    if (!r.curve.empty()) {
      const CurvePoint& last = r.curve.back();
      std::printf(" steps %ld best-so-far mean %.2f [%.2f, %.2f]", last.steps, last.mean,
                  last.ci_low, last.ci_high);
    }
    std::printf("\n");
  }
  std::printf("outputs under %s\n", summary.output_root.c_str());
  if (!summary.completed) std::printf("stopped early; rerun with --resume to continue\n");
}

int Train(const std::string& config_path, long seed, bool resume, int stop_after) {
  const ExperimentConfig config = LoadExperimentConfig(config_path);
  RunOptions options;
  options.resume = resume;
  options.stop_after_checkpoints = stop_after;
  options.log = &std::cerr;
  if (seed >= 0) options.only_seed = static_cast<std::uint64_t>(seed);
  PrintSummary(RunExperiments({config}, options));
  return 0;
}

int Evaluate(const std::string& dir, const std::string& config_override) {
  LoadedCheckpoint ckpt = LoadCheckpoint(dir);
  if (!config_override.empty()) ckpt.config = LoadExperimentConfig(config_override);
  const EnvPtr env = MakeEnvironment(ckpt.config.env);
  const EvalRecord rec =
      EvaluateOffline(*env, ckpt.config, ckpt.snapshots, ckpt.seed, ckpt.steps);
  std::printf("%s %s seed %llu steps %ld\n", ckpt.config.env.c_str(),
              ckpt.config.Label().c_str(), static_cast<unsigned long long>(rec.seed),
              rec.steps);
  for (std::size_t i = 0; i < rec.returns.size(); ++i) {
    std::printf("episode %zu return %.6f\n", i, rec.returns[i]);
  }
  std::printf("mean %.6f\n", rec.mean);
  return 0;
}

int Ablate(const std::string& axis, const std::string& config_path, bool resume,
           bool dry_run) {
  const ExperimentConfig base = LoadExperimentConfig(config_path);
  const auto variants = AblationMatrix(base, axis);
  if (dry_run) {
    for (const auto& v : variants) std::printf("%s\n", v.Label().c_str());
    return 0;
  }
  RunOptions options;
  options.resume = resume;
  options.log = &std::cerr;
  PrintSummary(RunExperiments(variants, options));
  return 0;
}

int PlotData(const std::string& runs, const std::string& out) {
  const std::size_t rows = WritePlotData(runs, out);
  std::printf("wrote %zu rows to %s\n", rows, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model predictive control with model-free policy and value priors"};
  app.require_subcommand(1);

  std::string config_path;
  long seed = -1;
  bool resume = false;
  int stop_after = -1;
  auto* train = app.add_subcommand("train", "train and evaluate one configuration");
  train->add_option("--config", config_path, "experiment config file")->required();
  train->add_option("--seed", seed, "run only this seed");
  train->add_flag("--resume", resume, "continue from the last saved checkpoint");
  train->add_option("--stop-after", stop_after, "stop after this many checkpoints");

  std::string checkpoint_dir, eval_config;
  auto* evaluate = app.add_subcommand("evaluate", "offline evaluation of a checkpoint");
  evaluate->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
  evaluate->add_option("--config", eval_config, "evaluate with this config instead");

  std::string axis;
  bool dry_run = false;
  auto* ablate = app.add_subcommand("ablate", "run one ablation axis");
  ablate->add_option("--axis", axis, "collector | sampling | terminal-horizon | "
                                     "soft-greedy | model-width | methods")
      ->required();
  ablate->add_option("--config", config_path, "base config file")->required();
  ablate->add_flag("--resume", resume, "continue from saved checkpoints");
  ablate->add_flag("--dry-run", dry_run, "list the variants and exit");

  std::string runs_dir, out_csv;
  auto* plot = app.add_subcommand("plot-data", "long-format CSV of all runs");
  plot->add_option("--runs", runs_dir, "output root of earlier runs")->required();
  plot->add_option("--out", out_csv, "CSV to write")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return Train(config_path, seed, resume, stop_after);
    if (evaluate->parsed()) return Evaluate(checkpoint_dir, eval_config);
    if (ablate->parsed()) return Ablate(axis, config_path, resume, dry_run);
    if (plot->parsed()) return PlotData(runs_dir, out_csv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
