#ifndef MPCMFRL_HARNESS_HPP_
#define MPCMFRL_HARNESS_HPP_

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mpcmfrl/agent.hpp"
#include "mpcmfrl/config.hpp"
#include "mpcmfrl/dynamics_model.hpp"
#include "mpcmfrl/envs.hpp"
#include "mpcmfrl/planner.hpp"

namespace mpcmfrl {

struct EvalRecord {
  std::uint64_t seed = 0;
  long steps = 0;
  std::vector<double> returns;  // undiscounted, one per episode
  double mean = 0.0;
};

struct CurvePoint {
  long steps = 0;
  std::vector<double> best_so_far;  // per seed, in seed order
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct ModelErrorRecord {
  std::uint64_t seed = 0;
  long steps = 0;
  double error = 0.0;
};

struct TrpoLogEntry {
  long iteration = 0;
  long steps = 0;  // budget steps after the iteration
  TrpoDiagnostics diagnostics;
  double value_loss = 0.0;
  double mean_episode_return = 0.0;  // of the batch used for the update
};

// Frozen networks used by one offline evaluation.
struct Snapshots {
  std::shared_ptr<const GaussianPolicy> policy;
  std::shared_ptr<const ValueFunction> value;
  std::shared_ptr<const TransitionModel> model;
};

// Percentile bootstrap of the mean; resamples values with replacement.
struct Interval {
  double low = 0.0;
  double high = 0.0;
};
Interval BootstrapMeanCi(std::span<const double> values, int resamples, Rng& rng,
                         double confidence = 0.95);

// Linear-interpolated empirical quantile, q in [0, 1].
double Quantile(std::vector<double> values, double q);

// Running maximum of checkpoint means per seed, then across-seed mean and
// bootstrap interval at each step count. All seeds must share step counts.
std::vector<CurvePoint> BestSoFarCurve(
    const std::vector<std::vector<EvalRecord>>& records_per_seed, int resamples,
    std::uint64_t bootstrap_seed);

// Runs `episodes` full episodes acting per the config's method. Start states
// and action noise come from streams derived from (seed, steps, episode), so
// every method evaluated at the same checkpoint sees the same start states.
EvalRecord EvaluateOffline(const Environment& env, const ExperimentConfig& config,
                           const Snapshots& snapshots, std::uint64_t seed,
                           long steps);

// -- training -- //

// Everything one seed's training run owns. Random streams are derived from
// (seed, iteration), so the state below is all that a resume needs.
struct ExperimentState {
  ExperimentConfig config;  // training fields only are meaningful
  Collector scheme = Collector::kPolicy;
  bool train_policy = true;
  bool train_model = true;
  std::uint64_t seed = 0;
  EnvPtr env;

  GaussianPolicy policy;
  ValueFunction value;
  DynamicsModel model;
  TransitionDataset dataset;

  long steps = 0;      // real environment steps counted against the budget
  long aux_steps = 0;  // policy-only rollouts of the Random+MPC scheme
  long iteration = 0;
  int checkpoint_index = 0;  // checkpoints completed
  long initial_random_steps = 0;

  std::vector<TrpoLogEntry> trpo_log;
  TrainingReport last_model_report;

  Snapshots Freeze() const;
};

ExperimentState InitializeExperiment(const ExperimentConfig& config,
                                     std::uint64_t seed, bool train_policy,
                                     bool train_model);

// One outer iteration: collect whole episodes (at most `step_cap` budget
// steps), update policy and value on the fresh rollouts, then append to the
// dataset and train the model. Throws StateError if no episode fits.
void TrainIteration(ExperimentState& state, long step_cap);

// Step counts at which evaluations happen: multiples of eval_period, plus
// the budget itself.
std::vector<long> CheckpointSteps(const ExperimentConfig& config);

// -- orchestration -- //

struct RunOptions {
  std::string output_root;  // empty: resolve from the config / environment
  bool resume = false;
  // Stop (with state saved) after this many checkpoints in this invocation.
  int stop_after_checkpoints = -1;
  // Train each seed only up to the last checkpoint at or below this count.
  long stop_at_steps = -1;
  std::optional<std::uint64_t> only_seed;
  std::ostream* log = nullptr;
};

struct LabelResult {
  ExperimentConfig config;
  std::map<std::uint64_t, std::vector<EvalRecord>> evals;
  std::map<std::uint64_t, std::vector<ModelErrorRecord>> model_errors;
  std::vector<CurvePoint> curve;
};

struct RunSummary {
  bool completed = true;
  std::string output_root;
  std::vector<LabelResult> results;  // in input order
  // Per training group and seed; keyed by "<group dir>/seed-<k>".
  std::map<std::string, std::vector<TrpoLogEntry>> trpo_logs;
  std::map<std::string, long> steps_consumed;

  const LabelResult& Find(const std::string& label) const;
};

// Trains every config for every seed, sharing training between configs whose
// TrainingKey matches, evaluates each config at every checkpoint and writes
//   <root>/<env>/<label dir>/{evals.csv, curve.csv, model_error.csv}
//   <root>/<env>/train-<hash>/seed-<k>/{state.json, dataset.csv, trpo.csv, ...}
RunSummary RunExperiments(const std::vector<ExperimentConfig>& configs,
                          const RunOptions& options);

// Held-out test set for model-error curves: half from a Policy-collected and
// half from a Random+MPC-collected reference run with `test_seed`. Cached
// under the output root.
std::vector<Transition> BuildTestSet(const ExperimentConfig& config,
                                     const std::string& output_root,
                                     std::ostream* log = nullptr);

// Variant configs for one ablation axis: collector, sampling,
// terminal-horizon, soft-greedy, model-width, or methods.
std::vector<ExperimentConfig> AblationMatrix(const ExperimentConfig& base,
                                             const std::string& axis);
std::vector<std::string> AblationAxes();

// Directory name for a label: lowercase alphanumerics, others become '-'.
std::string LabelDirName(const std::string& label);

// -- CSV I/O -- //

void WriteEvalsCsv(const std::string& path, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> ReadEvalsCsv(const std::string& path);
void WriteCurveCsv(const std::string& path, const std::vector<CurvePoint>& curve);
void WriteModelErrorCsv(const std::string& path,
                        const std::vector<ModelErrorRecord>& records);
std::vector<ModelErrorRecord> ReadModelErrorCsv(const std::string& path);

// Long-format table (env, method, seed, steps, metric, value) over every
// label directory under `runs_dir`. Returns the number of rows written.
std::size_t WritePlotData(const std::string& runs_dir, const std::string& out_csv);

// -- checkpoints -- //

// Snapshot directory written at each checkpoint: config.txt, policy.json,
// value.json, model.json, meta.json.
void SaveCheckpoint(const std::string& dir, const ExperimentState& state);

struct LoadedCheckpoint {
  ExperimentConfig config;
  Snapshots snapshots;
  std::uint64_t seed = 0;
  long steps = 0;
};
LoadedCheckpoint LoadCheckpoint(const std::string& dir);

}  // namespace mpcmfrl

#endif  // MPCMFRL_HARNESS_HPP_
