#ifndef MPCMFRL_PLANNER_HPP_
#define MPCMFRL_PLANNER_HPP_

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mpcmfrl/agent.hpp"
#include "mpcmfrl/dynamics_model.hpp"
#include "mpcmfrl/envs.hpp"

namespace mpcmfrl {

// Proposal distribution Z for simulated actions.
struct UniformSampling {};

struct PolicySampling {
  std::shared_ptr<const GaussianPolicy> policy;
};

struct CemSampling {
  int population = 200;
  double elite_fraction = 0.1;
  int iterations = 5;
  double init_std = 1.0;   // in units of the action half-range
  double smoothing = 0.25;  // alpha: new = alpha * fit + (1 - alpha) * old
  double min_std = 1e-3;

  int EliteCount() const;
};

using SamplingStrategy = std::variant<UniformSampling, PolicySampling, CemSampling>;

// Terminal reward R_phi.
struct ZeroTerminal {};

struct ValueTerminal {
  std::shared_ptr<const ValueFunction> value;
};

using TerminalRewardMode = std::variant<ZeroTerminal, ValueTerminal>;

struct PlannerConfig {
  int num_trajectories = 200;  // N
  int horizon = 10;            // H
  int top_e = 10;              // E
  double discount = 0.99;
  SamplingStrategy strategy = UniformSampling{};
  TerminalRewardMode terminal = ZeroTerminal{};
  // false: terminal reward at s_H as printed; true: at s_{H+1}.
  bool terminal_at_last_state = false;

  // Trajectory count actually simulated (CEM uses its population).
  int EffectiveTrajectories() const;
  void Validate() const;
};

struct SimulatedTrajectory {
  Mat states;   // (H+1) x state_dim, row 0 is the real start state
  Mat actions;  // H x action_dim, clipped to the box
  double score = 0.0;
  // Model produced a non-finite state at step `diverged_at`; the remaining
  // rows repeat the last finite state and the score is kDivergedScore.
  bool diverged = false;
  int diverged_at = -1;
};

using TrajectorySet = std::vector<SimulatedTrajectory>;

inline constexpr double kDivergedScore = -1e9;

using RewardFunction = std::function<double(const Vec& state, const Vec& action)>;

RewardFunction EnvironmentReward(const Environment& env);

double TerminalReward(const TerminalRewardMode& terminal, const Vec& state);

// G = sum_{h=1..H} gamma^{h-1} R(s_h, a_h) + gamma^H R_phi(s_H).
double EvaluateTrajectory(const SimulatedTrajectory& trajectory,
                          const RewardFunction& reward_fn,
                          const TerminalRewardMode& terminal, double discount,
                          int horizon, bool terminal_at_last_state = false);

// Rolls N trajectories from `state` through the model under the configured
// Uniform or Policy strategy and scores them. CEM strategies are routed to
// CemRefine. Noise is drawn trajectory-major (n outer, h, action dim inner).
TrajectorySet SampleTrajectories(const TransitionModel& model,
                                 const Environment& task, const Vec& state,
                                 const PlannerConfig& config, Rng& rng);

// Rolls out fixed action sequences (one per entry) and scores them.
TrajectorySet RolloutSequences(const TransitionModel& model,
                               const Environment& task, const Vec& state,
                               const std::vector<Mat>& action_sequences,
                               const PlannerConfig& config);

// Highest score; ties go to the lowest index.
Mat SelectActionGreedy(std::span<const SimulatedTrajectory> trajectories);

// Elementwise mean of the E best action sequences (stable sort, descending).
Mat SelectActionSoftGreedy(std::span<const SimulatedTrajectory> trajectories,
                           int top_e);

// Indices sorted by score descending, ties by index.
std::vector<std::size_t> RankTrajectories(
    std::span<const SimulatedTrajectory> trajectories);

// -- cross-entropy method -- //

struct CemResult {
  Mat population;  // population x dim, final iteration samples
  Vec scores;      // population
  Vec mean;        // refit distribution after the final iteration
  Vec std;
};

// Maximizes `objective` (population x dim -> scores) over the box
// [lower, upper] with a diagonal Gaussian refit to elites each iteration.
CemResult CemOptimize(const std::function<Vec(const Mat&)>& objective,
                      const Vec& lower, const Vec& upper, const Vec& init_mean,
                      const Vec& init_std, const CemSampling& params, Rng& rng);

// CEM over flat action sequences of length H * action_dim, scored by
// model rollouts; returns the final scored population.
TrajectorySet CemRefine(const TransitionModel& model, const Environment& task,
                        const Vec& state, const PlannerConfig& config, Rng& rng);

// Full planning step: sample, evaluate, soft-greedy select; returns the
// first action of the selected sequence, clipped to the box.
Vec Plan(const TransitionModel& model, const Environment& task, const Vec& state,
         const PlannerConfig& config, Rng& rng);

// Planner as an action source for data collection and evaluation. The model
// and config must outlive the returned function.
ActionSource PlannerActionSource(const TransitionModel& model,
                                 const Environment& task,
                                 const PlannerConfig& config);

std::string StrategyName(const SamplingStrategy& strategy);

}  // namespace mpcmfrl

#endif  // MPCMFRL_PLANNER_HPP_
