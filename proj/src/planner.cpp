#include "mpcmfrl/planner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mpcmfrl/errors.hpp"

namespace mpcmfrl {

int CemSampling::EliteCount() const {
  const int count = static_cast<int>(std::lround(elite_fraction * population));
  return std::clamp(count, 1, population);
}

int PlannerConfig::EffectiveTrajectories() const {
  if (const auto* cem = std::get_if<CemSampling>(&strategy)) return cem->population;
  return num_trajectories;
}

void PlannerConfig::Validate() const {
  if (horizon < 1) throw ConfigError("planner: horizon H must be >= 1");
  if (num_trajectories < 1) throw ConfigError("planner: N must be >= 1");
  if (!(discount > 0.0 && discount <= 1.0)) {
    throw ConfigError("planner: discount must be in (0, 1]");
  }
  if (const auto* cem = std::get_if<CemSampling>(&strategy)) {
    if (cem->population < 1) throw ConfigError("cem: population must be >= 1");
    if (cem->iterations < 1) throw ConfigError("cem: iterations must be >= 1");
    if (!(cem->elite_fraction > 0.0 && cem->elite_fraction <= 1.0)) {
      throw ConfigError("cem: elite_fraction must be in (0, 1]");
    }
    if (!(cem->smoothing > 0.0 && cem->smoothing <= 1.0)) {
      throw ConfigError("cem: smoothing must be in (0, 1]");
    }
  }
  if (const auto* p = std::get_if<PolicySampling>(&strategy); p && !p->policy) {
    throw ConfigError("planner: policy sampling without a policy");
  }
  if (const auto* v = std::get_if<ValueTerminal>(&terminal); v && !v->value) {
    throw ConfigError("planner: value terminal without a value function");
  }
  if (top_e < 1 || top_e > EffectiveTrajectories()) {
    throw ConfigError("planner: E must satisfy 1 <= E <= N");
  }
}

RewardFunction EnvironmentReward(const Environment& env) {
  return [&env](const Vec& s, const Vec& a) { return env.Reward(s, a); };
}

double TerminalReward(const TerminalRewardMode& terminal, const Vec& state) {
  if (const auto* v = std::get_if<ValueTerminal>(&terminal)) {
    return v->value->Value(state);
  }
  return 0.0;
}

double EvaluateTrajectory(const SimulatedTrajectory& trajectory,
                          const RewardFunction& reward_fn,
                          const TerminalRewardMode& terminal, double discount,
                          int horizon, bool terminal_at_last_state) {
  if (trajectory.actions.rows() != horizon ||
      trajectory.states.rows() != horizon + 1) {
    throw ShapeError("evaluate_trajectory: trajectory does not have H actions");
  }
  if (trajectory.diverged) return kDivergedScore;
  double score = 0.0;
  for (int h = 0; h < horizon; ++h) {
    score += std::pow(discount, h) *
             reward_fn(trajectory.states.row(h).transpose(),
                       trajectory.actions.row(h).transpose());
  }
  const int terminal_row = terminal_at_last_state ? horizon : horizon - 1;
  score += std::pow(discount, horizon) *
           TerminalReward(terminal, trajectory.states.row(terminal_row).transpose());
  return std::isfinite(score) ? score : kDivergedScore;
}

namespace {

Mat ClipRows(const Mat& actions, const Environment& task) {
  Mat out = actions;
  const Vec& low = task.spec().action_low;
  const Vec& high = task.spec().action_high;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    out.col(j) = out.col(j).cwiseMax(low[j]).cwiseMin(high[j]);
  }
  return out;
}

// Simulates N trajectories; `propose(h, states)` returns raw N x action_dim
// actions for planning step h.
TrajectorySet Simulate(const TransitionModel& model, const Environment& task,
                       const Vec& state, int n, const PlannerConfig& config,
                       const std::function<Mat(int, const Mat&)>& propose) {
  const int horizon = config.horizon;
  const int sd = task.state_dim();
  const int ad = task.action_dim();
  if (state.size() != sd) throw ShapeError("planner: state dimension mismatch");
  if (!state.allFinite()) throw NumericError("planner: non-finite state");

  TrajectorySet set(static_cast<std::size_t>(n));
  for (auto& tr : set) {
    tr.states.resize(horizon + 1, sd);
    tr.actions.resize(horizon, ad);
    tr.states.row(0) = state.transpose();
  }
  Mat current = state.transpose().replicate(n, 1);
  for (int h = 0; h < horizon; ++h) {
    const Mat actions = ClipRows(propose(h, current), task);
    Mat next = model.PredictBatch(current, actions);
    for (int i = 0; i < n; ++i) {
      SimulatedTrajectory& tr = set[static_cast<std::size_t>(i)];
      tr.actions.row(h) = actions.row(i);
      if (!tr.diverged && !next.row(i).allFinite()) {
        tr.diverged = true;
        tr.diverged_at = h;
      }
      if (tr.diverged) next.row(i) = current.row(i);
      tr.states.row(h + 1) = next.row(i);
    }
    current = std::move(next);
  }
  const RewardFunction reward = EnvironmentReward(task);
  for (auto& tr : set) {
    tr.score = tr.diverged ? kDivergedScore
                           : EvaluateTrajectory(tr, reward, config.terminal,
                                                config.discount, horizon,
                                                config.terminal_at_last_state);
  }
  return set;
}

// Draws n sequences of H x ad noise values, trajectory-major.
std::vector<Mat> DrawSequences(int n, int horizon, int ad, Rng& rng,
                               const std::function<double(int, Rng&)>& draw) {
  std::vector<Mat> seqs(static_cast<std::size_t>(n), Mat(horizon, ad));
  for (auto& seq : seqs) {
    for (int h = 0; h < horizon; ++h) {
      for (int d = 0; d < ad; ++d) seq(h, d) = draw(d, rng);
    }
  }
  return seqs;
}

Mat StepRows(const std::vector<Mat>& seqs, int h) {
  Mat out(static_cast<Eigen::Index>(seqs.size()), seqs.front().cols());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = seqs[i].row(h);
  }
  return out;
}

}  // namespace

TrajectorySet RolloutSequences(const TransitionModel& model,
                               const Environment& task, const Vec& state,
                               const std::vector<Mat>& action_sequences,
                               const PlannerConfig& config) {
  if (action_sequences.empty()) throw StateError("rollout: no sequences");
  return Simulate(model, task, state, static_cast<int>(action_sequences.size()),
                  config, [&](int h, const Mat&) { return StepRows(action_sequences, h); });
}

TrajectorySet SampleTrajectories(const TransitionModel& model,
                                 const Environment& task, const Vec& state,
                                 const PlannerConfig& config, Rng& rng) {
  config.Validate();
  if (std::holds_alternative<CemSampling>(config.strategy)) {
    return CemRefine(model, task, state, config, rng);
  }
  const int n = config.num_trajectories;
  const int ad = task.action_dim();
  if (std::holds_alternative<UniformSampling>(config.strategy)) {
    const Vec low = task.spec().action_low, high = task.spec().action_high;
    const auto seqs = DrawSequences(n, config.horizon, ad, rng,
                                    [&](int d, Rng& r) { return r.Uniform(low[d], high[d]); });
    return RolloutSequences(model, task, state, seqs, config);
  }
  const GaussianPolicy& policy = *std::get<PolicySampling>(config.strategy).policy;
  if (policy.action_dim() != ad || policy.state_dim() != task.state_dim()) {
    throw ShapeError("planner: policy does not match the task");
  }
  const auto noise = DrawSequences(n, config.horizon, ad, rng,
                                   [](int, Rng& r) { return r.Normal(); });
  const Eigen::RowVectorXd std = policy.log_std().array().exp().transpose();
  return Simulate(model, task, state, n, config, [&](int h, const Mat& states) {
    Mat actions = policy.MeanActions(states);
    actions += (StepRows(noise, h).array().rowwise() * std.array()).matrix();
    return actions;
  });
}

std::vector<std::size_t> RankTrajectories(
    std::span<const SimulatedTrajectory> trajectories) {
  std::vector<std::size_t> order(trajectories.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return trajectories[a].score > trajectories[b].score;
  });
  return order;
}

Mat SelectActionGreedy(std::span<const SimulatedTrajectory> trajectories) {
  if (trajectories.empty()) throw StateError("select_action: no trajectories");
  std::size_t best = 0;
  for (std::size_t i = 1; i < trajectories.size(); ++i) {
    if (trajectories[i].score > trajectories[best].score) best = i;
  }
  return trajectories[best].actions;
}

Mat SelectActionSoftGreedy(std::span<const SimulatedTrajectory> trajectories,
                           int top_e) {
  if (trajectories.empty()) throw StateError("select_action: no trajectories");
  if (top_e < 1 || static_cast<std::size_t>(top_e) > trajectories.size()) {
    throw ConfigError("soft-greedy: E must satisfy 1 <= E <= N");
  }
  const auto order = RankTrajectories(trajectories);
  Mat sum = trajectories[order[0]].actions;
  for (int e = 1; e < top_e; ++e) sum += trajectories[order[static_cast<std::size_t>(e)]].actions;
  return sum / static_cast<double>(top_e);
}

// -- CEM -- //

CemResult CemOptimize(const std::function<Vec(const Mat&)>& objective,
                      const Vec& lower, const Vec& upper, const Vec& init_mean,
                      const Vec& init_std, const CemSampling& params, Rng& rng) {
  if (params.population < 1 || params.iterations < 1) {
    throw ConfigError("cem: population and iterations must be >= 1");
  }
  const Eigen::Index dim = init_mean.size();
  if (lower.size() != dim || upper.size() != dim || init_std.size() != dim) {
    throw ShapeError("cem: dimension mismatch");
  }
  const int elites = params.EliteCount();
  CemResult result;
  result.mean = init_mean;
  result.std = init_std.cwiseMax(params.min_std);
  for (int it = 0; it < params.iterations; ++it) {
    Mat population(params.population, dim);
    for (int p = 0; p < params.population; ++p) {
      for (Eigen::Index k = 0; k < dim; ++k) {
        const double x = result.mean[k] + result.std[k] * rng.Normal();
        population(p, k) = std::clamp(x, lower[k], upper[k]);
      }
    }
    Vec scores = objective(population);
    if (scores.size() != params.population) {
      throw ShapeError("cem: objective returned wrong number of scores");
    }
    std::vector<int> order(static_cast<std::size_t>(params.population));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    Vec elite_mean = Vec::Zero(dim);
    for (int e = 0; e < elites; ++e) elite_mean += population.row(order[e]).transpose();
    elite_mean /= static_cast<double>(elites);
    Vec elite_var = Vec::Zero(dim);
    for (int e = 0; e < elites; ++e) {
      elite_var += (population.row(order[e]).transpose() - elite_mean).array().square().matrix();
    }
    elite_var /= static_cast<double>(elites);
    const double a = params.smoothing;
    result.mean = a * elite_mean + (1.0 - a) * result.mean;
    result.std = (a * elite_var.array().sqrt() + (1.0 - a) * result.std.array())
                     .max(params.min_std);
    result.population = std::move(population);
    result.scores = std::move(scores);
  }
  return result;
}

TrajectorySet CemRefine(const TransitionModel& model, const Environment& task,
                        const Vec& state, const PlannerConfig& config, Rng& rng) {
  const auto* cem = std::get_if<CemSampling>(&config.strategy);
  if (cem == nullptr) throw ConfigError("cem_refine: strategy is not CEM");
  const int horizon = config.horizon;
  const int ad = task.action_dim();
  const Vec low = task.spec().action_low, high = task.spec().action_high;
  const Vec center = 0.5 * (low + high), half = 0.5 * (high - low);

  const Vec lower = low.replicate(horizon, 1);
  const Vec upper = high.replicate(horizon, 1);
  const Vec mean0 = center.replicate(horizon, 1);
  const Vec std0 = (cem->init_std * half).replicate(horizon, 1);

  TrajectorySet last;
  const auto objective = [&](const Mat& population) {
    std::vector<Mat> seqs;
    seqs.reserve(static_cast<std::size_t>(population.rows()));
    for (Eigen::Index p = 0; p < population.rows(); ++p) {
      Mat seq(horizon, ad);
      for (int h = 0; h < horizon; ++h) {
        seq.row(h) = population.row(p).segment(h * ad, ad);
      }
      seqs.push_back(std::move(seq));
    }
    last = RolloutSequences(model, task, state, seqs, config);
    Vec scores(population.rows());
    for (std::size_t i = 0; i < last.size(); ++i) {
      scores[static_cast<Eigen::Index>(i)] = last[i].score;
    }
    return scores;
  };
  CemOptimize(objective, lower, upper, mean0, std0, *cem, rng);
  return last;
}

Vec Plan(const TransitionModel& model, const Environment& task, const Vec& state,
         const PlannerConfig& config, Rng& rng) {
  const TrajectorySet set = SampleTrajectories(model, task, state, config, rng);
  const Mat sequence = SelectActionSoftGreedy(set, config.top_e);
  return task.Clip(sequence.row(0).transpose());
}

ActionSource PlannerActionSource(const TransitionModel& model,
                                 const Environment& task,
                                 const PlannerConfig& config) {
  return [&model, &task, &config](const Vec& s, Rng& rng) {
    return Plan(model, task, s, config, rng);
  };
}

std::string StrategyName(const SamplingStrategy& strategy) {
  if (std::holds_alternative<UniformSampling>(strategy)) return "uniform";
  if (std::holds_alternative<PolicySampling>(strategy)) return "policy";
  return "cem";
}

}  // namespace mpcmfrl
