#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mpcmfrl/dynamics_model.hpp"
#include "mpcmfrl/envs.hpp"
#include "mpcmfrl/errors.hpp"
#include "mpcmfrl/planner.hpp"

namespace mpcmfrl {
namespace {

SimulatedTrajectory MakeTrajectory(int horizon, int sdim, int adim, double score = 0.0) {
  SimulatedTrajectory t;
  t.states = Mat::Zero(horizon + 1, sdim);
  t.actions = Mat::Zero(horizon, adim);
  t.score = score;
  return t;
}

TrajectorySet RandomSet(int n, int horizon, int adim, Rng& rng) {
  TrajectorySet set;
  for (int i = 0; i < n; ++i) {
    SimulatedTrajectory t = MakeTrajectory(horizon, 1, adim, rng.Normal());
    for (int h = 0; h < horizon; ++h)
      for (int d = 0; d < adim; ++d) t.actions(h, d) = rng.Uniform(-1, 1);
    set.push_back(std::move(t));
  }
  return set;
}

std::shared_ptr<const ValueFunction> ConstantValue(double c) {
  Mlp net(1, {}, 1);
  net.layers()[0].bias[0] = c;
  return std::make_shared<const ValueFunction>(std::move(net));
}

TEST(Evaluate, ZeroTerminalSingleStepIsReward) {
  SimulatedTrajectory t = MakeTrajectory(1, 1, 1);
  const RewardFunction r = [](const Vec&, const Vec&) { return 3.25; };
  EXPECT_EQ(EvaluateTrajectory(t, r, ZeroTerminal{}, 0.9, 1), 3.25);
}

TEST(Evaluate, DiscountedSumPlusTerminalValue) {
  SimulatedTrajectory t = MakeTrajectory(2, 1, 1);
  const RewardFunction r = [](const Vec&, const Vec&) { return 1.0; };
  EXPECT_DOUBLE_EQ(EvaluateTrajectory(t, r, ValueTerminal{ConstantValue(4.0)}, 0.5, 2), 2.5);
}

TEST(Evaluate, TerminalUsesStateHUnlessToggled) {
  SimulatedTrajectory t = MakeTrajectory(2, 1, 1);
  t.states << 0.0, 1.0, 2.0;
  Mlp identity(1, {}, 1);
  identity.layers()[0].weight(0, 0) = 1.0;
  const ValueTerminal v{std::make_shared<const ValueFunction>(identity)};
  const RewardFunction zero = [](const Vec&, const Vec&) { return 0.0; };
  EXPECT_DOUBLE_EQ(EvaluateTrajectory(t, zero, v, 0.5, 2, false), 0.25 * 1.0);
  EXPECT_DOUBLE_EQ(EvaluateTrajectory(t, zero, v, 0.5, 2, true), 0.25 * 2.0);
}

TEST(Evaluate, ZeroValueNetworkMatchesZeroTerminalExactly) {
  Rng rng(1);
  const EnvPtr env = MakeEnvironment("pendulum");
  const ValueTerminal v{std::make_shared<const ValueFunction>(Mlp(3, {8}, 1))};
  for (int i = 0; i < 100; ++i) {
    SimulatedTrajectory t = MakeTrajectory(5, 3, 1);
    t.states.setRandom();
    t.actions.setRandom();
    const RewardFunction r = EnvironmentReward(*env);
    EXPECT_EQ(EvaluateTrajectory(t, r, v, 0.97, 5), EvaluateTrajectory(t, r, ZeroTerminal{}, 0.97, 5));
  }
}

TEST(Evaluate, WrongLengthIsShapeError) {
  const SimulatedTrajectory t = MakeTrajectory(3, 1, 1);
  const RewardFunction r = [](const Vec&, const Vec&) { return 0.0; };
  EXPECT_THROW(EvaluateTrajectory(t, r, ZeroTerminal{}, 0.9, 2), ShapeError);
}

TEST(Evaluate, DivergedTrajectoryGetsSentinel) {
  SimulatedTrajectory t = MakeTrajectory(2, 1, 1);
  t.diverged = true;
  const RewardFunction r = [](const Vec&, const Vec&) { return 1.0; };
  EXPECT_EQ(EvaluateTrajectory(t, r, ZeroTerminal{}, 0.9, 2), kDivergedScore);
}

TEST(Selection, GreedyPicksHighestWithLowestIndexTies) {
  TrajectorySet set;
  for (double s : {3.0, 7.0, 5.0, 7.0}) set.push_back(MakeTrajectory(1, 1, 1, s));
  for (int i = 0; i < 4; ++i) set[static_cast<std::size_t>(i)].actions(0, 0) = i;
  EXPECT_EQ(SelectActionGreedy(set)(0, 0), 1.0);
  EXPECT_THROW(SelectActionGreedy(TrajectorySet{}), StateError);
}

TEST(Selection, SoftGreedyAveragesTopE) {
  TrajectorySet set;
  set.push_back(MakeTrajectory(1, 1, 2, 1.0));
  set.push_back(MakeTrajectory(1, 1, 2, 2.0));
  set[0].actions << 1, 1;
  set[1].actions << 3, 3;
  const Mat out = SelectActionSoftGreedy(set, 2);
  EXPECT_EQ(out(0, 0), 2.0);
  EXPECT_EQ(out(0, 1), 2.0);
  EXPECT_THROW(SelectActionSoftGreedy(set, 3), ConfigError);
  EXPECT_THROW(SelectActionSoftGreedy(set, 0), ConfigError);
}

TEST(Selection, SoftGreedyWithOneEqualsGreedyBitExactly) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const TrajectorySet set = RandomSet(1 + static_cast<int>(rng.Index(40)), 4, 2, rng);
    EXPECT_EQ(SelectActionSoftGreedy(set, 1), SelectActionGreedy(set));
  }
}

TEST(Selection, SoftGreedyWithAllIsMeanOfSequences) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng.Index(30));
    const TrajectorySet set = RandomSet(n, 3, 2, rng);
    Mat mean = Mat::Zero(3, 2);
    for (const auto& t : set) mean += t.actions;
    mean /= n;
    EXPECT_LT((SelectActionSoftGreedy(set, n) - mean).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Selection, SoftGreedyIsPermutationInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(rng.Index(20));
    TrajectorySet set = RandomSet(n, 2, 1, rng);
    const int e = 1 + static_cast<int>(rng.Index(static_cast<std::size_t>(n)));
    const Mat before = SelectActionSoftGreedy(set, e);
    std::shuffle(set.begin(), set.end(), rng.engine());
    EXPECT_LT((SelectActionSoftGreedy(set, e) - before).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Selection, RankingIsInvariantToRewardOffset) {
  const EnvPtr env = MakeEnvironment("pendulum");
  const TrueDynamics model(env);
  Rng rng(5);
  PlannerConfig c;
  c.num_trajectories = 50;
  c.horizon = 6;
  const TrajectorySet set = SampleTrajectories(model, *env, env->Reset(1), c, rng);
  const RewardFunction base = EnvironmentReward(*env);
  const RewardFunction shifted = [&](const Vec& s, const Vec& a) { return base(s, a) + 17.0; };
  TrajectorySet moved = set;
  for (auto& t : moved) t.score = EvaluateTrajectory(t, shifted, ZeroTerminal{}, c.discount, c.horizon);
  EXPECT_EQ(RankTrajectories(set), RankTrajectories(moved));
}

TEST(Sampling, OneByOneUniform) {
  const EnvPtr env = MakeEnvironment("pendulum");
  const TrueDynamics model(env);
  PlannerConfig c;
  c.num_trajectories = 1;
  c.horizon = 1;
  c.top_e = 1;
  Rng rng(6);
  const Vec s = env->Reset(3);
  const TrajectorySet set = SampleTrajectories(model, *env, s, c, rng);
  ASSERT_EQ(set.size(), 1u);
  EXPECT_EQ(set[0].states.row(0).transpose(), s);
  EXPECT_EQ(set[0].states.row(1).transpose(), env->Step(s, set[0].actions.row(0).transpose()).next_state);
}

TEST(Sampling, TrajectoriesChainThroughModel) {
  const EnvPtr env = MakeEnvironment("cartpole");
  Rng rng(7);
  const DynamicsModel model(*env, {}, rng);
  PlannerConfig c;
  c.num_trajectories = 20;
  c.horizon = 5;
  const TrajectorySet set = SampleTrajectories(model, *env, env->Reset(0), c, rng);
  for (const auto& t : set) {
    for (int h = 0; h < c.horizon; ++h) {
      const Vec single =
          model.Predict(t.states.row(h).transpose(), t.actions.row(h).transpose());
      EXPECT_LT((t.states.row(h + 1).transpose() - single).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_LE(t.actions.row(h).cwiseAbs().maxCoeff(), 1.0);
    }
  }
}

TEST(Sampling, FixedSeedIsBitIdentical) {
  const EnvPtr env = MakeEnvironment("pendulum");
  Rng init(8);
  const DynamicsModel model(*env, {}, init);
  PlannerConfig c;
  c.strategy = PolicySampling{std::make_shared<const GaussianPolicy>(
      GaussianPolicy::Create(3, 1, {8}, init))};
  Rng a(9), b(9);
  const TrajectorySet x = SampleTrajectories(model, *env, env->Reset(0), c, a);
  const TrajectorySet y = SampleTrajectories(model, *env, env->Reset(0), c, b);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].actions, y[i].actions);
    EXPECT_EQ(x[i].score, y[i].score);
  }
}

TEST(Sampling, VanishingStdPolicyGivesIdenticalTrajectories) {
  const EnvPtr env = MakeEnvironment("pendulum");
  Rng rng(10);
  GaussianPolicy p = GaussianPolicy::Create(3, 1, {8}, rng);
  p.set_log_std(Vec::Constant(1, -1000.0));
  Vec theta = p.Parameters();
  p.SetParameters(theta);
  PlannerConfig c;
  c.num_trajectories = 30;
  c.strategy = PolicySampling{std::make_shared<const GaussianPolicy>(p)};
  const TrueDynamics model(env);
  const TrajectorySet set = SampleTrajectories(model, *env, env->Reset(2), c, rng);
  for (const auto& t : set) {
    EXPECT_LT((t.actions - set[0].actions).cwiseAbs().maxCoeff(), 1e-1);
  }
}

// Model whose prediction blows up for large actions.
class ExplodingModel final : public TransitionModel {
 public:
  int state_dim() const override { return 3; }
  int action_dim() const override { return 1; }
  Mat PredictBatch(const Mat& s, const Mat& a) const override {
    Mat next = s;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      if (a(i, 0) > 1.0) next.row(i).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    return next;
  }
};

TEST(Sampling, DivergedTrajectoriesAreTruncatedAndFloored) {
  const EnvPtr env = MakeEnvironment("pendulum");
  PlannerConfig c;
  c.num_trajectories = 100;
  c.horizon = 3;
  Rng rng(11);
  const TrajectorySet set = SampleTrajectories(ExplodingModel(), *env, env->Reset(0), c, rng);
  int diverged = 0;
  for (const auto& t : set) {
    EXPECT_TRUE(t.states.allFinite());
    if (t.diverged) {
      ++diverged;
      EXPECT_EQ(t.score, kDivergedScore);
    } else {
      EXPECT_GT(t.score, kDivergedScore);
    }
  }
  EXPECT_GT(diverged, 0);
  EXPECT_LT(diverged, 100);
  EXPECT_LE(SelectActionGreedy(set)(0, 0), 1.0);
}

// Random-shooting MPC written directly from its definition.
Vec BaselinePlan(const TransitionModel& model, const Environment& env, const Vec& s0,
                 int n, int horizon, double discount, Rng& rng) {
  const Vec low = env.spec().action_low, high = env.spec().action_high;
  const int ad = env.action_dim();
  std::vector<Mat> seqs(static_cast<std::size_t>(n), Mat(horizon, ad));
  for (auto& seq : seqs)
    for (int h = 0; h < horizon; ++h)
      for (int d = 0; d < ad; ++d) seq(h, d) = rng.Uniform(low[d], high[d]);
  Mat states = s0.transpose().replicate(n, 1);
  std::vector<double> returns(static_cast<std::size_t>(n), 0.0);
  for (int h = 0; h < horizon; ++h) {
    Mat actions(n, ad);
    for (int i = 0; i < n; ++i) actions.row(i) = seqs[static_cast<std::size_t>(i)].row(h);
    for (int i = 0; i < n; ++i) {
      returns[static_cast<std::size_t>(i)] +=
          std::pow(discount, h) * env.Reward(states.row(i).transpose(), actions.row(i).transpose());
    }
    states = model.PredictBatch(states, actions);
  }
  const auto best = std::max_element(returns.begin(), returns.end()) - returns.begin();
  return seqs[static_cast<std::size_t>(best)].row(0).transpose();
}

TEST(Plan, UniformZeroTerminalGreedyReducesToBaseline) {
  const EnvPtr env = MakeEnvironment("pendulum");
  Rng init(12);
  const DynamicsModel model(*env, {}, init);
  PlannerConfig c;
  c.top_e = 1;
  Rng a(13), b(13), states(14);
  for (int call = 0; call < 100; ++call) {
    const Vec s = env->Reset(states.engine()());
    EXPECT_EQ(Plan(model, *env, s, c, a),
              BaselinePlan(model, *env, s, c.num_trajectories, c.horizon, c.discount, b));
  }
}

TEST(Plan, SingleTrajectoryReturnsItsFirstAction) {
  const EnvPtr env = MakeEnvironment("pendulum");
  const TrueDynamics model(env);
  PlannerConfig c;
  c.num_trajectories = 1;
  c.top_e = 1;
  Rng a(15), b(15);
  const Vec s = env->Reset(0);
  const TrajectorySet set = SampleTrajectories(model, *env, s, c, b);
  EXPECT_EQ(Plan(model, *env, s, c, a), Vec(set[0].actions.row(0).transpose()));
}

TEST(Plan, EOutOfRangeIsConfigError) {
  const EnvPtr env = MakeEnvironment("pendulum");
  const TrueDynamics model(env);
  PlannerConfig c;
  c.num_trajectories = 5;
  c.top_e = 6;
  Rng rng(16);
  EXPECT_THROW(Plan(model, *env, env->Reset(0), c, rng), ConfigError);
  c.top_e = 0;
  EXPECT_THROW(Plan(model, *env, env->Reset(0), c, rng), ConfigError);
  c.top_e = 1;
  c.horizon = 0;
  EXPECT_THROW(Plan(model, *env, env->Reset(0), c, rng), ConfigError);
}

double RealizedReturn(const Environment& env, const TransitionModel& model,
                      const PlannerConfig& c, Vec s, int steps, Rng& rng) {
  double total = 0.0;
  for (int t = 0; t < steps; ++t) {
    const StepResult r = env.Step(s, Plan(model, env, s, c, rng));
    total += r.reward;
    s = r.next_state;
  }
  return total;
}

// Median over 20 planning episodes; at most one inversion over 5 seeds.
TEST(Plan, MoreCandidatesNeverHurtInTheMedianOnLqr) {
  const EnvPtr env = MakeEnvironment("lqr");
  const TrueDynamics model(env);
  int inversions = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<double> medians;
    for (int n : {10, 100, 1000}) {
      PlannerConfig c;
      c.num_trajectories = n;
      c.horizon = 5;
      c.top_e = 1;
      Rng rng = Rng::Derive(seed, {static_cast<std::uint64_t>(n)});
      std::vector<double> returns;
      for (int call = 0; call < 20; ++call) {
        returns.push_back(RealizedReturn(*env, model, c, env->Reset(seed * 100 + call), 5, rng));
      }
      std::nth_element(returns.begin(), returns.begin() + 10, returns.end());
      medians.push_back(returns[10]);
    }
    inversions += (medians[1] < medians[0]) + (medians[2] < medians[1]);
  }
  EXPECT_LE(inversions, 1);
}

TEST(Cem, StaticQuadraticConverges) {
  Vec c(3);
  c << 0.3, -0.5, 0.8;
  const auto objective = [&](const Mat& pop) -> Vec {
    return -(pop.rowwise() - c.transpose()).rowwise().squaredNorm();
  };
  CemSampling params;
  params.population = 64;
  params.elite_fraction = 0.1;
  params.iterations = 10;
  params.smoothing = 0.5;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const CemResult r = CemOptimize(objective, Vec::Constant(3, -1), Vec::Constant(3, 1),
                                    Vec::Zero(3), Vec::Ones(3), params, rng);
    EXPECT_LT((r.mean - c).cwiseAbs().maxCoeff(), 0.05) << "seed " << seed;
  }
}

TEST(Cem, FullEliteWithoutSmoothingRefitsToPopulationMean) {
  CemSampling params;
  params.population = 50;
  params.elite_fraction = 1.0;
  params.iterations = 1;
  params.smoothing = 1.0;
  Rng rng(17);
  const CemResult r = CemOptimize([](const Mat& p) -> Vec { return p.col(0); },
                                  Vec::Constant(2, -5), Vec::Constant(2, 5), Vec::Zero(2),
                                  Vec::Ones(2), params, rng);
  EXPECT_LT((r.mean - r.population.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Cem, StdIsFloored) {
  CemSampling params;
  params.population = 10;
  params.elite_fraction = 0.1;
  params.iterations = 5;
  params.smoothing = 1.0;
  Rng rng(18);
  const CemResult r = CemOptimize([](const Mat& p) -> Vec { return p.col(0); },
                                  Vec::Constant(1, -1), Vec::Constant(1, 1), Vec::Zero(1),
                                  Vec::Ones(1), params, rng);
  EXPECT_GE(r.std[0], params.min_std);
}

TEST(Cem, PlannerReturnsScoredFinalPopulation) {
  const EnvPtr env = MakeEnvironment("pendulum");
  const TrueDynamics model(env);
  PlannerConfig c;
  c.horizon = 4;
  c.top_e = 5;
  CemSampling cem;
  cem.population = 40;
  cem.iterations = 3;
  c.strategy = cem;
  Rng a(19), b(19);
  const TrajectorySet x = SampleTrajectories(model, *env, env->Reset(1), c, a);
  const TrajectorySet y = SampleTrajectories(model, *env, env->Reset(1), c, b);
  ASSERT_EQ(x.size(), 40u);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].score, y[i].score);
    EXPECT_EQ(x[i].score, EvaluateTrajectory(x[i], EnvironmentReward(*env), ZeroTerminal{},
                                             c.discount, c.horizon));
  }
}

TEST(Config, ValidationRejectsMissingSnapshots) {
  PlannerConfig c;
  c.strategy = PolicySampling{};
  EXPECT_THROW(c.Validate(), ConfigError);
  c.strategy = UniformSampling{};
  c.terminal = ValueTerminal{};
  EXPECT_THROW(c.Validate(), ConfigError);
}

}  // namespace
}  // namespace mpcmfrl
