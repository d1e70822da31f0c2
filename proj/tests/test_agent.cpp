#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mpcmfrl/agent.hpp"
#include "mpcmfrl/envs.hpp"
#include "mpcmfrl/errors.hpp"

namespace mpcmfrl {
namespace {

Mat RandomMat(int rows, int cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.Normal();
  return m;
}

GaussianPolicy RandomPolicy(int sdim, int adim, Rng& rng) {
  GaussianPolicy p(Mlp::Random(sdim, {6, 5}, adim, rng), Vec::Zero(adim));
  Vec log_std(adim);
  for (int d = 0; d < adim; ++d) log_std[d] = rng.Uniform(-0.8, 0.5);
  p.set_log_std(log_std);
  return p;
}

// Trajectory with the given rewards over a 1-d chained state sequence.
Trajectory MakeTrajectory(const std::vector<double>& rewards, Rng& rng) {
  Trajectory t;
  Vec s = Vec::Constant(1, rng.Normal());
  for (double r : rewards) {
    Vec next = Vec::Constant(1, rng.Normal());
    t.push_back({s, Vec::Zero(1), next, r});
    s = next;
  }
  return t;
}

ValueFunction RandomValue(int sdim, Rng& rng) {
  return ValueFunction(Mlp::Random(sdim, {4}, 1, rng));
}

TEST(Returns, SingleTerminalStep) {
  Rng rng(1);
  const auto est = ComputeReturnsAndAdvantages({MakeTrajectory({1.0}, rng)},
                                               ValueFunction(Mlp(1, {}, 1)), 0.9, 0.95);
  EXPECT_DOUBLE_EQ(est.returns[0], 1.0);
}

TEST(Returns, ConstantRewardGeometricSum) {
  Rng rng(1);
  const auto est = ComputeReturnsAndAdvantages({MakeTrajectory({1, 1, 1}, rng)},
                                               ValueFunction(Mlp(1, {}, 1)), 0.5, 0.95);
  EXPECT_DOUBLE_EQ(est.returns[0], 1.75);
  EXPECT_DOUBLE_EQ(est.returns[1], 1.5);
  EXPECT_DOUBLE_EQ(est.returns[2], 1.0);
}

TEST(Returns, RecursionMatchesDirectSum) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const int len = 1 + static_cast<int>(rng.Index(60));
    std::vector<double> rewards(static_cast<std::size_t>(len));
    for (double& r : rewards) r = rng.Uniform(-3, 3);
    const double gamma = rng.Uniform(0.1, 0.999);
    const auto est = ComputeReturnsAndAdvantages({MakeTrajectory(rewards, rng)},
                                                 RandomValue(1, rng), gamma, 0.9);
    for (int t = 0; t < len; ++t) {
      double direct = 0.0;
      for (int i = t; i < len; ++i) direct += std::pow(gamma, i - t) * rewards[i];
      EXPECT_NEAR(est.returns[t], direct, 1e-12);
    }
  }
}

TEST(Advantages, LambdaOneEqualsReturnMinusValue) {
  Rng rng(3);
  const ValueFunction v = RandomValue(1, rng);
  std::vector<Trajectory> trajs;
  for (int k = 0; k < 5; ++k) {
    std::vector<double> rewards(20);
    for (double& r : rewards) r = rng.Uniform(-1, 1);
    trajs.push_back(MakeTrajectory(rewards, rng));
  }
  const auto est = ComputeReturnsAndAdvantages(trajs, v, 0.97, 1.0);
  Eigen::Index i = 0;
  for (const auto& tr : trajs) {
    for (const auto& t : tr) {
      EXPECT_NEAR(est.raw_advantages[i], est.returns[i] - v.Value(t.state), 1e-10);
      ++i;
    }
  }
}

TEST(Advantages, LambdaZeroIsOneStepTdError) {
  Rng rng(4);
  const ValueFunction v = RandomValue(1, rng);
  const Trajectory tr = MakeTrajectory({0.5, -1.0, 2.0, 0.25}, rng);
  const auto est = ComputeReturnsAndAdvantages({tr}, v, 0.9, 0.0);
  for (std::size_t t = 0; t < tr.size(); ++t) {
    const double next = t + 1 < tr.size() ? v.Value(tr[t].next_state) : 0.0;
    EXPECT_NEAR(est.raw_advantages[static_cast<Eigen::Index>(t)],
                tr[t].reward + 0.9 * next - v.Value(tr[t].state), 1e-12);
  }
}

TEST(Advantages, NormalizedToZeroMeanUnitStd) {
  Rng rng(5);
  std::vector<double> rewards(40);
  for (double& r : rewards) r = rng.Uniform(-5, 5);
  const auto est = ComputeReturnsAndAdvantages({MakeTrajectory(rewards, rng)},
                                               RandomValue(1, rng), 0.99, 0.95);
  EXPECT_NEAR(est.advantages.mean(), 0.0, 1e-12);
  const double var = (est.advantages.array() - est.advantages.mean()).square().mean();
  EXPECT_NEAR(var, 1.0, 1e-12);
}

TEST(Advantages, PositiveScalingLeavesNormalizedAdvantagesUnchanged) {
  Rng rng(6);
  std::vector<double> rewards(30);
  for (double& r : rewards) r = rng.Uniform(-5, 5);
  const Trajectory tr = MakeTrajectory(rewards, rng);
  Trajectory scaled = tr;
  for (auto& t : scaled) t.reward *= 7.5;
  // Zero value function so scaling rewards scales the raw advantages.
  const ValueFunction zero(Mlp(1, {}, 1));
  const auto a = ComputeReturnsAndAdvantages({tr}, zero, 0.95, 0.9);
  const auto b = ComputeReturnsAndAdvantages({scaled}, zero, 0.95, 0.9);
  EXPECT_LT((a.advantages - b.advantages).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Advantages, RejectsUnchainedAndEmpty) {
  Rng rng(7);
  Trajectory tr = MakeTrajectory({1, 2, 3}, rng);
  tr[1].state[0] += 1.0;
  const ValueFunction zero(Mlp(1, {}, 1));
  EXPECT_THROW(ComputeReturnsAndAdvantages({tr}, zero, 0.9, 0.9), StateError);
  EXPECT_THROW(ComputeReturnsAndAdvantages({}, zero, 0.9, 0.9), StateError);
}

TEST(Policy, LogProbAtMeanWithUnitStd) {
  GaussianPolicy p(Mlp(3, {4}, 2), Vec::Zero(2));
  EXPECT_NEAR(p.LogProb(Vec::Ones(3), Vec::Zero(2)), -std::log(2 * std::numbers::pi), 1e-15);
}

TEST(Policy, LogProbMatchesClosedFormDensity) {
  Rng rng(8);
  const GaussianPolicy p = RandomPolicy(3, 2, rng);
  for (int i = 0; i < 200; ++i) {
    const Vec s = RandomMat(3, 1, rng);
    const Vec a = RandomMat(2, 1, rng, 2.0);
    const Vec mu = p.MeanAction(s);
    double density = 1.0;
    for (int d = 0; d < 2; ++d) {
      const double sd = std::exp(p.log_std()[d]);
      density *= std::exp(-0.5 * std::pow((a[d] - mu[d]) / sd, 2)) /
                 (sd * std::sqrt(2 * std::numbers::pi));
    }
    EXPECT_NEAR(p.LogProb(s, a), std::log(density), 1e-12);
  }
}

TEST(Policy, LogProbGradientMatchesFiniteDifferences) {
  Rng rng(9);
  GaussianPolicy p = RandomPolicy(3, 2, rng);
  const Vec theta = p.Parameters();
  for (int point = 0; point < 100; ++point) {
    const Mat s = RandomMat(1, 3, rng);
    const Mat a = RandomMat(1, 2, rng);
    p.SetParameters(theta);
    const Vec grad = p.WeightedLogProbGradient(s, a, Vec::Ones(1));
    const auto j = static_cast<Eigen::Index>(rng.Index(static_cast<std::size_t>(theta.size())));
    const double h = 1e-5;
    Vec tp = theta, tm = theta;
    tp[j] += h;
    tm[j] -= h;
    p.SetParameters(tp);
    const double fp = p.LogProbs(s, a)[0];
    p.SetParameters(tm);
    const double fm = p.LogProbs(s, a)[0];
    const double fd = (fp - fm) / (2 * h);
    EXPECT_LE(std::abs(fd - grad[j]), 1e-4 * std::max(1.0, std::abs(fd))) << "param " << j;
  }
}

TEST(Policy, SamplesAreConsistentAndUnclipped) {
  Rng rng(10);
  GaussianPolicy p = RandomPolicy(2, 1, rng);
  p.set_log_std(Vec::Constant(1, 1.5));
  const Vec s = Vec::Constant(2, 0.3);
  bool outside = false;
  for (int i = 0; i < 1000; ++i) {
    const Vec a = p.SampleAction(s, rng);
    EXPECT_TRUE(std::isfinite(p.LogProb(s, a)));
    outside = outside || std::abs(a[0]) > 2.0;
  }
  EXPECT_TRUE(outside);
}

TEST(Policy, SameSeedSameAction) {
  Rng rng(11);
  const GaussianPolicy p = RandomPolicy(2, 2, rng);
  Rng a(5), b(5);
  EXPECT_EQ(p.SampleAction(Vec::Ones(2), a), p.SampleAction(Vec::Ones(2), b));
}

TEST(Policy, MonteCarloMeanMatchesMeanAction) {
  Rng rng(12);
  const GaussianPolicy p = RandomPolicy(3, 2, rng);
  const Vec s = RandomMat(3, 1, rng);
  const int n = 100000;
  const Mat actions = p.SampleActions(s.transpose().replicate(n, 1), rng);
  const Vec empirical = actions.colwise().mean().transpose();
  const Vec mu = p.MeanAction(s);
  for (int d = 0; d < 2; ++d) {
    EXPECT_LT(std::abs(empirical[d] - mu[d]), 4.0 * std::exp(p.log_std()[d]) / std::sqrt(n));
  }
}

TEST(Policy, VanishingStdIsEffectivelyDeterministic) {
  Rng rng(13);
  GaussianPolicy p = RandomPolicy(2, 1, rng);
  p.set_log_std(Vec::Constant(1, -100.0));
  EXPECT_EQ(p.log_std()[0], GaussianPolicy::kMinLogStd);
  const Vec s = Vec::Constant(2, 0.1);
  for (int i = 0; i < 100; ++i) {
    EXPECT_LT(std::abs(p.SampleAction(s, rng)[0] - p.MeanAction(s)[0]), 6.0 * std::exp(-5.0));
  }
}

TEST(Policy, ZeroMeanNetGivesZeroAndIgnoresStd) {
  GaussianPolicy p(Mlp(2, {3}, 2), Vec::Constant(2, 1.0));
  EXPECT_EQ(p.MeanAction(Vec::Ones(2)), Vec::Zero(2));
  p.set_log_std(Vec::Constant(2, -2.0));
  EXPECT_EQ(p.MeanAction(Vec::Ones(2)), Vec::Zero(2));
}

TEST(Policy, FisherQuadraticFormMatchesKlCurvature) {
  Rng rng(14);
  const GaussianPolicy p = RandomPolicy(3, 2, rng);
  const Mat states = RandomMat(50, 3, rng);
  const Vec theta = p.Parameters();
  for (int trial = 0; trial < 10; ++trial) {
    const Vec v = RandomMat(static_cast<int>(theta.size()), 1, rng);
    const double h = 1e-4;
    GaussianPolicy q = p;
    q.SetParameters(theta + h * v);
    const double kp = p.MeanKl(q, states);
    q.SetParameters(theta - h * v);
    const double km = p.MeanKl(q, states);
    // KL(theta || theta) = 0 and its gradient vanishes, so the second
    // difference is v'Fv.
    const double fd = (kp + km) / (h * h);
    const double exact = v.dot(p.FisherVectorProduct(states, v));
    EXPECT_NEAR(fd, exact, 1e-4 * std::max(1.0, std::abs(exact)));
  }
}

TEST(Policy, FisherIsSymmetric) {
  Rng rng(15);
  const GaussianPolicy p = RandomPolicy(3, 2, rng);
  const Mat states = RandomMat(20, 3, rng);
  const int n = p.NumParameters();
  for (int trial = 0; trial < 20; ++trial) {
    const Vec u = RandomMat(n, 1, rng), w = RandomMat(n, 1, rng);
    EXPECT_NEAR(u.dot(p.FisherVectorProduct(states, w)),
                w.dot(p.FisherVectorProduct(states, u)), 1e-10);
  }
}

TEST(Policy, KlIsZeroForIdenticalPolicies) {
  Rng rng(16);
  const GaussianPolicy p = RandomPolicy(3, 2, rng);
  EXPECT_NEAR(p.MeanKl(p, RandomMat(10, 3, rng)), 0.0, 1e-15);
}

TEST(Policy, JsonRoundTripIsExact) {
  Rng rng(17);
  const GaussianPolicy p = RandomPolicy(3, 2, rng);
  const GaussianPolicy q = GaussianPolicy::FromJson(nlohmann::json::parse(p.ToJson().dump()));
  EXPECT_EQ(p.Parameters(), q.Parameters());
}

TEST(Trpo, SurrogateGradientEqualsVanillaPolicyGradient) {
  Rng rng(18);
  const GaussianPolicy p = RandomPolicy(3, 2, rng);
  const int n = 64;
  const Mat s = RandomMat(n, 3, rng), a = RandomMat(n, 2, rng);
  const Vec adv = RandomMat(n, 1, rng);
  Vec vanilla = Vec::Zero(p.NumParameters());
  for (int i = 0; i < n; ++i) {
    vanilla += p.WeightedLogProbGradient(s.row(i), a.row(i), Vec::Constant(1, adv[i]));
  }
  vanilla /= n;
  EXPECT_LT((SurrogateGradient(p, s, a, adv) - vanilla).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Trpo, ZeroAdvantagesLeavePolicyUnchanged) {
  Rng rng(19);
  GaussianPolicy p = RandomPolicy(3, 1, rng);
  const Vec before = p.Parameters();
  const TrpoDiagnostics d =
      TrpoUpdate(p, RandomMat(30, 3, rng), RandomMat(30, 1, rng), Vec::Zero(30), {});
  EXPECT_FALSE(d.accepted);
  EXPECT_EQ(p.Parameters(), before);
}

TEST(Trpo, NonFiniteAdvantagesRejected) {
  Rng rng(20);
  GaussianPolicy p = RandomPolicy(3, 1, rng);
  const Vec before = p.Parameters();
  Vec adv = RandomMat(30, 1, rng);
  adv[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(TrpoUpdate(p, RandomMat(30, 3, rng), RandomMat(30, 1, rng), adv, {}).accepted);
  EXPECT_EQ(p.Parameters(), before);
}

TEST(Trpo, AcceptedStepsRespectTrustRegion) {
  Rng rng(21);
  GaussianPolicy p = RandomPolicy(3, 2, rng);
  AgentConfig config;
  for (int it = 0; it < 30; ++it) {
    const GaussianPolicy old = p;
    const Mat s = RandomMat(100, 3, rng);
    const Mat a = p.SampleActions(s, rng);
    const Vec adv = -(a.rowwise().squaredNorm());
    const TrpoDiagnostics d = TrpoUpdate(p, s, a, adv, config);
    if (!d.accepted) continue;
    EXPECT_LE(old.MeanKl(p, s), 1.5 * config.max_kl);
    EXPECT_NEAR(d.kl, old.MeanKl(p, s), 1e-12);
    EXPECT_GE(d.surrogate_improvement, 0.0);
  }
}

// Single state, reward -(a - 2)^2; advantages are rewards minus their mean.
TEST(Trpo, GaussianBanditConvergesToOptimum) {
  Rng rng(22);
  GaussianPolicy p = GaussianPolicy::Create(1, 1, {8}, rng);
  const Mat s = Mat::Ones(200, 1);
  for (int it = 0; it < 100; ++it) {
    const Mat a = p.SampleActions(s, rng);
    Vec r = -(a.array() - 2.0).square().matrix().col(0);
    r.array() -= r.mean();
    TrpoUpdate(p, s, a, r, {});
  }
  EXPECT_NEAR(p.MeanAction(Vec::Ones(1))[0], 2.0, 0.2);
}

TEST(Value, FitsZeroTargets) {
  Rng rng(23);
  ValueFunction v = ValueFunction::Create(2, {16}, rng);
  const Mat s = RandomMat(100, 2, rng);
  v.Fit(s, Vec::Zero(100), 1000, 32, rng);
  EXPECT_LT(v.Values(s).cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Value, ZeroEpochsLeavesFunctionUnchanged) {
  Rng rng(24);
  ValueFunction v = ValueFunction::Create(2, {16}, rng);
  const Mat s = RandomMat(20, 2, rng);
  const Vec before = v.Values(s);
  v.Fit(s, RandomMat(20, 1, rng), 0, 8, rng);
  EXPECT_EQ(v.Values(s), before);
  EXPECT_FALSE(v.target_stats_frozen());
}

TEST(Value, FitsLinearTargetOverLqrStates) {
  Rng rng(25);
  const EnvPtr env = MakeEnvironment("lqr");
  Mat s(500, 2);
  for (int i = 0; i < 500; ++i) s.row(i) = env->Reset(rng.engine()()).transpose();
  const Vec target = 3.0 * s.col(0) - 2.0 * s.col(1) + Vec::Constant(500, 0.5);
  ValueFunction v = ValueFunction::Create(2, {32, 32}, rng);
  const double mse = v.Fit(s, target, 1500, 64, rng);
  EXPECT_LT(mse, 1e-3);
  EXPECT_NEAR(mse, (v.Values(s) - target).squaredNorm() / 500, 1e-12);
}

TEST(Value, LengthMismatchIsShapeError) {
  Rng rng(26);
  ValueFunction v = ValueFunction::Create(2, {4}, rng);
  EXPECT_THROW(v.Fit(Mat::Zero(5, 2), Vec::Zero(4), 1, 2, rng), ShapeError);
}

TEST(Value, JsonRoundTripKeepsOutputs) {
  Rng rng(27);
  ValueFunction v = ValueFunction::Create(2, {8}, rng);
  const Mat s = RandomMat(30, 2, rng);
  v.Fit(s, RandomMat(30, 1, rng, 10.0), 5, 8, rng);
  const ValueFunction w = ValueFunction::FromJson(nlohmann::json::parse(v.ToJson().dump()));
  EXPECT_EQ(v.Values(s), w.Values(s));
  EXPECT_TRUE(w.target_stats_frozen());
}

TEST(Rollouts, TStepsGiveExactlyOneEpisode) {
  const EnvPtr env = MakeEnvironment("pendulum");
  Rng rng(28);
  const RolloutBatch b = CollectRollouts(*env, UniformActionSource(*env),
                                         static_cast<std::size_t>(env->horizon()), rng);
  ASSERT_EQ(b.trajectories.size(), 1u);
  EXPECT_EQ(b.trajectories[0].size(), static_cast<std::size_t>(env->horizon()));
  EXPECT_TRUE(IsChained(b.trajectories[0]));
  EXPECT_EQ(b.proposed_actions[0].size(), b.trajectories[0].size());
}

TEST(Rollouts, RoundsUpToWholeEpisodes) {
  const EnvPtr env = MakeEnvironment("lqr");
  Rng rng(29);
  const RolloutBatch b = CollectRollouts(*env, UniformActionSource(*env),
                                         static_cast<std::size_t>(env->horizon() + 1), rng);
  EXPECT_EQ(b.trajectories.size(), 2u);
  EXPECT_EQ(b.num_steps(), static_cast<std::size_t>(2 * env->horizon()));
}

TEST(Rollouts, UniformActionMeanIsBoxCenter) {
  const EnvPtr env = MakeEnvironment("pendulum");
  Rng rng(30);
  const RolloutBatch b = CollectRollouts(*env, UniformActionSource(*env), 50000, rng);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& tr : b.trajectories) {
    for (const auto& t : tr) {
      sum += t.action[0];
      ++n;
    }
  }
  const double sigma = 4.0 / std::sqrt(12.0);
  EXPECT_LT(std::abs(sum / static_cast<double>(n)), 3.0 * sigma / std::sqrt(static_cast<double>(n)));
}

TEST(Rollouts, FixedSeedIsBitIdentical) {
  const EnvPtr env = MakeEnvironment("cartpole");
  Rng prng(31);
  const GaussianPolicy p = RandomPolicy(4, 1, prng);
  Rng a(7), b(7);
  const RolloutBatch x = CollectRollouts(*env, PolicyActionSource(p), 300, a);
  const RolloutBatch y = CollectRollouts(*env, PolicyActionSource(p), 300, b);
  ASSERT_EQ(x.trajectories.size(), y.trajectories.size());
  for (std::size_t k = 0; k < x.trajectories.size(); ++k) {
    for (std::size_t t = 0; t < x.trajectories[k].size(); ++t) {
      EXPECT_EQ(x.trajectories[k][t].action, y.trajectories[k][t].action);
      EXPECT_EQ(x.trajectories[k][t].next_state, y.trajectories[k][t].next_state);
    }
  }
}

TEST(Config, RejectsOutOfRangeValues) {
  AgentConfig c;
  c.discount = 1.0;
  EXPECT_THROW(c.Validate(), ConfigError);
  c = {};
  c.max_kl = 0.0;
  EXPECT_THROW(c.Validate(), ConfigError);
  c = {};
  c.gae_lambda = 1.5;
  EXPECT_THROW(c.Validate(), ConfigError);
  EXPECT_NO_THROW(AgentConfig{}.Validate());
}

}  // namespace
}  // namespace mpcmfrl
