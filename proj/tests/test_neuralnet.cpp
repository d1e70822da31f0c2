#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mpcmfrl/errors.hpp"
#include "mpcmfrl/neuralnet.hpp"
#include "mpcmfrl/rng.hpp"

namespace mpcmfrl {
namespace {

Mat RandomMat(int rows, int cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.Normal();
  return m;
}

Vec CentralDifference(const std::function<double(const Vec&)>& f, const Vec& x,
                      double h = 1e-5) {
  Vec g(x.size());
  Vec y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    y[i] = x[i] + h;
    const double fp = f(y);
    y[i] = x[i] - h;
    const double fm = f(y);
    y[i] = x[i];
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double RelativeError(const Vec& a, const Vec& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

TEST(Mlp, ZeroNetworkOutputsZero) {
  const Mlp net(3, {5, 4}, 2);
  Rng rng(1);
  EXPECT_EQ(net.Forward(RandomMat(7, 3, rng)), Mat::Zero(7, 2));
}

TEST(Mlp, LinearIdentityNetworkIsExact) {
  Mlp net(3, {}, 3);
  net.layers()[0].weight = Mat::Identity(3, 3);
  Rng rng(2);
  const Mat x = RandomMat(5, 3, rng);
  EXPECT_EQ(net.Forward(x), x);
}

TEST(Mlp, TwoByTwoHandComputation) {
  Mlp net(2, {2}, 1);
  net.layers()[0].weight << 0.5, -1.0, 2.0, 0.25;
  net.layers()[0].bias << 0.1, -0.2;
  net.layers()[1].weight << 1.5, -0.5;
  net.layers()[1].bias << 0.3;
  Mat x(1, 2);
  x << 1.0, 2.0;
  const double h1 = std::tanh(0.5 * 1.0 - 1.0 * 2.0 + 0.1);
  const double h2 = std::tanh(2.0 * 1.0 + 0.25 * 2.0 - 0.2);
  EXPECT_NEAR(net.Forward(x)(0, 0), 1.5 * h1 - 0.5 * h2 + 0.3, 1e-15);
}

TEST(Mlp, FlatParameterOrderIsRowMajorWeightsThenBias) {
  Mlp net(2, {}, 2);
  Vec flat(6);
  flat << 1, 2, 3, 4, 5, 6;
  net.SetParameters(flat);
  Mat w(2, 2);
  w << 1, 2, 3, 4;
  EXPECT_EQ(net.layers()[0].weight, w);
  EXPECT_EQ(net.layers()[0].bias, Vec((Vec(2) << 5, 6).finished()));
  EXPECT_EQ(net.Parameters(), flat);
  EXPECT_EQ(net.NumParameters(), 6);
}

TEST(Mlp, WrongInputWidthIsShapeError) {
  const Mlp net(3, {4}, 1);
  EXPECT_THROW(net.Forward(Mat::Zero(2, 4)), ShapeError);
  Mlp n2 = net;
  EXPECT_THROW(n2.SetParameters(Vec::Zero(3)), ShapeError);
}

TEST(Mlp, BackwardMatchesFiniteDifferencesAtHundredPoints) {
  Rng rng(3);
  Mlp net = Mlp::Random(3, {8, 6}, 2, rng);
  for (int point = 0; point < 100; ++point) {
    net.SetParameters(RandomMat(net.NumParameters(), 1, rng, 0.5));
    const Mat x = RandomMat(4, 3, rng);
    const Mat w = RandomMat(4, 2, rng);
    Mlp::Cache cache;
    net.Forward(x, &cache);
    const Vec analytic = net.Backward(cache, w);
    Mlp probe = net;
    const Vec fd = CentralDifference(
        [&](const Vec& p) {
          probe.SetParameters(p);
          return probe.Forward(x).cwiseProduct(w).sum();
        },
        net.Parameters());
    EXPECT_LT(RelativeError(analytic, fd), 1e-4) << "point " << point;
  }
}

TEST(Mlp, MseHeadGradientMatchesFiniteDifferences) {
  Rng rng(4);
  Mlp net = Mlp::Random(3, {8}, 2, rng);
  for (int point = 0; point < 100; ++point) {
    net.SetParameters(RandomMat(net.NumParameters(), 1, rng, 0.5));
    const Mat x = RandomMat(5, 3, rng), y = RandomMat(5, 2, rng);
    Mlp::Cache cache;
    const Mat out = net.Forward(x, &cache);
    const Vec analytic = net.Backward(cache, MeanSquaredError(out, y).output_grad);
    Mlp probe = net;
    const Vec fd = CentralDifference(
        [&](const Vec& p) {
          probe.SetParameters(p);
          return MeanSquaredError(probe.Forward(x), y).loss;
        },
        net.Parameters());
    EXPECT_LT(RelativeError(analytic, fd), 1e-4) << "point " << point;
  }
}

TEST(Mlp, GaussianNllHeadGradientMatchesFiniteDifferences) {
  Rng rng(5);
  Mlp net = Mlp::Random(3, {8}, 2, rng);
  const int np = net.NumParameters();
  for (int point = 0; point < 100; ++point) {
    net.SetParameters(RandomMat(np, 1, rng, 0.5));
    Vec log_std(2);
    log_std << rng.Uniform(-1, 0.5), rng.Uniform(-1, 0.5);
    const Mat x = RandomMat(5, 3, rng), a = RandomMat(5, 2, rng);
    Mlp::Cache cache;
    const Mat mean = net.Forward(x, &cache);
    const GaussianNllResult nll = GaussianNegLogLikelihood(mean, log_std, a);
    Vec analytic(np + 2);
    analytic << net.Backward(cache, nll.mean_grad), nll.log_std_grad;
    Vec theta(np + 2);
    theta << net.Parameters(), log_std;
    Mlp probe = net;
    const Vec fd = CentralDifference(
        [&](const Vec& p) {
          probe.SetParameters(p.head(np));
          return GaussianNegLogLikelihood(probe.Forward(x), p.tail(2), a).loss;
        },
        theta);
    EXPECT_LT(RelativeError(analytic, fd), 1e-4) << "point " << point;
  }
}

TEST(Mlp, JacobianVectorProductMatchesFiniteDifferences) {
  Rng rng(6);
  Mlp net = Mlp::Random(3, {8, 6}, 2, rng);
  for (int point = 0; point < 100; ++point) {
    net.SetParameters(RandomMat(net.NumParameters(), 1, rng, 0.5));
    const Mat x = RandomMat(4, 3, rng);
    const Vec v = RandomMat(net.NumParameters(), 1, rng);
    const Mat jv = net.JacobianVectorProduct(x, v);
    const double h = 1e-5;
    Mlp plus = net, minus = net;
    plus.SetParameters(net.Parameters() + h * v);
    minus.SetParameters(net.Parameters() - h * v);
    const Mat fd = (plus.Forward(x) - minus.Forward(x)) / (2 * h);
    const Vec a = Eigen::Map<const Vec>(jv.data(), jv.size());
    const Vec b = Eigen::Map<const Vec>(fd.data(), fd.size());
    EXPECT_LT(RelativeError(a, b), 1e-4) << "point " << point;
  }
}

TEST(Mlp, DeadParametersHaveZeroGradient) {
  // A zero output layer blocks every path through the hidden weights.
  Rng rng(7);
  Mlp net = Mlp::Random(3, {5}, 1, rng);
  net.layers()[1].weight.setZero();
  Mlp::Cache cache;
  net.Forward(RandomMat(6, 3, rng), &cache);
  const Vec g = net.Backward(cache, RandomMat(6, 1, rng));
  const int hidden_params = 5 * 3 + 5;
  EXPECT_EQ(g.head(hidden_params), Vec::Zero(hidden_params));
  EXPECT_GT(g.tail(6).norm(), 0.0);
}

TEST(Mlp, BackwardIsLinearInOutputGradient) {
  Rng rng(8);
  const Mlp net = Mlp::Random(3, {6}, 2, rng);
  Mlp::Cache cache;
  net.Forward(RandomMat(5, 3, rng), &cache);
  const Mat g1 = RandomMat(5, 2, rng), g2 = RandomMat(5, 2, rng);
  const Vec lhs = net.Backward(cache, 2.0 * g1 - 3.0 * g2);
  const Vec rhs = 2.0 * net.Backward(cache, g1) - 3.0 * net.Backward(cache, g2);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mlp, JsonRoundTripIsExact) {
  Rng rng(9);
  const Mlp net = Mlp::Random(4, {7, 3}, 2, rng);
  const Mlp back = Mlp::FromJson(nlohmann::json::parse(net.ToJson().dump()));
  EXPECT_EQ(back.Parameters(), net.Parameters());
  EXPECT_EQ(back.LayerSizes(), net.LayerSizes());
}

TEST(Heads, MseHandValue) {
  Mat p(2, 2), t(2, 2);
  p << 1, 2, 3, 4;
  t << 0, 2, 3, 6;
  const LossAndGrad r = MeanSquaredError(p, t);
  EXPECT_DOUBLE_EQ(r.loss, (1.0 + 4.0) / 2.0);
  EXPECT_THROW(MeanSquaredError(p, Mat::Zero(3, 2)), ShapeError);
}

TEST(Heads, GaussianNllAtMeanWithUnitStd) {
  const GaussianNllResult r = GaussianNegLogLikelihood(Mat::Zero(3, 2), Vec::Zero(2), Mat::Zero(3, 2));
  EXPECT_NEAR(r.loss, std::log(2 * M_PI), 1e-15);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Adam opt(3, {});
  Vec p = Vec::Constant(3, 1.5);
  opt.Step(p, Vec::Zero(3));
  EXPECT_EQ(p, Vec::Constant(3, 1.5));
}

TEST(Adam, FirstStepMatchesClosedForm) {
  const AdamConfig c{.learning_rate = 0.01};
  Adam opt(2, c);
  Vec p(2), g(2);
  p << 1.0, -2.0;
  g << 0.3, -4.0;
  opt.Step(p, g);
  // Bias correction makes the first step lr * g / (|g| + eps).
  EXPECT_NEAR(p[0], 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p[1], -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(Adam, MinimizesQuadratic) {
  Adam opt(1, {.learning_rate = 0.05});
  Vec w = Vec::Constant(1, 3.0);
  for (int i = 0; i < 2000; ++i) opt.Step(w, 2.0 * w);
  EXPECT_LT(std::abs(w[0]), 1e-2);
}

TEST(Adam, NonFiniteGradientRejectedWithoutSideEffects) {
  Adam opt(2, {});
  Vec p = Vec::Ones(2);
  opt.Step(p, Vec::Ones(2));
  const Vec before = p;
  const Vec m = opt.first_moment();
  Vec bad = Vec::Ones(2);
  bad[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(opt.Step(p, bad), NumericError);
  EXPECT_EQ(p, before);
  EXPECT_EQ(opt.first_moment(), m);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(Adam, JsonRoundTripContinuesIdentically) {
  Adam a(2, {});
  Vec p = Vec::Ones(2);
  a.Step(p, Vec::Constant(2, 0.5));
  Adam b = Adam::FromJson(nlohmann::json::parse(a.ToJson().dump()));
  Vec q = p;
  a.Step(p, Vec::Constant(2, -0.25));
  b.Step(q, Vec::Constant(2, -0.25));
  EXPECT_EQ(p, q);
}

}  // namespace
}  // namespace mpcmfrl
