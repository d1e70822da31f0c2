#ifndef MPCMFRL_ENVS_HPP_
#define MPCMFRL_ENVS_HPP_

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mpcmfrl/rng.hpp"
#include "mpcmfrl/types.hpp"

namespace mpcmfrl {

struct EnvSpec {
  std::string name;
  int state_dim = 0;
  int action_dim = 0;
  Vec action_low;
  Vec action_high;
  int horizon = 1;  // episode length T
  double dt = 0.0;
};

struct Transition {
  Vec state;
  Vec action;  // clipped, as executed
  Vec next_state;
  double reward = 0.0;
};

using Trajectory = std::vector<Transition>;

struct StepResult {
  Vec next_state;
  double reward = 0.0;
};

struct EnvOptions {
  // Reset ignores the seed and returns the documented fixed start state.
  bool deterministic_init = false;
};

// Deterministic continuous-control task with known dynamics f and reward R.
// Instances are immutable after construction; all members are const and
// safe to call concurrently.
class Environment {
 public:
  explicit Environment(EnvSpec spec, EnvOptions options = {});
  virtual ~Environment() = default;

  const EnvSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }
  int state_dim() const { return spec_.state_dim; }
  int action_dim() const { return spec_.action_dim; }
  int horizon() const { return spec_.horizon; }

  Vec Reset(std::uint64_t seed) const;

  // next_state = f(s, clip(a)), reward = R(s, clip(a)).
  StepResult Step(const Vec& state, const Vec& action) const;

  // R(s, clip(a)); bit-identical to Step(s, a).reward.
  double Reward(const Vec& state, const Vec& action) const;

  Vec Clip(const Vec& action) const;
  Vec BoxCenter() const { return 0.5 * (spec_.action_low + spec_.action_high); }

 protected:
  virtual Vec Dynamics(const Vec& state, const Vec& action) const = 0;
  virtual double RewardOf(const Vec& state, const Vec& action) const = 0;
  virtual Vec SampleInitial(Rng& rng) const = 0;
  virtual Vec FixedInitial() const = 0;

 private:
  void CheckInputs(const Vec& state, const Vec& action) const;

  EnvSpec spec_;
  EnvOptions options_;
};

using EnvPtr = std::shared_ptr<const Environment>;

// Inverted pendulum, upright at theta = 0. State (cos theta, sin theta,
// theta_dot); torque in [-2, 2].
//   theta_dot' = clip(theta_dot + (3g/(2l) sin theta + 3/(m l^2) u) dt, +-8)
//   theta'     = theta + theta_dot' dt
//   R = -(theta^2 + 0.1 theta_dot^2 + 0.001 u^2), theta wrapped to (-pi, pi]
class Pendulum final : public Environment {
 public:
  static constexpr double kGravity = 10.0;
  static constexpr double kMass = 1.0;
  static constexpr double kLength = 1.0;
  static constexpr double kMaxTorque = 2.0;
  static constexpr double kMaxSpeed = 8.0;
  static constexpr double kDt = 0.05;
  static constexpr int kHorizon = 200;

  explicit Pendulum(EnvOptions options = {});

  static Vec FromAngle(double theta, double theta_dot);
  static double Angle(const Vec& state);  // in (-pi, pi]

 protected:
  Vec Dynamics(const Vec& state, const Vec& action) const override;
  double RewardOf(const Vec& state, const Vec& action) const override;
  Vec SampleInitial(Rng& rng) const override;
  Vec FixedInitial() const override;
};

// Cart-pole (Barto et al. equations), upright at theta = 0.
// State (x, x_dot, theta, theta_dot); action in [-1, 1] scaled by 10 N.
// Semi-implicit Euler with dt = 0.02. Reward 1 - 0.05|x| while
// |wrap(theta)| <= 0.4, otherwise -10 (no termination).
class CartPole final : public Environment {
 public:
  static constexpr double kGravity = 9.8;
  static constexpr double kCartMass = 1.0;
  static constexpr double kPoleMass = 0.1;
  static constexpr double kHalfLength = 0.5;
  static constexpr double kForceMag = 10.0;
  static constexpr double kDt = 0.02;
  static constexpr double kAngleLimit = 0.4;
  static constexpr double kFallenReward = -10.0;
  static constexpr int kHorizon = 200;

  explicit CartPole(EnvOptions options = {});

 protected:
  Vec Dynamics(const Vec& state, const Vec& action) const override;
  double RewardOf(const Vec& state, const Vec& action) const override;
  Vec SampleInitial(Rng& rng) const override;
  Vec FixedInitial() const override;
};

// Planar point mass driven to the origin. State (px, py, vx, vy); force in
// [-1, 1]^2; semi-implicit Euler, dt = 0.05.
// R = -||p|| - 0.01 ||a||^2.
class PointMass final : public Environment {
 public:
  static constexpr double kDt = 0.05;
  static constexpr int kHorizon = 100;

  explicit PointMass(EnvOptions options = {});

 protected:
  Vec Dynamics(const Vec& state, const Vec& action) const override;
  double RewardOf(const Vec& state, const Vec& action) const override;
  Vec SampleInitial(Rng& rng) const override;
  Vec FixedInitial() const override;
};

// Discrete-time double integrator x' = A x + B u with R = -(x'Qx + u'R_c u).
//   A = [[1, 0.1], [0, 1]], B = [0.005, 0.1]', Q = I, R_c = 0.1, u in [-4, 4]
class Lqr final : public Environment {
 public:
  static constexpr int kHorizon = 50;
  static constexpr double kControlCost = 0.1;
  static constexpr double kActionBound = 4.0;
  static constexpr double kDefaultDiscount = 0.99;

  explicit Lqr(EnvOptions options = {});

  static Eigen::Matrix2d A();
  static Eigen::Vector2d B();
  static Eigen::Matrix2d Q();

  // Discounted infinite-horizon gain K (u = -K x), from iterating the
  // Riccati recursion to a fixed point.
  struct Riccati {
    Eigen::Matrix2d value;  // P
    Eigen::RowVector2d gain;  // K
    int iterations = 0;
  };
  static Riccati SolveRiccati(double discount = kDefaultDiscount,
                              double tolerance = 1e-10);
  static double RiccatiResidual(const Riccati& solution,
                                double discount = kDefaultDiscount);

  Vec OptimalAction(const Vec& state) const;

 protected:
  Vec Dynamics(const Vec& state, const Vec& action) const override;
  double RewardOf(const Vec& state, const Vec& action) const override;
  Vec SampleInitial(Rng& rng) const override;
  Vec FixedInitial() const override;

 private:
  Riccati riccati_;
};

EnvPtr MakeEnvironment(std::string_view name, EnvOptions options = {});
std::vector<std::string> EnvironmentNames();

// u = -K x for the lqr environment; UnsupportedError otherwise.
Vec LqrOptimalAction(const Environment& env, const Vec& state);

double WrapAngle(double theta);

// True if consecutive transitions chain (next_state == following state).
bool IsChained(const Trajectory& trajectory);

}  // namespace mpcmfrl

#endif  // MPCMFRL_ENVS_HPP_
