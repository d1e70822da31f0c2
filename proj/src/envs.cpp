#include "mpcmfrl/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mpcmfrl/errors.hpp"

namespace mpcmfrl {

namespace {

EnvSpec MakeSpec(std::string name, int state_dim, int action_dim, double low,
                 double high, int horizon, double dt) {
  EnvSpec spec;
  spec.name = std::move(name);
  spec.state_dim = state_dim;
  spec.action_dim = action_dim;
  spec.action_low = Vec::Constant(action_dim, low);
  spec.action_high = Vec::Constant(action_dim, high);
  spec.horizon = horizon;
  spec.dt = dt;
  return spec;
}

}  // namespace

double WrapAngle(double theta) {
  constexpr double kPi = std::numbers::pi;
  double wrapped = std::fmod(theta + kPi, 2.0 * kPi);
  if (wrapped < 0.0) wrapped += 2.0 * kPi;
  wrapped -= kPi;
  // fmod maps +pi to -pi; the interval is (-pi, pi].
  return wrapped == -kPi ? kPi : wrapped;
}

bool IsChained(const Trajectory& trajectory) {
  for (std::size_t i = 1; i < trajectory.size(); ++i) {
    if (trajectory[i - 1].next_state != trajectory[i].state) return false;
  }
  return true;
}

// -- Environment -- //

Environment::Environment(EnvSpec spec, EnvOptions options)
    : spec_(std::move(spec)), options_(options) {
  if (spec_.state_dim < 1 || spec_.action_dim < 1) {
    throw ConfigError("environment dimensions must be positive");
  }
  if (spec_.horizon < 1) throw ConfigError("episode horizon must be >= 1");
  if (!(spec_.action_low.array() < spec_.action_high.array()).all()) {
    throw ConfigError("action_low must be < action_high elementwise");
  }
}

Vec Environment::Reset(std::uint64_t seed) const {
  if (options_.deterministic_init) return FixedInitial();
  Rng rng(seed);
  return SampleInitial(rng);
}

void Environment::CheckInputs(const Vec& state, const Vec& action) const {
  if (state.size() != spec_.state_dim || action.size() != spec_.action_dim) {
    throw ShapeError(spec_.name + ": state/action dimension mismatch");
  }
  if (!state.allFinite() || !action.allFinite()) {
    throw NumericError(spec_.name + ": non-finite state or action");
  }
}

Vec Environment::Clip(const Vec& action) const {
  return action.cwiseMax(spec_.action_low).cwiseMin(spec_.action_high);
}

StepResult Environment::Step(const Vec& state, const Vec& action) const {
  CheckInputs(state, action);
  const Vec clipped = Clip(action);
  return {Dynamics(state, clipped), RewardOf(state, clipped)};
}

double Environment::Reward(const Vec& state, const Vec& action) const {
  CheckInputs(state, action);
  return RewardOf(state, Clip(action));
}

// -- Pendulum -- //

Pendulum::Pendulum(EnvOptions options)
    : Environment(MakeSpec("pendulum", 3, 1, -kMaxTorque, kMaxTorque,
                           kHorizon, kDt),
                  options) {}

Vec Pendulum::FromAngle(double theta, double theta_dot) {
  Vec s(3);
  s << std::cos(theta), std::sin(theta), theta_dot;
  return s;
}

double Pendulum::Angle(const Vec& state) {
  return WrapAngle(std::atan2(state[1], state[0]));
}

Vec Pendulum::Dynamics(const Vec& state, const Vec& action) const {
  const double theta = Angle(state);
  const double u = action[0];
  double theta_dot =
      state[2] + (3.0 * kGravity / (2.0 * kLength) * std::sin(theta) +
                  3.0 / (kMass * kLength * kLength) * u) *
                     kDt;
  theta_dot = std::clamp(theta_dot, -kMaxSpeed, kMaxSpeed);
  return FromAngle(theta + theta_dot * kDt, theta_dot);
}

double Pendulum::RewardOf(const Vec& state, const Vec& action) const {
  const double theta = Angle(state);
  const double u = action[0];
  return -(theta * theta + 0.1 * state[2] * state[2] + 0.001 * u * u);
}

Vec Pendulum::SampleInitial(Rng& rng) const {
  const double theta = rng.Uniform(-std::numbers::pi, std::numbers::pi);
  const double theta_dot = rng.Uniform(-1.0, 1.0);
  return FromAngle(theta, theta_dot);
}

Vec Pendulum::FixedInitial() const { return FromAngle(std::numbers::pi, 0.0); }

// -- CartPole -- //

CartPole::CartPole(EnvOptions options)
    : Environment(MakeSpec("cartpole", 4, 1, -1.0, 1.0, kHorizon, kDt),
                  options) {}

Vec CartPole::Dynamics(const Vec& state, const Vec& action) const {
  const double total_mass = kCartMass + kPoleMass;
  const double pole_moment = kPoleMass * kHalfLength;
  const double force = kForceMag * action[0];
  const double x = state[0], x_dot = state[1];
  const double theta = state[2], theta_dot = state[3];
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);

  const double temp =
      (force + pole_moment * theta_dot * theta_dot * sin_t) / total_mass;
  const double theta_acc =
      (kGravity * sin_t - cos_t * temp) /
      (kHalfLength * (4.0 / 3.0 - kPoleMass * cos_t * cos_t / total_mass));
  const double x_acc = temp - pole_moment * theta_acc * cos_t / total_mass;

  Vec next(4);
  next[1] = x_dot + x_acc * kDt;
  next[0] = x + next[1] * kDt;
  next[3] = theta_dot + theta_acc * kDt;
  next[2] = theta + next[3] * kDt;
  return next;
}

double CartPole::RewardOf(const Vec& state, const Vec& /*action*/) const {
  if (std::abs(WrapAngle(state[2])) > kAngleLimit) return kFallenReward;
  return 1.0 - 0.05 * std::abs(state[0]);
}

Vec CartPole::SampleInitial(Rng& rng) const {
  Vec s(4);
  for (int i = 0; i < 4; ++i) s[i] = rng.Uniform(-0.05, 0.05);
  return s;
}

Vec CartPole::FixedInitial() const { return Vec::Zero(4); }

// -- PointMass -- //

PointMass::PointMass(EnvOptions options)
    : Environment(MakeSpec("pointmass", 4, 2, -1.0, 1.0, kHorizon, kDt),
                  options) {}

Vec PointMass::Dynamics(const Vec& state, const Vec& action) const {
  Vec next(4);
  next.tail<2>() = state.tail<2>() + action * kDt;
  next.head<2>() = state.head<2>() + next.tail<2>() * kDt;
  return next;
}

double PointMass::RewardOf(const Vec& state, const Vec& action) const {
  return -state.head<2>().norm() - 0.01 * action.squaredNorm();
}

Vec PointMass::SampleInitial(Rng& rng) const {
  Vec s = Vec::Zero(4);
  s[0] = rng.Uniform(-1.0, 1.0);
  s[1] = rng.Uniform(-1.0, 1.0);
  return s;
}

Vec PointMass::FixedInitial() const {
  Vec s = Vec::Zero(4);
  s[0] = 1.0;
  s[1] = 1.0;
  return s;
}

// -- Lqr -- //

Lqr::Lqr(EnvOptions options)
    : Environment(MakeSpec("lqr", 2, 1, -kActionBound, kActionBound, kHorizon,
                           0.1),
                  options),
      riccati_(SolveRiccati()) {}

Eigen::Matrix2d Lqr::A() {
  Eigen::Matrix2d a;
  a << 1.0, 0.1, 0.0, 1.0;
  return a;
}

Eigen::Vector2d Lqr::B() { return {0.005, 0.1}; }

Eigen::Matrix2d Lqr::Q() { return Eigen::Matrix2d::Identity(); }

namespace {

// One step of the discounted Riccati recursion; also returns the gain.
Eigen::Matrix2d RiccatiStep(const Eigen::Matrix2d& p, double discount,
                            Eigen::RowVector2d* gain) {
  const Eigen::Matrix2d a = Lqr::A();
  const Eigen::Vector2d b = Lqr::B();
  const double denom = Lqr::kControlCost + discount * b.dot(p * b);
  const Eigen::RowVector2d k = discount * (b.transpose() * p * a) / denom;
  if (gain != nullptr) *gain = k;
  Eigen::Matrix2d next = Lqr::Q() + discount * a.transpose() * p * a -
                         discount * (a.transpose() * p * b) * k;
  return 0.5 * (next + next.transpose());
}

}  // namespace

Lqr::Riccati Lqr::SolveRiccati(double discount, double tolerance) {
  if (!(discount > 0.0 && discount <= 1.0)) {
    throw ConfigError("riccati discount must be in (0, 1]");
  }
  Riccati out;
  Eigen::Matrix2d p = Q();
  for (int it = 0; it < 100000; ++it) {
    Eigen::RowVector2d k;
    const Eigen::Matrix2d next = RiccatiStep(p, discount, &k);
    const double change = (next - p).cwiseAbs().maxCoeff();
    p = next;
    out.iterations = it + 1;
    if (change < tolerance) break;
  }
  out.value = p;
  RiccatiStep(p, discount, &out.gain);
  return out;
}

double Lqr::RiccatiResidual(const Riccati& solution, double discount) {
  Eigen::RowVector2d k;
  const Eigen::Matrix2d next = RiccatiStep(solution.value, discount, &k);
  return std::max((next - solution.value).cwiseAbs().maxCoeff(),
                  (k - solution.gain).cwiseAbs().maxCoeff());
}

Vec Lqr::OptimalAction(const Vec& state) const {
  if (state.size() != 2) throw ShapeError("lqr state must be 2-d");
  Vec u(1);
  u[0] = -riccati_.gain.dot(state);
  return u;
}

Vec Lqr::Dynamics(const Vec& state, const Vec& action) const {
  const Eigen::Vector2d x = state;
  return A() * x + B() * action[0];
}

double Lqr::RewardOf(const Vec& state, const Vec& action) const {
  const Eigen::Vector2d x = state;
  return -(x.dot(Q() * x) + kControlCost * action[0] * action[0]);
}

Vec Lqr::SampleInitial(Rng& rng) const {
  Vec s(2);
  s[0] = rng.Uniform(-1.0, 1.0);
  s[1] = rng.Uniform(-1.0, 1.0);
  return s;
}

Vec Lqr::FixedInitial() const {
  Vec s(2);
  s << 1.0, 0.0;
  return s;
}

// -- factory -- //

EnvPtr MakeEnvironment(std::string_view name, EnvOptions options) {
  if (name == "pendulum") return std::make_shared<Pendulum>(options);
  if (name == "cartpole") return std::make_shared<CartPole>(options);
  if (name == "pointmass") return std::make_shared<PointMass>(options);
  if (name == "lqr") return std::make_shared<Lqr>(options);
  throw ConfigError("unknown environment: " + std::string(name));
}

std::vector<std::string> EnvironmentNames() {
  return {"pendulum", "cartpole", "pointmass", "lqr"};
}

Vec LqrOptimalAction(const Environment& env, const Vec& state) {
  const auto* lqr = dynamic_cast<const Lqr*>(&env);
  if (lqr == nullptr) {
    throw UnsupportedError("lqr_optimal_action requires the lqr environment, got " +
                           env.name());
  }
  return lqr->OptimalAction(state);
}

}  // namespace mpcmfrl
