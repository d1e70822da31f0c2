#include "mpcmfrl/agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mpcmfrl/errors.hpp"

namespace mpcmfrl {

void AgentConfig::Validate() const {
  if (!(discount > 0.0 && discount < 1.0)) {
    throw ConfigError("agent: discount must be in (0, 1)");
  }
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) {
    throw ConfigError("agent: gae_lambda must be in [0, 1]");
  }
  if (!(max_kl > 0.0)) throw ConfigError("agent: max_kl must be > 0");
  if (cg_iterations < 1) throw ConfigError("agent: cg_iterations must be >= 1");
  if (line_search_steps < 1) {
    throw ConfigError("agent: line_search_steps must be >= 1");
  }
  if (episodes_per_iteration < 1) {
    throw ConfigError("agent: episodes_per_iteration must be >= 1");
  }
  if (value_batch_size < 1) throw ConfigError("agent: value_batch_size must be >= 1");
}

// -- GaussianPolicy -- //

GaussianPolicy::GaussianPolicy(Mlp mean_net, Vec log_std)
    : mean_net_(std::move(mean_net)) {
  if (log_std.size() != mean_net_.output_dim()) {
    throw ShapeError("policy: log_std size must equal action dim");
  }
  set_log_std(log_std);
}

GaussianPolicy GaussianPolicy::Create(int state_dim, int action_dim,
                                      const std::vector<int>& hidden, Rng& rng,
                                      double init_log_std) {
  return GaussianPolicy(
      Mlp::Random(state_dim, hidden, action_dim, rng, 1.0, 0.01),
      Vec::Constant(action_dim, init_log_std));
}

void GaussianPolicy::set_log_std(const Vec& log_std) {
  log_std_ = log_std.cwiseMax(kMinLogStd).cwiseMin(kMaxLogStd);
}

Mat GaussianPolicy::MeanActions(const Mat& states) const {
  return mean_net_.Forward(states);
}

Vec GaussianPolicy::MeanAction(const Vec& state) const {
  return MeanActions(state.transpose()).row(0).transpose();
}

Mat GaussianPolicy::SampleActions(const Mat& states, Rng& rng) const {
  Mat actions = MeanActions(states);
  const Vec std = log_std_.array().exp();
  for (Eigen::Index i = 0; i < actions.rows(); ++i) {
    for (Eigen::Index d = 0; d < actions.cols(); ++d) {
      actions(i, d) += std[d] * rng.Normal();
    }
  }
  return actions;
}

Vec GaussianPolicy::SampleAction(const Vec& state, Rng& rng) const {
  return SampleActions(state.transpose(), rng).row(0).transpose();
}

Vec GaussianPolicy::LogProbs(const Mat& states, const Mat& actions) const {
  return GaussianLogDensity(MeanActions(states), log_std_, actions);
}

double GaussianPolicy::LogProb(const Vec& state, const Vec& action) const {
  return LogProbs(state.transpose(), action.transpose())[0];
}

Vec GaussianPolicy::WeightedLogProbGradient(const Mat& states,
                                            const Mat& actions,
                                            const Vec& weights) const {
  if (weights.size() != states.rows()) {
    throw ShapeError("policy: weight count must equal batch size");
  }
  Mlp::Cache cache;
  const Mat mean = mean_net_.Forward(states, &cache);
  const Eigen::RowVectorXd inv_var = (-2.0 * log_std_).array().exp().transpose();
  const Mat diff = actions - mean;
  // d log pi / d mu = (a - mu) / sigma^2
  const Mat mean_grad =
      (diff.array().rowwise() * inv_var.array()).colwise() * weights.array();
  // d log pi / d log sigma = (a - mu)^2 / sigma^2 - 1
  const Mat z2 = diff.array().square().rowwise() * inv_var.array();
  const Vec log_std_grad =
      ((z2.array() - 1.0).colwise() * weights.array()).colwise().sum().transpose();
  Vec grad(NumParameters());
  grad.head(mean_net_.NumParameters()) = mean_net_.Backward(cache, mean_grad);
  grad.tail(log_std_.size()) = log_std_grad;
  return grad;
}

double GaussianPolicy::MeanKl(const GaussianPolicy& other,
                              const Mat& states) const {
  const Mat mu_old = MeanActions(states);
  const Mat mu_new = other.MeanActions(states);
  const Eigen::RowVectorXd var_old = (2.0 * log_std_).array().exp().transpose();
  const Eigen::RowVectorXd inv_var_new =
      (-2.0 * other.log_std_).array().exp().transpose();
  const double log_ratio = (other.log_std_ - log_std_).sum();
  const Mat quad = ((mu_old - mu_new).array().square().rowwise() + var_old.array())
                       .rowwise() *
                   inv_var_new.array();
  const double d = static_cast<double>(log_std_.size());
  return log_ratio + 0.5 * quad.rowwise().sum().mean() - 0.5 * d;
}

Vec GaussianPolicy::FisherVectorProduct(const Mat& states,
                                        const Vec& direction) const {
  if (direction.size() != NumParameters()) {
    throw ShapeError("fisher: direction size mismatch");
  }
  const int n_mean = mean_net_.NumParameters();
  const double n = static_cast<double>(states.rows());
  const Mat jv = mean_net_.JacobianVectorProduct(states, direction.head(n_mean));
  const Eigen::RowVectorXd inv_var = (-2.0 * log_std_).array().exp().transpose();
  const Mat weighted = (jv.array().rowwise() * inv_var.array()) / n;
  Mlp::Cache cache;
  mean_net_.Forward(states, &cache);
  Vec out(NumParameters());
  out.head(n_mean) = mean_net_.Backward(cache, weighted);
  out.tail(log_std_.size()) = 2.0 * direction.tail(log_std_.size());
  return out;
}

int GaussianPolicy::NumParameters() const {
  return mean_net_.NumParameters() + static_cast<int>(log_std_.size());
}

Vec GaussianPolicy::Parameters() const {
  Vec flat(NumParameters());
  flat.head(mean_net_.NumParameters()) = mean_net_.Parameters();
  flat.tail(log_std_.size()) = log_std_;
  return flat;
}

void GaussianPolicy::SetParameters(const Vec& flat) {
  if (flat.size() != NumParameters()) {
    throw ShapeError("policy: parameter size mismatch");
  }
  mean_net_.SetParameters(flat.head(mean_net_.NumParameters()));
  set_log_std(flat.tail(log_std_.size()));
}

nlohmann::json GaussianPolicy::ToJson() const {
  return {{"mean_net", mean_net_.ToJson()}, {"log_std", VecToJson(log_std_)}};
}

GaussianPolicy GaussianPolicy::FromJson(const nlohmann::json& j) {
  return GaussianPolicy(Mlp::FromJson(j.at("mean_net")),
                        VecFromJson(j.at("log_std")));
}

// -- ValueFunction -- //

ValueFunction::ValueFunction(Mlp net, AdamConfig adam)
    : net_(std::move(net)), adam_(net_.NumParameters(), adam) {
  if (net_.output_dim() != 1) throw ShapeError("value net must have 1 output");
}

ValueFunction ValueFunction::Create(int state_dim, const std::vector<int>& hidden,
                                    Rng& rng, AdamConfig adam) {
  return ValueFunction(Mlp::Random(state_dim, hidden, 1, rng), adam);
}

Vec ValueFunction::Values(const Mat& states) const {
  return (offset_ + scale_ * net_.Forward(states).col(0).array()).matrix();
}

double ValueFunction::Value(const Vec& state) const {
  return Values(state.transpose())[0];
}

double ValueFunction::Fit(const Mat& states, const Vec& targets, int epochs,
                          int batch_size, Rng& rng) {
  if (states.rows() != targets.size()) {
    throw ShapeError("fit_value: states/returns length mismatch");
  }
  if (states.rows() == 0) throw StateError("fit_value: no samples");
  if (batch_size < 1) throw ConfigError("fit_value: batch_size must be >= 1");
  if (!stats_frozen_ && epochs > 0) {
    offset_ = targets.mean();
    const double sd =
        std::sqrt((targets.array() - offset_).square().mean());
    scale_ = sd > 1e-8 ? sd : 1.0;
    stats_frozen_ = true;
  }
  const Vec scaled = (targets.array() - offset_) / scale_;
  const auto n = static_cast<std::size_t>(states.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(batch_size));
      const auto m = static_cast<Eigen::Index>(stop - start);
      Mat x(m, states.cols());
      Mat y(m, 1);
      for (Eigen::Index i = 0; i < m; ++i) {
        x.row(i) = states.row(static_cast<Eigen::Index>(order[start + i]));
        y(i, 0) = scaled[static_cast<Eigen::Index>(order[start + i])];
      }
      Mlp::Cache cache;
      const Mat out = net_.Forward(x, &cache);
      const LossAndGrad mse = MeanSquaredError(out, y);
      Vec params = net_.Parameters();
      adam_.Step(params, net_.Backward(cache, mse.output_grad));
      net_.SetParameters(params);
    }
  }
  return (Values(states) - targets).squaredNorm() /
         static_cast<double>(states.rows());
}

nlohmann::json ValueFunction::ToJson() const {
  return {{"net", net_.ToJson()},
          {"adam", adam_.ToJson()},
          {"offset", offset_},
          {"scale", scale_},
          {"stats_frozen", stats_frozen_}};
}

ValueFunction ValueFunction::FromJson(const nlohmann::json& j) {
  ValueFunction v(Mlp::FromJson(j.at("net")));
  v.adam_ = Adam::FromJson(j.at("adam"));
  v.offset_ = j.at("offset").get<double>();
  v.scale_ = j.at("scale").get<double>();
  v.stats_frozen_ = j.at("stats_frozen").get<bool>();
  return v;
}

// -- returns and advantages -- //

AdvantageEstimate ComputeReturnsAndAdvantages(
    const std::vector<Trajectory>& trajectories, const ValueFunction& value_fn,
    double discount, double lambda) {
  if (trajectories.empty()) throw StateError("advantages: no trajectories");
  std::size_t total = 0;
  for (const auto& tr : trajectories) total += tr.size();
  if (total == 0) throw StateError("advantages: empty trajectories");

  AdvantageEstimate est;
  est.returns.resize(static_cast<Eigen::Index>(total));
  est.raw_advantages.resize(static_cast<Eigen::Index>(total));
  Eigen::Index base = 0;
  for (const auto& tr : trajectories) {
    if (!IsChained(tr)) throw StateError("advantages: trajectory is not chained");
    const auto len = static_cast<Eigen::Index>(tr.size());
    Mat states(len, tr.front().state.size());
    for (Eigen::Index t = 0; t < len; ++t) states.row(t) = tr[t].state.transpose();
    const Vec values = value_fn.Values(states);
    double next_return = 0.0, next_adv = 0.0, next_value = 0.0;
    for (Eigen::Index t = len - 1; t >= 0; --t) {
      const double r = tr[static_cast<std::size_t>(t)].reward;
      next_return = r + discount * next_return;
      const double td = r + discount * next_value - values[t];
      next_adv = td + discount * lambda * next_adv;
      next_value = values[t];
      est.returns[base + t] = next_return;
      est.raw_advantages[base + t] = next_adv;
    }
    base += len;
  }
  const double mean = est.raw_advantages.mean();
  const double sd =
      std::sqrt((est.raw_advantages.array() - mean).square().mean());
  est.advantages = (est.raw_advantages.array() - mean) / std::max(sd, 1e-8);
  return est;
}

// -- TRPO -- //

namespace {

double Surrogate(const GaussianPolicy& policy, const Mat& states,
                 const Mat& actions, const Vec& advantages,
                 const Vec& old_log_probs) {
  const Vec ratio = (policy.LogProbs(states, actions) - old_log_probs).array().exp();
  return ratio.dot(advantages) / static_cast<double>(advantages.size());
}

Vec ConjugateGradient(const std::function<Vec(const Vec&)>& apply,
                      const Vec& b, int iterations) {
  Vec x = Vec::Zero(b.size());
  Vec r = b;
  Vec p = b;
  double rr = r.squaredNorm();
  for (int i = 0; i < iterations && rr > 1e-20; ++i) {
    const Vec ap = apply(p);
    const double alpha = rr / p.dot(ap);
    x += alpha * p;
    r -= alpha * ap;
    const double rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  return x;
}

}  // namespace

Vec SurrogateGradient(const GaussianPolicy& policy, const Mat& states,
                      const Mat& actions, const Vec& advantages) {
  return policy.WeightedLogProbGradient(
      states, actions, advantages / static_cast<double>(advantages.size()));
}

TrpoDiagnostics TrpoUpdate(GaussianPolicy& policy, const Mat& states,
                           const Mat& actions, const Vec& advantages,
                           const AgentConfig& config) {
  TrpoDiagnostics diag;
  if (states.rows() == 0) return diag;
  if (!advantages.allFinite() || !states.allFinite() || !actions.allFinite()) {
    return diag;
  }
  const Vec old_params = policy.Parameters();
  const GaussianPolicy old_policy = policy;
  const Vec old_log_probs = policy.LogProbs(states, actions);
  const double old_surrogate =
      Surrogate(policy, states, actions, advantages, old_log_probs);

  const Vec grad = SurrogateGradient(policy, states, actions, advantages);
  diag.gradient_norm = grad.norm();
  if (!grad.allFinite() || diag.gradient_norm == 0.0) return diag;

  const auto fvp = [&](const Vec& v) -> Vec {
    return policy.FisherVectorProduct(states, v) + config.cg_damping * v;
  };
  const Vec direction = ConjugateGradient(fvp, grad, config.cg_iterations);
  const double shs = 0.5 * direction.dot(fvp(direction));
  if (!(shs > 0.0) || !std::isfinite(shs)) return diag;
  const Vec full_step = std::sqrt(config.max_kl / shs) * direction;
  const double expected = grad.dot(full_step);

  double fraction = 1.0;
  for (int k = 0; k < config.line_search_steps; ++k, fraction *= 0.5) {
    policy.SetParameters(old_params + fraction * full_step);
    const double improvement =
        Surrogate(policy, states, actions, advantages, old_log_probs) -
        old_surrogate;
    const double kl = old_policy.MeanKl(policy, states);
    if (std::isfinite(improvement) && std::isfinite(kl) &&
        kl <= config.kl_acceptance_factor * config.max_kl && improvement >= 0.0) {
      diag.accepted = true;
      diag.surrogate_improvement = improvement;
      diag.kl = kl;
      diag.expected_improvement = fraction * expected;
      diag.backtracks = k;
      return diag;
    }
  }
  policy.SetParameters(old_params);
  diag.backtracks = config.line_search_steps;
  return diag;
}

double FitValue(ValueFunction& value_fn, const Mat& states, const Vec& returns,
                int epochs, int batch_size, Rng& rng) {
  return value_fn.Fit(states, returns, epochs, batch_size, rng);
}

// -- rollouts -- //

ActionSource PolicyActionSource(const GaussianPolicy& policy) {
  return [&policy](const Vec& s, Rng& rng) { return policy.SampleAction(s, rng); };
}

ActionSource MeanActionSource(const GaussianPolicy& policy) {
  return [&policy](const Vec& s, Rng&) { return policy.MeanAction(s); };
}

ActionSource UniformActionSource(const Environment& env) {
  const Vec low = env.spec().action_low;
  const Vec high = env.spec().action_high;
  return [low, high](const Vec&, Rng& rng) {
    Vec a(low.size());
    for (Eigen::Index d = 0; d < a.size(); ++d) a[d] = rng.Uniform(low[d], high[d]);
    return a;
  };
}

std::size_t RolloutBatch::num_steps() const {
  std::size_t n = 0;
  for (const auto& tr : trajectories) n += tr.size();
  return n;
}

Trajectory RunEpisode(const Environment& env, const ActionSource& source,
                      const Vec& start, Rng& rng,
                      std::vector<Vec>* proposed_actions) {
  Trajectory traj;
  traj.reserve(static_cast<std::size_t>(env.horizon()));
  Vec state = start;
  for (int t = 0; t < env.horizon(); ++t) {
    Vec proposed = source(state, rng);
    StepResult step = env.Step(state, proposed);
    Transition tr{state, env.Clip(proposed), step.next_state, step.reward};
    if (proposed_actions != nullptr) proposed_actions->push_back(std::move(proposed));
    state = step.next_state;
    traj.push_back(std::move(tr));
  }
  return traj;
}

RolloutBatch CollectRollouts(const Environment& env, const ActionSource& source,
                             std::size_t n_steps, Rng& rng) {
  RolloutBatch batch;
  while (batch.num_steps() < n_steps) {
    const std::uint64_t reset_seed = rng.engine()();
    Rng episode_rng = rng.Split();
    std::vector<Vec> proposed;
    Trajectory traj = RunEpisode(env, source, env.Reset(reset_seed), episode_rng,
                                 &proposed);
    double total = 0.0;
    for (const auto& t : traj) total += t.reward;
    batch.episode_returns.push_back(total);
    batch.trajectories.push_back(std::move(traj));
    batch.proposed_actions.push_back(std::move(proposed));
  }
  return batch;
}

}  // namespace mpcmfrl
