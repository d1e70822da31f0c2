#ifndef MPCMFRL_AGENT_HPP_
#define MPCMFRL_AGENT_HPP_

#include <functional>
#include <nlohmann/json.hpp>
#include <vector>

#include "mpcmfrl/envs.hpp"
#include "mpcmfrl/neuralnet.hpp"

namespace mpcmfrl {

struct AgentConfig {
  double discount = 0.99;
  double gae_lambda = 0.95;
  double max_kl = 0.01;  // trust region size delta
  double kl_acceptance_factor = 1.5;
  int cg_iterations = 10;
  double cg_damping = 0.1;
  int line_search_steps = 10;
  int episodes_per_iteration = 4;
  int value_epochs = 20;
  int value_batch_size = 64;
  AdamConfig value_adam{};
  std::vector<int> policy_hidden{32, 32};
  std::vector<int> value_hidden{32, 32};
  double init_log_std = 0.0;

  // Throws ConfigError on out-of-range values.
  void Validate() const;
};

// Diagonal Gaussian policy with a state-independent log standard deviation.
// Flat parameters are [mean network parameters..., log_std...].
class GaussianPolicy {
 public:
  static constexpr double kMinLogStd = -5.0;
  static constexpr double kMaxLogStd = 2.0;

  GaussianPolicy() = default;
  GaussianPolicy(Mlp mean_net, Vec log_std);
  // Mean network uses fan-in init with the last layer scaled by 0.01.
  static GaussianPolicy Create(int state_dim, int action_dim,
                               const std::vector<int>& hidden, Rng& rng,
                               double init_log_std = 0.0);

  int state_dim() const { return mean_net_.input_dim(); }
  int action_dim() const { return mean_net_.output_dim(); }

  Vec SampleAction(const Vec& state, Rng& rng) const;
  Mat SampleActions(const Mat& states, Rng& rng) const;
  Vec MeanAction(const Vec& state) const;
  Mat MeanActions(const Mat& states) const;

  double LogProb(const Vec& state, const Vec& action) const;
  Vec LogProbs(const Mat& states, const Mat& actions) const;
  // Gradient of sum_i weights_i * log pi(a_i | s_i) over flat parameters.
  Vec WeightedLogProbGradient(const Mat& states, const Mat& actions,
                              const Vec& weights) const;

  // Mean KL(this || other) over the given states.
  double MeanKl(const GaussianPolicy& other, const Mat& states) const;
  // Fisher information (of the mean KL) times a flat direction.
  Vec FisherVectorProduct(const Mat& states, const Vec& direction) const;

  int NumParameters() const;
  Vec Parameters() const;
  // Log-std entries are clamped to [kMinLogStd, kMaxLogStd].
  void SetParameters(const Vec& flat);

  const Mlp& mean_net() const { return mean_net_; }
  Mlp& mean_net() { return mean_net_; }
  const Vec& log_std() const { return log_std_; }
  void set_log_std(const Vec& log_std);

  nlohmann::json ToJson() const;
  static GaussianPolicy FromJson(const nlohmann::json& j);

 private:
  Mlp mean_net_;
  Vec log_std_;
};

// V(s) = offset + scale * net(s). offset/scale are set from the first batch
// of regression targets and frozen afterwards; a fresh function has
// offset 0, scale 1.
class ValueFunction {
 public:
  ValueFunction() = default;
  explicit ValueFunction(Mlp net, AdamConfig adam = {});
  static ValueFunction Create(int state_dim, const std::vector<int>& hidden,
                              Rng& rng, AdamConfig adam = {});

  double Value(const Vec& state) const;
  Vec Values(const Mat& states) const;

  // Adam regression of V to `targets` for `epochs` shuffled passes;
  // returns the final full-batch MSE.
  double Fit(const Mat& states, const Vec& targets, int epochs,
             int batch_size, Rng& rng);

  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }
  double offset() const { return offset_; }
  double scale() const { return scale_; }
  bool target_stats_frozen() const { return stats_frozen_; }

  nlohmann::json ToJson() const;
  static ValueFunction FromJson(const nlohmann::json& j);

 private:
  Mlp net_;
  Adam adam_;
  double offset_ = 0.0;
  double scale_ = 1.0;
  bool stats_frozen_ = false;
};

// Samples of one on-policy batch, flattened in trajectory order.
struct AdvantageEstimate {
  Vec returns;           // G_t
  Vec raw_advantages;    // GAE(lambda), before normalization
  Vec advantages;        // normalized to mean 0, std 1
};

// G_t = r_t + gamma G_{t+1} with G_{T+1} = 0; GAE with V(s_{T+1}) = 0.
AdvantageEstimate ComputeReturnsAndAdvantages(
    const std::vector<Trajectory>& trajectories, const ValueFunction& value_fn,
    double discount, double lambda);

struct TrpoDiagnostics {
  bool accepted = false;
  double surrogate_improvement = 0.0;  // of the accepted step
  double kl = 0.0;                     // mean KL(old || new) of the accepted step
  double expected_improvement = 0.0;
  double gradient_norm = 0.0;
  int backtracks = 0;
};

// Gradient of the surrogate (1/n) sum ratio_i A_i at ratio = 1.
Vec SurrogateGradient(const GaussianPolicy& policy, const Mat& states,
                      const Mat& actions, const Vec& advantages);

// One trust-region step: conjugate gradient on the Fisher system, then
// halving line search. Rejected steps leave the policy unchanged.
TrpoDiagnostics TrpoUpdate(GaussianPolicy& policy, const Mat& states,
                           const Mat& actions, const Vec& advantages,
                           const AgentConfig& config);

double FitValue(ValueFunction& value_fn, const Mat& states, const Vec& returns,
                int epochs, int batch_size, Rng& rng);

// -- data collection -- //

// Chooses an action for a real state; may be stochastic. The returned action
// is what the agent proposes (possibly out of bounds); envs clip.
using ActionSource = std::function<Vec(const Vec& state, Rng& rng)>;

ActionSource PolicyActionSource(const GaussianPolicy& policy);
ActionSource MeanActionSource(const GaussianPolicy& policy);
ActionSource UniformActionSource(const Environment& env);

struct RolloutBatch {
  std::vector<Trajectory> trajectories;
  // Unclipped actions as proposed by the source, parallel to trajectories.
  std::vector<std::vector<Vec>> proposed_actions;
  std::vector<double> episode_returns;  // undiscounted

  std::size_t num_steps() const;
};

// Full episodes until at least n_steps transitions are collected.
RolloutBatch CollectRollouts(const Environment& env, const ActionSource& source,
                             std::size_t n_steps, Rng& rng);

// Runs exactly one episode from the given start state.
Trajectory RunEpisode(const Environment& env, const ActionSource& source,
                      const Vec& start, Rng& rng,
                      std::vector<Vec>* proposed_actions = nullptr);

}  // namespace mpcmfrl

#endif  // MPCMFRL_AGENT_HPP_
