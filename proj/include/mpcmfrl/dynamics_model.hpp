#ifndef MPCMFRL_DYNAMICS_MODEL_HPP_
#define MPCMFRL_DYNAMICS_MODEL_HPP_

#include <cstddef>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpcmfrl/envs.hpp"
#include "mpcmfrl/neuralnet.hpp"

namespace mpcmfrl {

// Anything that maps a batch of (state, action) rows to next-state rows.
// Implementations must be safe to call concurrently on a const instance.
class TransitionModel {
 public:
  virtual ~TransitionModel() = default;
  virtual int state_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual Mat PredictBatch(const Mat& states, const Mat& actions) const = 0;

  Vec Predict(const Vec& state, const Vec& action) const;
};

// The environment's own dynamics; used for oracle tests.
class TrueDynamics final : public TransitionModel {
 public:
  explicit TrueDynamics(EnvPtr env) : env_(std::move(env)) {}
  int state_dim() const override { return env_->state_dim(); }
  int action_dim() const override { return env_->action_dim(); }
  Mat PredictBatch(const Mat& states, const Mat& actions) const override;

 private:
  EnvPtr env_;
};

// Append-only transition store D.
class TransitionDataset {
 public:
  TransitionDataset() = default;
  TransitionDataset(int state_dim, int action_dim)
      : state_dim_(state_dim), action_dim_(action_dim) {}

  void Append(const Transition& t);
  void Append(const Trajectory& trajectory);
  void Append(const std::vector<Trajectory>& trajectories);

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  const Transition& operator[](std::size_t i) const { return data_[i]; }
  const std::vector<Transition>& transitions() const { return data_; }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }

  // One transition per row: state..., action..., next_state..., reward.
  void SaveCsv(const std::string& path) const;
  static TransitionDataset LoadCsv(const std::string& path, int state_dim,
                                   int action_dim);

 private:
  int state_dim_ = 0;
  int action_dim_ = 0;
  std::vector<Transition> data_;
};

// Uniform sampling with replacement.
std::vector<Transition> SampleBatch(const TransitionDataset& dataset,
                                    std::size_t batch_size, Rng& rng);

struct Normalizer {
  static constexpr double kMinStd = 1e-6;

  Vec state_mean, state_std;
  Vec action_mean, action_std;
  // Statistics of the regression target: state deltas in delta mode,
  // next states in absolute mode.
  Vec target_mean, target_std;

  static Normalizer Identity(int state_dim, int action_dim);
  static Normalizer Fit(std::span<const Transition> data, bool delta_targets);

  nlohmann::json ToJson() const;
  static Normalizer FromJson(const nlohmann::json& j);
};

enum class PredictionMode { kDelta, kAbsolute };

struct DynamicsModelConfig {
  std::vector<int> hidden_sizes{64, 64};
  PredictionMode mode = PredictionMode::kDelta;
  bool normalize = true;
  AdamConfig adam{};
  int epochs = 30;
  int batch_size = 128;
  double held_out_fraction = 0.1;
};

struct TrainingReport {
  std::vector<double> train_loss;     // mean batch loss per epoch
  std::vector<double> held_out_loss;  // empty when the split is empty
  bool aborted = false;               // numeric failure; model restored
};

// Learned forward model f(s, a). Internally the network maps normalized
// (state, action) to a normalized target; Predict always works in raw units
// and clips actions to the box first.
class DynamicsModel final : public TransitionModel {
 public:
  DynamicsModel() = default;
  DynamicsModel(int state_dim, int action_dim, Vec action_low, Vec action_high,
                DynamicsModelConfig config, Rng& init_rng);
  DynamicsModel(const Environment& env, DynamicsModelConfig config,
                Rng& init_rng);

  int state_dim() const override { return state_dim_; }
  int action_dim() const override { return action_dim_; }
  Mat PredictBatch(const Mat& states, const Mat& actions) const override;

  // Eq. 1 loss in raw state units over the batch.
  double Loss(std::span<const Transition> batch) const;
  // Loss plus its gradient with respect to the network parameters.
  double LossAndGradient(std::span<const Transition> batch, Vec* grad) const;

  TrainingReport Train(const TransitionDataset& dataset, int epochs,
                       int batch_size, Rng& rng);

  const Mlp& network() const { return net_; }
  Mlp& network() { return net_; }
  const Normalizer& normalizer() const { return normalizer_; }
  void set_normalizer(Normalizer n) { normalizer_ = std::move(n); }
  const DynamicsModelConfig& config() const { return config_; }
  const Adam& optimizer() const { return adam_; }

  nlohmann::json ToJson() const;
  static DynamicsModel FromJson(const nlohmann::json& j);

 private:
  Mat NetworkInput(const Mat& states, const Mat& clipped_actions) const;
  Mat ComposePrediction(const Mat& states, const Mat& net_output) const;
  Mat ClipActions(const Mat& actions) const;

  int state_dim_ = 0;
  int action_dim_ = 0;
  Vec action_low_, action_high_;
  DynamicsModelConfig config_;
  Mlp net_;
  Normalizer normalizer_;
  Adam adam_;
};

// (1/|B|) sum ||s' - f(s, a)||^2 over the batch.
double DynamicsLoss(const TransitionModel& model,
                    std::span<const Transition> batch);

// Train for `epochs`; thin wrapper over DynamicsModel::Train.
TrainingReport TrainModel(DynamicsModel& model, const TransitionDataset& dataset,
                          int epochs, int batch_size, Rng& rng);

// Mean squared single-step error on a fixed test set.
double HeldOutError(const TransitionModel& model,
                    std::span<const Transition> test_set);

}  // namespace mpcmfrl

#endif  // MPCMFRL_DYNAMICS_MODEL_HPP_
