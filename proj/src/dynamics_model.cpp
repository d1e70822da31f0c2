#include "mpcmfrl/dynamics_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mpcmfrl/errors.hpp"

namespace mpcmfrl {

namespace {

struct BatchMatrices {
  Mat states, actions, next_states;
};

BatchMatrices Stack(std::span<const Transition> batch) {
  if (batch.empty()) throw StateError("empty transition batch");
  const auto n = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index sd = batch.front().state.size();
  const Eigen::Index ad = batch.front().action.size();
  BatchMatrices m{Mat(n, sd), Mat(n, ad), Mat(n, sd)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const Transition& t = batch[static_cast<std::size_t>(i)];
    m.states.row(i) = t.state.transpose();
    m.actions.row(i) = t.action.transpose();
    m.next_states.row(i) = t.next_state.transpose();
  }
  return m;
}

Vec ColumnStd(const Mat& x, const Vec& mean) {
  const double n = static_cast<double>(x.rows());
  Vec var = (x.rowwise() - mean.transpose()).array().square().colwise().sum() / n;
  return var.array().sqrt().max(Normalizer::kMinStd);
}

std::string FormatDouble(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

Vec TransitionModel::Predict(const Vec& state, const Vec& action) const {
  return PredictBatch(state.transpose(), action.transpose()).row(0).transpose();
}

Mat TrueDynamics::PredictBatch(const Mat& states, const Mat& actions) const {
  Mat next(states.rows(), states.cols());
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    next.row(i) =
        env_->Step(states.row(i).transpose(), actions.row(i).transpose())
            .next_state.transpose();
  }
  return next;
}

// -- dataset -- //

void TransitionDataset::Append(const Transition& t) {
  if (state_dim_ == 0 && action_dim_ == 0) {
    state_dim_ = static_cast<int>(t.state.size());
    action_dim_ = static_cast<int>(t.action.size());
  }
  if (t.state.size() != state_dim_ || t.next_state.size() != state_dim_ ||
      t.action.size() != action_dim_) {
    throw ShapeError("dataset: transition dimension mismatch");
  }
  data_.push_back(t);
}

void TransitionDataset::Append(const Trajectory& trajectory) {
  for (const auto& t : trajectory) Append(t);
}

void TransitionDataset::Append(const std::vector<Trajectory>& trajectories) {
  for (const auto& tr : trajectories) Append(tr);
}

void TransitionDataset::SaveCsv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (int i = 0; i < state_dim_; ++i) out << "s" << i << ",";
  for (int i = 0; i < action_dim_; ++i) out << "a" << i << ",";
  for (int i = 0; i < state_dim_; ++i) out << "next_s" << i << ",";
  out << "reward\n";
  for (const auto& t : data_) {
    for (double v : t.state) out << FormatDouble(v) << ",";
    for (double v : t.action) out << FormatDouble(v) << ",";
    for (double v : t.next_state) out << FormatDouble(v) << ",";
    out << FormatDouble(t.reward) << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

TransitionDataset TransitionDataset::LoadCsv(const std::string& path,
                                             int state_dim, int action_dim) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  TransitionDataset ds(state_dim, action_dim);
  std::string line;
  std::getline(in, line);  // header
  const int width = 2 * state_dim + action_dim + 1;
  std::vector<double> row;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    row.clear();
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (static_cast<int>(row.size()) != width) {
      throw IoError(path + ": row has " + std::to_string(row.size()) +
                    " fields, expected " + std::to_string(width));
    }
    Transition t;
    t.state = Eigen::Map<Vec>(row.data(), state_dim);
    t.action = Eigen::Map<Vec>(row.data() + state_dim, action_dim);
    t.next_state = Eigen::Map<Vec>(row.data() + state_dim + action_dim, state_dim);
    t.reward = row.back();
    ds.Append(t);
  }
  return ds;
}

std::vector<Transition> SampleBatch(const TransitionDataset& dataset,
                                    std::size_t batch_size, Rng& rng) {
  if (dataset.empty()) throw StateError("sample_batch: dataset is empty");
  std::vector<Transition> batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    batch.push_back(dataset[rng.Index(dataset.size())]);
  }
  return batch;
}

// -- normalizer -- //

Normalizer Normalizer::Identity(int state_dim, int action_dim) {
  return {Vec::Zero(state_dim), Vec::Ones(state_dim),
          Vec::Zero(action_dim), Vec::Ones(action_dim),
          Vec::Zero(state_dim), Vec::Ones(state_dim)};
}

Normalizer Normalizer::Fit(std::span<const Transition> data, bool delta_targets) {
  const BatchMatrices m = Stack(data);
  const Mat targets = delta_targets ? Mat(m.next_states - m.states) : m.next_states;
  Normalizer n;
  n.state_mean = m.states.colwise().mean().transpose();
  n.state_std = ColumnStd(m.states, n.state_mean);
  n.action_mean = m.actions.colwise().mean().transpose();
  n.action_std = ColumnStd(m.actions, n.action_mean);
  n.target_mean = targets.colwise().mean().transpose();
  n.target_std = ColumnStd(targets, n.target_mean);
  return n;
}

nlohmann::json Normalizer::ToJson() const {
  return {{"state_mean", VecToJson(state_mean)},
          {"state_std", VecToJson(state_std)},
          {"action_mean", VecToJson(action_mean)},
          {"action_std", VecToJson(action_std)},
          {"target_mean", VecToJson(target_mean)},
          {"target_std", VecToJson(target_std)}};
}

Normalizer Normalizer::FromJson(const nlohmann::json& j) {
  return {VecFromJson(j.at("state_mean")),  VecFromJson(j.at("state_std")),
          VecFromJson(j.at("action_mean")), VecFromJson(j.at("action_std")),
          VecFromJson(j.at("target_mean")), VecFromJson(j.at("target_std"))};
}

// -- model -- //

DynamicsModel::DynamicsModel(int state_dim, int action_dim, Vec action_low,
                             Vec action_high, DynamicsModelConfig config,
                             Rng& init_rng)
    : state_dim_(state_dim),
      action_dim_(action_dim),
      action_low_(std::move(action_low)),
      action_high_(std::move(action_high)),
      config_(std::move(config)),
      net_(Mlp::Random(state_dim + action_dim, config_.hidden_sizes, state_dim,
                       init_rng)),
      normalizer_(Normalizer::Identity(state_dim, action_dim)),
      adam_(net_.NumParameters(), config_.adam) {}

DynamicsModel::DynamicsModel(const Environment& env, DynamicsModelConfig config,
                             Rng& init_rng)
    : DynamicsModel(env.state_dim(), env.action_dim(), env.spec().action_low,
                    env.spec().action_high, std::move(config), init_rng) {}

Mat DynamicsModel::ClipActions(const Mat& actions) const {
  Mat out = actions;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    out.col(j) = out.col(j).cwiseMax(action_low_[j]).cwiseMin(action_high_[j]);
  }
  return out;
}

Mat DynamicsModel::NetworkInput(const Mat& states, const Mat& clipped) const {
  Mat input(states.rows(), state_dim_ + action_dim_);
  input.leftCols(state_dim_) =
      (states.rowwise() - normalizer_.state_mean.transpose()).array().rowwise() /
      normalizer_.state_std.transpose().array();
  input.rightCols(action_dim_) =
      (clipped.rowwise() - normalizer_.action_mean.transpose()).array().rowwise() /
      normalizer_.action_std.transpose().array();
  return input;
}

Mat DynamicsModel::ComposePrediction(const Mat& states, const Mat& out) const {
  Mat target = out.array().rowwise() * normalizer_.target_std.transpose().array();
  target.rowwise() += normalizer_.target_mean.transpose();
  if (config_.mode == PredictionMode::kDelta) target += states;
  return target;
}

Mat DynamicsModel::PredictBatch(const Mat& states, const Mat& actions) const {
  if (states.cols() != state_dim_ || actions.cols() != action_dim_ ||
      states.rows() != actions.rows()) {
    throw ShapeError("dynamics model: batch shape mismatch");
  }
  return ComposePrediction(states, net_.Forward(NetworkInput(states, ClipActions(actions))));
}

double DynamicsModel::Loss(std::span<const Transition> batch) const {
  return DynamicsLoss(*this, batch);
}

double DynamicsModel::LossAndGradient(std::span<const Transition> batch,
                                      Vec* grad) const {
  const BatchMatrices m = Stack(batch);
  Mlp::Cache cache;
  const Mat out =
      net_.Forward(NetworkInput(m.states, ClipActions(m.actions)), &cache);
  const LossAndGrad mse =
      MeanSquaredError(ComposePrediction(m.states, out), m.next_states);
  if (grad != nullptr) {
    const Mat out_grad = mse.output_grad.array().rowwise() *
                         normalizer_.target_std.transpose().array();
    *grad = net_.Backward(cache, out_grad);
  }
  return mse.loss;
}

TrainingReport DynamicsModel::Train(const TransitionDataset& dataset, int epochs,
                                    int batch_size, Rng& rng) {
  if (dataset.empty()) throw StateError("train_model: dataset is empty");
  if (batch_size < 1) throw ConfigError("train_model: batch_size must be >= 1");
  TrainingReport report;
  if (epochs <= 0) return report;

  const std::size_t n = dataset.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const auto n_held = static_cast<std::size_t>(
      std::floor(config_.held_out_fraction * static_cast<double>(n)));
  const std::size_t n_train = n - n_held;

  std::vector<Transition> train, held_out;
  train.reserve(n_train);
  held_out.reserve(n_held);
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_train ? train : held_out).push_back(dataset[order[i]]);
  }

  normalizer_ = config_.normalize
                    ? Normalizer::Fit(train, config_.mode == PredictionMode::kDelta)
                    : Normalizer::Identity(state_dim_, action_dim_);

  const std::size_t steps_per_epoch =
      (n + static_cast<std::size_t>(batch_size) - 1) / batch_size;
  std::vector<Transition> batch(static_cast<std::size_t>(batch_size));
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const Vec snapshot = net_.Parameters();
    const Adam adam_snapshot = adam_;
    double loss_sum = 0.0;
    try {
      for (std::size_t step = 0; step < steps_per_epoch; ++step) {
        for (auto& t : batch) t = train[rng.Index(train.size())];
        Vec grad;
        loss_sum += LossAndGradient(batch, &grad);
        Vec params = net_.Parameters();
        adam_.Step(params, grad);
        net_.SetParameters(params);
      }
    } catch (const NumericError&) {
      net_.SetParameters(snapshot);
      adam_ = adam_snapshot;
      report.aborted = true;
      break;
    }
    report.train_loss.push_back(loss_sum / static_cast<double>(steps_per_epoch));
    if (!held_out.empty()) report.held_out_loss.push_back(Loss(held_out));
  }
  return report;
}

nlohmann::json DynamicsModel::ToJson() const {
  return {{"state_dim", state_dim_},
          {"action_dim", action_dim_},
          {"action_low", VecToJson(action_low_)},
          {"action_high", VecToJson(action_high_)},
          {"mode", config_.mode == PredictionMode::kDelta ? "delta" : "absolute"},
          {"normalize", config_.normalize},
          {"epochs", config_.epochs},
          {"batch_size", config_.batch_size},
          {"held_out_fraction", config_.held_out_fraction},
          {"network", net_.ToJson()},
          {"normalizer", normalizer_.ToJson()},
          {"adam", adam_.ToJson()}};
}

DynamicsModel DynamicsModel::FromJson(const nlohmann::json& j) {
  DynamicsModel m;
  m.state_dim_ = j.at("state_dim").get<int>();
  m.action_dim_ = j.at("action_dim").get<int>();
  m.action_low_ = VecFromJson(j.at("action_low"));
  m.action_high_ = VecFromJson(j.at("action_high"));
  m.config_.mode = j.at("mode").get<std::string>() == "delta"
                       ? PredictionMode::kDelta
                       : PredictionMode::kAbsolute;
  m.config_.normalize = j.at("normalize").get<bool>();
  m.config_.epochs = j.at("epochs").get<int>();
  m.config_.batch_size = j.at("batch_size").get<int>();
  m.config_.held_out_fraction = j.at("held_out_fraction").get<double>();
  m.net_ = Mlp::FromJson(j.at("network"));
  m.config_.hidden_sizes = m.net_.hidden_sizes();
  m.normalizer_ = Normalizer::FromJson(j.at("normalizer"));
  m.adam_ = Adam::FromJson(j.at("adam"));
  m.config_.adam = m.adam_.config();
  return m;
}

double DynamicsLoss(const TransitionModel& model,
                    std::span<const Transition> batch) {
  if (batch.empty()) throw StateError("dynamics_loss: empty batch");
  const BatchMatrices m = Stack(batch);
  const Mat predicted = model.PredictBatch(m.states, m.actions);
  return (m.next_states - predicted).rowwise().squaredNorm().sum() /
         static_cast<double>(batch.size());
}

TrainingReport TrainModel(DynamicsModel& model, const TransitionDataset& dataset,
                          int epochs, int batch_size, Rng& rng) {
  return model.Train(dataset, epochs, batch_size, rng);
}

double HeldOutError(const TransitionModel& model,
                    std::span<const Transition> test_set) {
  if (test_set.empty()) throw StateError("held_out_error: empty test set");
  return DynamicsLoss(model, test_set);
}

}  // namespace mpcmfrl
