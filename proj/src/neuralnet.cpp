#include "mpcmfrl/neuralnet.hpp"

#include <cmath>
#include <numbers>

#include "mpcmfrl/errors.hpp"

namespace mpcmfrl {

Mlp::Mlp(int input_dim, std::vector<int> hidden_sizes, int output_dim)
    : input_dim_(input_dim),
      output_dim_(output_dim),
      hidden_sizes_(std::move(hidden_sizes)) {
  if (input_dim_ < 1 || output_dim_ < 1) {
    throw ShapeError("mlp dimensions must be positive");
  }
  const std::vector<int> sizes = LayerSizes();
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    if (sizes[i + 1] < 1) throw ShapeError("mlp layer sizes must be positive");
    layers_.push_back({Mat::Zero(sizes[i + 1], sizes[i]),
                       Vec::Zero(sizes[i + 1])});
  }
}

Mlp Mlp::Random(int input_dim, std::vector<int> hidden_sizes, int output_dim,
                Rng& rng, double gain, double output_scale) {
  Mlp net(input_dim, std::move(hidden_sizes), output_dim);
  for (std::size_t l = 0; l < net.layers_.size(); ++l) {
    DenseLayer& layer = net.layers_[l];
    double bound = gain / std::sqrt(static_cast<double>(layer.weight.cols()));
    if (l + 1 == net.layers_.size()) bound *= output_scale;
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        layer.weight(r, c) = rng.Uniform(-bound, bound);
      }
    }
  }
  return net;
}

std::vector<int> Mlp::LayerSizes() const {
  std::vector<int> sizes{input_dim_};
  sizes.insert(sizes.end(), hidden_sizes_.begin(), hidden_sizes_.end());
  sizes.push_back(output_dim_);
  return sizes;
}

void Mlp::CheckInput(const Mat& input) const {
  if (layers_.empty()) throw StateError("mlp has no layers");
  if (input.cols() != input_dim_) {
    throw ShapeError("mlp input width " + std::to_string(input.cols()) +
                     " != " + std::to_string(input_dim_));
  }
}

namespace {

// Vectorizes (Eigen's double tanh does not); absolute error <= 2.3e-16.
Mat Tanh(const Mat& z) {
  const Eigen::ArrayXXd e = (-2.0 * z.array().abs()).exp();
  return ((1.0 - e) / (1.0 + e)) * z.array().sign();
}

}  // namespace

Mat Mlp::Forward(const Mat& input) const { return Forward(input, nullptr); }

Mat Mlp::Forward(const Mat& input, Cache* cache) const {
  CheckInput(input);
  if (cache != nullptr) {
    cache->activations.clear();
    cache->activations.push_back(input);
  }
  Mat x = input;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const DenseLayer& layer = layers_[l];
    Mat z = x * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    if (l + 1 < layers_.size()) z = Tanh(z);
    x = std::move(z);
    if (cache != nullptr) cache->activations.push_back(x);
  }
  return x;
}

Vec Mlp::Backward(const Cache& cache, const Mat& output_grad) const {
  if (cache.activations.size() != layers_.size() + 1) {
    throw ShapeError("backward: cache does not match network");
  }
  const Mat& output = cache.activations.back();
  if (output_grad.rows() != output.rows() ||
      output_grad.cols() != output.cols()) {
    throw ShapeError("backward: output gradient shape mismatch");
  }
  Vec grad(NumParameters());
  // Offsets of each layer's block in the flat vector.
  std::vector<Eigen::Index> offsets(layers_.size());
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    offsets[l] = offset;
    offset += layers_[l].weight.size() + layers_[l].bias.size();
  }

  Mat delta = output_grad;  // gradient wrt pre-activation of layer l
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const DenseLayer& layer = layers_[li];
    const Mat& input = cache.activations[li];
    const Mat weight_grad = delta.transpose() * input;  // out x in
    const Eigen::Index rows = layer.weight.rows(), cols = layer.weight.cols();
    for (Eigen::Index r = 0; r < rows; ++r) {
      grad.segment(offsets[li] + r * cols, cols) = weight_grad.row(r).transpose();
    }
    grad.segment(offsets[li] + rows * cols, rows) =
        delta.colwise().sum().transpose();
    if (li > 0) {
      Mat upstream = delta * layer.weight;
      delta = upstream.array() * (1.0 - input.array().square());
    }
  }
  return grad;
}

Mat Mlp::JacobianVectorProduct(const Mat& input, const Vec& direction) const {
  CheckInput(input);
  if (direction.size() != NumParameters()) {
    throw ShapeError("jvp: direction size mismatch");
  }
  Mat x = input;
  Mat dx = Mat::Zero(input.rows(), input.cols());
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const DenseLayer& layer = layers_[l];
    const Eigen::Index rows = layer.weight.rows(), cols = layer.weight.cols();
    Mat dw(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      dw.row(r) = direction.segment(offset + r * cols, cols).transpose();
    }
    const Vec db = direction.segment(offset + rows * cols, rows);
    offset += rows * cols + rows;

    Mat z = x * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    Mat dz = dx * layer.weight.transpose() + x * dw.transpose();
    dz.rowwise() += db.transpose();
    if (l + 1 < layers_.size()) {
      z = Tanh(z);
      dz = dz.array() * (1.0 - z.array().square());
    }
    x = std::move(z);
    dx = std::move(dz);
  }
  return dx;
}

int Mlp::NumParameters() const {
  Eigen::Index n = 0;
  for (const auto& layer : layers_) n += layer.weight.size() + layer.bias.size();
  return static_cast<int>(n);
}

Vec Mlp::Parameters() const {
  Vec flat(NumParameters());
  Eigen::Index offset = 0;
  for (const auto& layer : layers_) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      flat.segment(offset, layer.weight.cols()) = layer.weight.row(r).transpose();
      offset += layer.weight.cols();
    }
    flat.segment(offset, layer.bias.size()) = layer.bias;
    offset += layer.bias.size();
  }
  return flat;
}

void Mlp::SetParameters(const Vec& flat) {
  if (flat.size() != NumParameters()) {
    throw ShapeError("SetParameters: expected " +
                     std::to_string(NumParameters()) + " values, got " +
                     std::to_string(flat.size()));
  }
  Eigen::Index offset = 0;
  for (auto& layer : layers_) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      layer.weight.row(r) = flat.segment(offset, layer.weight.cols()).transpose();
      offset += layer.weight.cols();
    }
    layer.bias = flat.segment(offset, layer.bias.size());
    offset += layer.bias.size();
  }
}

nlohmann::json Mlp::ToJson() const {
  return {{"layer_sizes", LayerSizes()}, {"values", VecToJson(Parameters())}};
}

Mlp Mlp::FromJson(const nlohmann::json& j) {
  const auto sizes = j.at("layer_sizes").get<std::vector<int>>();
  if (sizes.size() < 2) throw ShapeError("checkpoint needs >= 2 layer sizes");
  std::vector<int> hidden(sizes.begin() + 1, sizes.end() - 1);
  Mlp net(sizes.front(), hidden, sizes.back());
  net.SetParameters(VecFromJson(j.at("values")));
  return net;
}

// -- heads -- //

LossAndGrad MeanSquaredError(const Mat& prediction, const Mat& target) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols()) {
    throw ShapeError("mse: prediction/target shape mismatch");
  }
  if (prediction.rows() == 0) throw StateError("mse: empty batch");
  const double n = static_cast<double>(prediction.rows());
  const Mat diff = prediction - target;
  return {diff.squaredNorm() / n, (2.0 / n) * diff};
}

Vec GaussianLogDensity(const Mat& mean, const Vec& log_std, const Mat& actions) {
  if (mean.rows() != actions.rows() || mean.cols() != actions.cols() ||
      mean.cols() != log_std.size()) {
    throw ShapeError("gaussian: shape mismatch");
  }
  const double d = static_cast<double>(log_std.size());
  const Eigen::RowVectorXd inv_std = (-log_std).array().exp().transpose();
  const Mat z = (actions - mean).array().rowwise() * inv_std.array();
  return -0.5 * z.rowwise().squaredNorm().array() - log_std.sum() -
         0.5 * d * std::log(2.0 * std::numbers::pi);
}

GaussianNllResult GaussianNegLogLikelihood(const Mat& mean, const Vec& log_std,
                                           const Mat& actions) {
  const Vec log_density = GaussianLogDensity(mean, log_std, actions);
  const double n = static_cast<double>(mean.rows());
  if (n == 0) throw StateError("gaussian nll: empty batch");
  const Eigen::RowVectorXd inv_var = (-2.0 * log_std).array().exp().transpose();
  const Mat diff = actions - mean;
  GaussianNllResult out;
  out.loss = -log_density.mean();
  out.mean_grad = -(diff.array().rowwise() * inv_var.array()) / n;
  const Mat z2 = diff.array().square().rowwise() * inv_var.array();
  out.log_std_grad = (1.0 - z2.array()).colwise().sum().transpose() / n;
  return out;
}

// -- Adam -- //

Adam::Adam(int num_parameters, AdamConfig config)
    : config_(config),
      m_(Vec::Zero(num_parameters)),
      v_(Vec::Zero(num_parameters)) {}

void Adam::Step(Vec& parameters, const Vec& gradient) {
  if (gradient.size() != m_.size() || parameters.size() != m_.size()) {
    throw ShapeError("adam: gradient/parameter size mismatch");
  }
  if (!gradient.allFinite()) {
    throw NumericError("adam: non-finite gradient, update rejected");
  }
  const long t = step_ + 1;
  const Vec m = config_.beta1 * m_ + (1.0 - config_.beta1) * gradient;
  const Vec v = config_.beta2 * v_ +
                (1.0 - config_.beta2) * gradient.cwiseProduct(gradient);
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
  const Vec update = config_.learning_rate * (m / c1).array() /
                     ((v / c2).array().sqrt() + config_.epsilon);
  const Vec next = parameters - update;
  if (!next.allFinite()) {
    throw NumericError("adam: non-finite parameters, update rejected");
  }
  parameters = next;
  m_ = m;
  v_ = v;
  step_ = t;
}

nlohmann::json Adam::ToJson() const {
  return {{"learning_rate", config_.learning_rate},
          {"beta1", config_.beta1},
          {"beta2", config_.beta2},
          {"epsilon", config_.epsilon},
          {"step", step_},
          {"m", VecToJson(m_)},
          {"v", VecToJson(v_)}};
}

Adam Adam::FromJson(const nlohmann::json& j) {
  AdamConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  Adam adam(0, c);
  adam.m_ = VecFromJson(j.at("m"));
  adam.v_ = VecFromJson(j.at("v"));
  adam.step_ = j.at("step").get<long>();
  return adam;
}

nlohmann::json VecToJson(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Vec VecFromJson(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(values.data(),
                               static_cast<Eigen::Index>(values.size()));
}

}  // namespace mpcmfrl
