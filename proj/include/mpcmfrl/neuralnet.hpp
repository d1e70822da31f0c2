#ifndef MPCMFRL_NEURALNET_HPP_
#define MPCMFRL_NEURALNET_HPP_

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mpcmfrl/rng.hpp"
#include "mpcmfrl/types.hpp"

namespace mpcmfrl {

struct DenseLayer {
  Mat weight;  // output_dim x input_dim
  Vec bias;    // output_dim
};

// Fully connected network: tanh on hidden layers, identity on the output.
// Batches are passed one sample per row.
//
// Parameters have a fixed flat order used by the optimizers and the
// checkpoint format: for each layer, the weight matrix in row-major order
// followed by the bias vector.
class Mlp {
 public:
  // Per-layer activations of one forward pass; activations[0] is the input
  // and activations.back() the output.
  struct Cache {
    std::vector<Mat> activations;
  };

  Mlp() = default;
  // All-zero parameters.
  Mlp(int input_dim, std::vector<int> hidden_sizes, int output_dim);

  // Fan-in uniform init U(-g/sqrt(fan_in), g/sqrt(fan_in)) with g = gain on
  // every layer, the output layer additionally multiplied by output_scale.
  // Biases start at zero.
  static Mlp Random(int input_dim, std::vector<int> hidden_sizes,
                    int output_dim, Rng& rng, double gain = 1.0,
                    double output_scale = 1.0);

  int input_dim() const { return input_dim_; }
  int output_dim() const { return output_dim_; }
  const std::vector<int>& hidden_sizes() const { return hidden_sizes_; }
  std::vector<int> LayerSizes() const;

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  Mat Forward(const Mat& input) const;
  Mat Forward(const Mat& input, Cache* cache) const;

  // Gradient of sum_ij output_grad(i, j) * output(i, j) with respect to the
  // flat parameter vector, using the activations of a cached forward pass.
  Vec Backward(const Cache& cache, const Mat& output_grad) const;

  // Directional derivative of the outputs along a flat parameter direction.
  Mat JacobianVectorProduct(const Mat& input, const Vec& direction) const;

  int NumParameters() const;
  Vec Parameters() const;
  void SetParameters(const Vec& flat);

  nlohmann::json ToJson() const;
  static Mlp FromJson(const nlohmann::json& j);

 private:
  void CheckInput(const Mat& input) const;

  int input_dim_ = 0;
  int output_dim_ = 0;
  std::vector<int> hidden_sizes_;
  std::vector<DenseLayer> layers_;
};

// -- loss heads -- //

struct LossAndGrad {
  double loss = 0.0;
  Mat output_grad;
};

// (1/n) sum_i ||prediction_i - target_i||^2
LossAndGrad MeanSquaredError(const Mat& prediction, const Mat& target);

struct GaussianNllResult {
  double loss = 0.0;
  Mat mean_grad;    // n x d
  Vec log_std_grad;  // d
};

// Mean negative log-likelihood of `actions` under N(mean_i, diag(exp(log_std))^2).
GaussianNllResult GaussianNegLogLikelihood(const Mat& mean, const Vec& log_std,
                                           const Mat& actions);

// Per-row diagonal Gaussian log density.
Vec GaussianLogDensity(const Mat& mean, const Vec& log_std, const Mat& actions);

// -- optimizer -- //

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(int num_parameters, AdamConfig config);

  // Bias-corrected Adam update. A non-finite gradient or result throws
  // NumericError and leaves parameters and moments untouched.
  void Step(Vec& parameters, const Vec& gradient);

  const AdamConfig& config() const { return config_; }
  long step_count() const { return step_; }
  const Vec& first_moment() const { return m_; }
  const Vec& second_moment() const { return v_; }

  nlohmann::json ToJson() const;
  static Adam FromJson(const nlohmann::json& j);

 private:
  AdamConfig config_;
  Vec m_;
  Vec v_;
  long step_ = 0;
};

nlohmann::json VecToJson(const Vec& v);
Vec VecFromJson(const nlohmann::json& j);

}  // namespace mpcmfrl

#endif  // MPCMFRL_NEURALNET_HPP_
