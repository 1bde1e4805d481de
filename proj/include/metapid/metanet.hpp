/**
 * @file metanet.hpp
 * @brief Meta-learning gain predictor: physical features -> normalized PID gains.
 *
 * Architecture (per sample, x the z-scored 10-vector):
 *
 *   h1 = ReLU(LN(W1 x + b1))          10 -> 256
 *   h2 = ReLU(LN(W2 h1 + b2))        256 -> 256
 *   h  = ReLU(W3 h2 + b3)            256 -> 128
 *   Kp, Ki, Kd = sigmoid(W_k h + b_k) 128 -> n, one head each
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "metapid/augment.hpp"
#include "metapid/mlp.hpp"
#include "metapid/pid.hpp"
#include "metapid/plant.hpp"

namespace metapid {

inline constexpr int kMetanetSchemaVersion = 1;

// Gains mapped to [0, 1] by their bounds.
struct NormalizedGains {
  std::vector<double> kp;
  std::vector<double> ki;
  std::vector<double> kd;

  bool operator==(const NormalizedGains&) const = default;
};

class MetaNetwork {
 public:
  static constexpr Eigen::Index kHidden1 = 256;
  static constexpr Eigen::Index kHidden2 = 256;
  static constexpr Eigen::Index kHidden3 = 128;
  static constexpr double kLayerNormEps = 1e-5;

  MetaNetwork() = default;
  // All weights and biases zero, LayerNorm gamma = 1, identity feature stats.
  explicit MetaNetwork(std::size_t n_joints, GainLimits limits = {});

  std::size_t n_joints() const { return n_joints_; }
  const GainLimits& limits() const { return limits_; }

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }
  static std::size_t parameter_count(std::size_t n_joints);

  // Layout of the flat parameter vector.
  struct Layout {
    DenseSlot l1, l2, l3, kp, ki, kd;
    Eigen::Index ln1_gamma = 0, ln1_beta = 0, ln2_gamma = 0, ln2_beta = 0;
  };
  const Layout& layout() const { return layout_; }

  Eigen::VectorXd feature_mean = Eigen::VectorXd::Zero(kFeatureDim);
  Eigen::VectorXd feature_std = Eigen::VectorXd::Ones(kFeatureDim);

  bool operator==(const MetaNetwork& o) const {
    return n_joints_ == o.n_joints_ && limits_ == o.limits_ && params_ == o.params_ &&
           feature_mean == o.feature_mean && feature_std == o.feature_std;
  }

 private:
  std::size_t n_joints_ = 0;
  GainLimits limits_;
  Layout layout_;
  Eigen::VectorXd params_;
};

// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); LayerNorm
// gamma = 1, beta = 0.
MetaNetwork init_network(std::size_t n_joints, std::uint64_t seed, GainLimits limits = {});

NormalizedGains forward(const MetaNetwork& net, const FeatureVector& features);

// g = lower + v (upper - lower). Throws ContractError for v outside [0, 1].
PIDGains denormalize(const NormalizedGains& norm, const GainLimits& limits);
// Inverse of denormalize, clamped to [0, 1].
NormalizedGains normalize(const PIDGains& gains, const GainLimits& limits);

PIDGains predict_gains(const MetaNetwork& net, const RobotModel& robot);

/**
 * Training batch in column layout: raw features (10 x N), bound-normalized
 * targets stacked [Kp; Ki; Kd] (3n x N) and one weight per sample.
 */
struct Batch {
  Eigen::MatrixXd features;
  Eigen::MatrixXd targets;
  Eigen::VectorXd weights;
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices,
                 std::span<const double> weights, const GainLimits& limits);

// (1/N) Σ_v w_v ‖target_v - pred_v‖², columns are samples.
double weighted_mse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                    const Eigen::VectorXd& weights);

// Stacked [Kp; Ki; Kd] predictions for a batch of raw features.
Eigen::MatrixXd predict_batch(const MetaNetwork& net, const Eigen::MatrixXd& features);

double batch_loss(const MetaNetwork& net, const Batch& batch);

// Analytic gradient of batch_loss with respect to net.params().
Eigen::VectorXd backward(const MetaNetwork& net, const Batch& batch, double* loss = nullptr);

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 500;
  std::size_t early_stop_patience = 50;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> train_loss;  // full train split, after each epoch
  std::vector<double> val_loss;
  std::size_t best_epoch = 0;      // 0-based
  double best_val_loss = 0.0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;

  bool operator==(const TrainHistory&) const = default;
};

struct TrainResult {
  MetaNetwork net;
  TrainHistory history;
};

// Called after each epoch with (epoch, train loss, val loss).
using EpochFn = std::function<void(std::size_t, double, double)>;

/**
 * Adam training on the weighted MSE. The split holds out
 * floor(N * val_fraction) samples; when that is zero the train loss is
 * monitored instead. Training stops once `early_stop_patience` epochs pass
 * without improvement and returns the best snapshot.
 */
TrainResult train(MetaNetwork net, const Dataset& data, const TrainConfig& cfg,
                  const EpochFn& on_epoch = {});

void save_metanet(const MetaNetwork& net, const std::string& path);
MetaNetwork load_metanet(const std::string& path);

void to_json(nlohmann::json& j, const MetaNetwork& net);
void from_json(const nlohmann::json& j, MetaNetwork& net);

}  // namespace metapid
