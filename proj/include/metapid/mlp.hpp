/**
 * @file mlp.hpp
 * @brief Small dense networks with flat parameter storage, and Adam.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "metapid/rng.hpp"

namespace metapid {

// Offsets of one dense layer inside a flat parameter vector.
// The weight block is stored column-major (rows = fan_out).
struct DenseSlot {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index weight = 0;
  Eigen::Index bias = 0;
};

using MatMap = Eigen::Map<Eigen::MatrixXd>;
using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

inline MatMap weight_of(Eigen::VectorXd& p, const DenseSlot& s) {
  return MatMap(p.data() + s.weight, s.rows, s.cols);
}
inline ConstMatMap weight_of(const Eigen::VectorXd& p, const DenseSlot& s) {
  return ConstMatMap(p.data() + s.weight, s.rows, s.cols);
}
inline VecMap bias_of(Eigen::VectorXd& p, const DenseSlot& s) {
  return VecMap(p.data() + s.bias, s.rows);
}
inline ConstVecMap bias_of(const Eigen::VectorXd& p, const DenseSlot& s) {
  return ConstVecMap(p.data() + s.bias, s.rows);
}

// Fills a layer with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) times `scale`,
// weights in row-major draw order, then biases.
void init_dense(Eigen::VectorXd& params, const DenseSlot& slot, Rng& rng, double scale = 1.0);

/**
 * Multi-layer perceptron: tanh on hidden layers, identity on the output.
 * Inputs are column-major batches (features x samples).
 */
class Mlp {
 public:
  Mlp() = default;
  // Zero-initialised network with the given layer widths (>= 2 entries).
  explicit Mlp(std::vector<Eigen::Index> sizes);
  // Fan-in uniform initialisation; the last layer is multiplied by `out_scale`.
  Mlp(std::vector<Eigen::Index> sizes, Rng& rng, double out_scale = 1.0);

  struct Cache {
    std::vector<Eigen::MatrixXd> activations;  // input, hidden..., output
  };

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache = nullptr) const;
  // Accumulates dLoss/dparams into `grad` (same layout as params());
  // returns dLoss/dinput.
  Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& d_out,
                           Eigen::VectorXd& grad) const;

  const std::vector<Eigen::Index>& sizes() const { return sizes_; }
  const std::vector<DenseSlot>& layers() const { return layers_; }
  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }
  Eigen::Index input_dim() const { return sizes_.front(); }
  Eigen::Index output_dim() const { return sizes_.back(); }

  bool operator==(const Mlp& other) const {
    return sizes_ == other.sizes_ && params_ == other.params_;
  }

 private:
  std::vector<Eigen::Index> sizes_;
  std::vector<DenseSlot> layers_;
  Eigen::VectorXd params_;
};

void to_json(nlohmann::json& j, const Mlp& net);
void from_json(const nlohmann::json& j, Mlp& net);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // coupled: added to the gradient
};

class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index n_params, AdamConfig cfg);

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  Eigen::VectorXd m_, v_;
  std::size_t t_ = 0;
};

// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
// norm after clipping.
double clip_grad_norm(Eigen::VectorXd& grad, double max_norm);

// Row-major flattening helpers for checkpoints.
std::vector<double> to_row_major(const Eigen::Ref<const Eigen::MatrixXd>& m);
void from_row_major(const std::vector<double>& v, Eigen::Ref<Eigen::MatrixXd> m);

}  // namespace metapid
