#include "metapid/mlp.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "metapid/errors.hpp"

namespace metapid {
namespace {

std::vector<DenseSlot> plan_layers(const std::vector<Eigen::Index>& sizes, Eigen::Index& total) {
  if (sizes.size() < 2) throw ConfigError("Mlp needs at least an input and an output width");
  std::vector<DenseSlot> layers;
  total = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    if (sizes[l] <= 0 || sizes[l + 1] <= 0) throw ConfigError("Mlp layer widths must be positive");
    DenseSlot s;
    s.rows = sizes[l + 1];
    s.cols = sizes[l];
    s.weight = total;
    total += s.rows * s.cols;
    s.bias = total;
    total += s.rows;
    layers.push_back(s);
  }
  return layers;
}

}  // namespace

void init_dense(Eigen::VectorXd& params, const DenseSlot& slot, Rng& rng, double scale) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(slot.cols));
  MatMap w = weight_of(params, slot);
  for (Eigen::Index r = 0; r < slot.rows; ++r) {
    for (Eigen::Index c = 0; c < slot.cols; ++c) w(r, c) = scale * rng.uniform(-bound, bound);
  }
  VecMap b = bias_of(params, slot);
  for (Eigen::Index r = 0; r < slot.rows; ++r) b(r) = scale * rng.uniform(-bound, bound);
}

Mlp::Mlp(std::vector<Eigen::Index> sizes) : sizes_(std::move(sizes)) {
  Eigen::Index total = 0;
  layers_ = plan_layers(sizes_, total);
  params_ = Eigen::VectorXd::Zero(total);
}

Mlp::Mlp(std::vector<Eigen::Index> sizes, Rng& rng, double out_scale) : Mlp(std::move(sizes)) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    init_dense(params_, layers_[l], rng, l + 1 == layers_.size() ? out_scale : 1.0);
  }
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Cache* cache) const {
  if (x.rows() != input_dim()) throw ShapeError("Mlp::forward: input has wrong width");
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(x);
  }
  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd z = weight_of(params_, layers_[l]) * h;
    z.colwise() += bias_of(params_, layers_[l]);
    if (l + 1 < layers_.size()) z = z.array().tanh().matrix();
    h = std::move(z);
    if (cache) cache->activations.push_back(h);
  }
  return h;
}

Eigen::MatrixXd Mlp::backward(const Cache& cache, const Eigen::MatrixXd& d_out,
                              Eigen::VectorXd& grad) const {
  if (cache.activations.size() != layers_.size() + 1) {
    throw ContractError("Mlp::backward: cache does not match this network");
  }
  if (grad.size() != params_.size()) grad = Eigen::VectorXd::Zero(params_.size());
  Eigen::MatrixXd delta = d_out;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    if (l + 1 < layers_.size()) {
      const auto& a = cache.activations[l + 1].array();
      delta = (delta.array() * (1.0 - a * a)).matrix();
    }
    const Eigen::MatrixXd& input = cache.activations[l];
    weight_of(grad, layers_[l]).noalias() += delta * input.transpose();
    bias_of(grad, layers_[l]) += delta.rowwise().sum();
    delta = weight_of(params_, layers_[l]).transpose() * delta;
  }
  return delta;
}

void to_json(nlohmann::json& j, const Mlp& net) {
  j = nlohmann::json::object();
  j["sizes"] = net.sizes();
  auto layers = nlohmann::json::array();
  for (const auto& s : net.layers()) {
    const Eigen::VectorXd b = bias_of(net.params(), s);
    layers.push_back({{"weight", to_row_major(weight_of(net.params(), s))},
                      {"bias", std::vector<double>(b.data(), b.data() + b.size())}});
  }
  j["layers"] = std::move(layers);
}

void from_json(const nlohmann::json& j, Mlp& net) {
  Mlp out(j.at("sizes").get<std::vector<Eigen::Index>>());
  const auto& layers = j.at("layers");
  if (!layers.is_array() || layers.size() != out.layers().size()) {
    throw ShapeError("Mlp: layer count does not match sizes");
  }
  for (std::size_t l = 0; l < out.layers().size(); ++l) {
    const auto& s = out.layers()[l];
    MatMap w = weight_of(out.params(), s);
    from_row_major(layers[l].at("weight").get<std::vector<double>>(), w);
    const auto bias = layers[l].at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(bias.size()) != s.rows) throw ShapeError("Mlp: bias has wrong length");
    bias_of(out.params(), s) = ConstVecMap(bias.data(), s.rows);
  }
  net = std::move(out);
}

Adam::Adam(Eigen::Index n_params, AdamConfig cfg)
    : cfg_(cfg), m_(Eigen::VectorXd::Zero(n_params)), v_(Eigen::VectorXd::Zero(n_params)) {
  if (!(cfg.lr > 0) || !(cfg.eps > 0) || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 ||
      cfg.beta2 >= 1 || cfg.weight_decay < 0) {
    throw ConfigError("Adam: invalid hyperparameters");
  }
}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw ShapeError("Adam::step: parameter count changed");
  }
  ++t_;
  Eigen::VectorXd g = grad;
  if (cfg_.weight_decay > 0) g += cfg_.weight_decay * params;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * g;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  params.array() -= cfg_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
}

double clip_grad_norm(Eigen::VectorXd& grad, double max_norm) {
  const double norm = grad.norm();
  if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient");
  if (norm > max_norm) {
    grad *= max_norm / (norm + 1e-6);
    return grad.norm();
  }
  return norm;
}

std::vector<double> to_row_major(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
  }
  return v;
}

void from_row_major(const std::vector<double>& v, Eigen::Ref<Eigen::MatrixXd> m) {
  if (static_cast<Eigen::Index>(v.size()) != m.size()) {
    throw ShapeError("weight array has " + std::to_string(v.size()) + " entries, expected " +
                     std::to_string(m.size()));
  }
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = v[k++];
  }
}

}  // namespace metapid
