#include "metapid/metanet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "metapid/errors.hpp"

namespace metapid {
namespace {

constexpr std::uint64_t kTagSplit = 0x5101;
constexpr std::uint64_t kTagEpoch = 0x5102;
constexpr double kStdFloor = 1e-8;

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

DenseSlot slot_at(Index& offset, Index rows, Index cols) {
  DenseSlot s{rows, cols, offset, offset + rows * cols};
  offset += rows * cols + rows;
  return s;
}

struct LayerNormCache {
  MatrixXd xhat;
  Eigen::RowVectorXd inv_std;
  MatrixXd y;  // after affine, before ReLU
};

MatrixXd layer_norm(const MatrixXd& z, ConstVecMap gamma, ConstVecMap beta, LayerNormCache& c) {
  const double width = static_cast<double>(z.rows());
  const Eigen::RowVectorXd mean = z.colwise().sum() / width;
  MatrixXd centered = z.rowwise() - mean;
  const Eigen::RowVectorXd var = centered.array().square().colwise().sum() / width;
  c.inv_std = (var.array() + MetaNetwork::kLayerNormEps).rsqrt();
  c.xhat = centered.array().rowwise() * c.inv_std.array();
  c.y = (c.xhat.array().colwise() * gamma.array()).colwise() + beta.array();
  return c.y.cwiseMax(0.0);
}

MatrixXd layer_norm_backward(const MatrixXd& dy, ConstVecMap gamma, const LayerNormCache& c,
                             VecMap dgamma, VecMap dbeta) {
  dgamma += (dy.array() * c.xhat.array()).rowwise().sum().matrix();
  dbeta += dy.rowwise().sum();
  const MatrixXd dxhat = dy.array().colwise() * gamma.array();
  const double width = static_cast<double>(dy.rows());
  const Eigen::RowVectorXd mean_dxhat = dxhat.colwise().sum() / width;
  const Eigen::RowVectorXd mean_dxhat_xhat =
      (dxhat.array() * c.xhat.array()).colwise().sum().matrix() / width;
  MatrixXd dz = dxhat.rowwise() - mean_dxhat;
  dz -= (c.xhat.array().rowwise() * mean_dxhat_xhat.array()).matrix();
  return dz.array().rowwise() * c.inv_std.array();
}

MatrixXd sigmoid(const MatrixXd& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

struct ForwardCache {
  MatrixXd x;
  LayerNormCache ln1, ln2;
  MatrixXd a1, a2, a3;
  MatrixXd out;  // [Kp; Ki; Kd]
};

void run_forward(const MetaNetwork& net, const MatrixXd& features, ForwardCache& c) {
  if (features.rows() != static_cast<Index>(kFeatureDim)) {
    throw ShapeError("metanet: features must have 10 rows");
  }
  const auto& L = net.layout();
  const auto& p = net.params();
  const Index h1 = MetaNetwork::kHidden1, h2 = MetaNetwork::kHidden2;
  c.x = (features.colwise() - net.feature_mean).array().colwise() / net.feature_std.array();

  MatrixXd z = weight_of(p, L.l1) * c.x;
  z.colwise() += bias_of(p, L.l1);
  c.a1 = layer_norm(z, ConstVecMap(p.data() + L.ln1_gamma, h1), ConstVecMap(p.data() + L.ln1_beta, h1),
                    c.ln1);
  z = weight_of(p, L.l2) * c.a1;
  z.colwise() += bias_of(p, L.l2);
  c.a2 = layer_norm(z, ConstVecMap(p.data() + L.ln2_gamma, h2), ConstVecMap(p.data() + L.ln2_beta, h2),
                    c.ln2);
  z = weight_of(p, L.l3) * c.a2;
  z.colwise() += bias_of(p, L.l3);
  c.a3 = z.cwiseMax(0.0);

  const Index n = static_cast<Index>(net.n_joints());
  c.out.resize(3 * n, features.cols());
  const DenseSlot* heads[3] = {&L.kp, &L.ki, &L.kd};
  for (int k = 0; k < 3; ++k) {
    MatrixXd zk = weight_of(p, *heads[k]) * c.a3;
    zk.colwise() += bias_of(p, *heads[k]);
    c.out.middleRows(k * n, n) = sigmoid(zk);
  }
}

void check_unit(const std::vector<double>& v, const char* name) {
  for (double x : v) {
    if (!(x >= 0.0 && x <= 1.0)) {
      throw ContractError(std::string("denormalize: ") + name + " value outside [0, 1]");
    }
  }
}

std::vector<double> scale(const std::vector<double>& v, double lo, double hi) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (1.0 - v[i]) * lo + v[i] * hi;
  return out;
}

std::vector<double> unscale(const std::vector<double>& g, double lo, double hi) {
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    out[i] = hi > lo ? std::clamp((g[i] - lo) / (hi - lo), 0.0, 1.0) : 0.0;
  }
  return out;
}

struct NamedTensor {
  const char* name;
  Index offset;
  Index rows;
  Index cols;
};

std::vector<NamedTensor> named_tensors(const MetaNetwork& net) {
  const auto& L = net.layout();
  auto dense = [](std::vector<NamedTensor>& out, const char* w, const char* b, const DenseSlot& s) {
    out.push_back({w, s.weight, s.rows, s.cols});
    out.push_back({b, s.bias, s.rows, 1});
  };
  std::vector<NamedTensor> t;
  dense(t, "W1", "b1", L.l1);
  t.push_back({"ln1_gamma", L.ln1_gamma, MetaNetwork::kHidden1, 1});
  t.push_back({"ln1_beta", L.ln1_beta, MetaNetwork::kHidden1, 1});
  dense(t, "W2", "b2", L.l2);
  t.push_back({"ln2_gamma", L.ln2_gamma, MetaNetwork::kHidden2, 1});
  t.push_back({"ln2_beta", L.ln2_beta, MetaNetwork::kHidden2, 1});
  dense(t, "W3", "b3", L.l3);
  dense(t, "W_kp", "b_kp", L.kp);
  dense(t, "W_ki", "b_ki", L.ki);
  dense(t, "W_kd", "b_kd", L.kd);
  return t;
}

}  // namespace

MetaNetwork::MetaNetwork(std::size_t n_joints, GainLimits limits)
    : n_joints_(n_joints), limits_(limits) {
  if (n_joints < 1 || n_joints > kMaxJoints) throw ContractError("MetaNetwork: n_joints must be 1..12");
  limits_.validate();
  const Index n = static_cast<Index>(n_joints);
  Index off = 0;
  layout_.l1 = slot_at(off, kHidden1, kFeatureDim);
  layout_.ln1_gamma = off;
  layout_.ln1_beta = off + kHidden1;
  off += 2 * kHidden1;
  layout_.l2 = slot_at(off, kHidden2, kHidden1);
  layout_.ln2_gamma = off;
  layout_.ln2_beta = off + kHidden2;
  off += 2 * kHidden2;
  layout_.l3 = slot_at(off, kHidden3, kHidden2);
  layout_.kp = slot_at(off, n, kHidden3);
  layout_.ki = slot_at(off, n, kHidden3);
  layout_.kd = slot_at(off, n, kHidden3);
  params_ = VectorXd::Zero(off);
  params_.segment(layout_.ln1_gamma, kHidden1).setOnes();
  params_.segment(layout_.ln2_gamma, kHidden2).setOnes();
}

std::size_t MetaNetwork::parameter_count(std::size_t n) {
  const std::size_t h1 = kHidden1, h2 = kHidden2, h3 = kHidden3;
  return (kFeatureDim * h1 + h1) + 2 * h1 + (h1 * h2 + h2) + 2 * h2 + (h2 * h3 + h3) +
         3 * (h3 * n + n);
}

MetaNetwork init_network(std::size_t n_joints, std::uint64_t seed, GainLimits limits) {
  MetaNetwork net(n_joints, limits);
  Rng rng(seed);
  const auto& L = net.layout();
  for (const DenseSlot* s : {&L.l1, &L.l2, &L.l3, &L.kp, &L.ki, &L.kd}) init_dense(net.params(), *s, rng);
  return net;
}

NormalizedGains forward(const MetaNetwork& net, const FeatureVector& features) {
  ForwardCache c;
  run_forward(net, Eigen::Map<const VectorXd>(features.data(), kFeatureDim), c);
  const Index n = static_cast<Index>(net.n_joints());
  NormalizedGains out;
  out.kp.assign(c.out.data(), c.out.data() + n);
  out.ki.assign(c.out.data() + n, c.out.data() + 2 * n);
  out.kd.assign(c.out.data() + 2 * n, c.out.data() + 3 * n);
  return out;
}

PIDGains denormalize(const NormalizedGains& v, const GainLimits& l) {
  if (v.kp.size() != v.ki.size() || v.kp.size() != v.kd.size()) {
    throw ShapeError("denormalize: head lengths differ");
  }
  check_unit(v.kp, "Kp");
  check_unit(v.ki, "Ki");
  check_unit(v.kd, "Kd");
  PIDGains g;
  g.kp = scale(v.kp, l.kp_min, l.kp_max);
  g.ki = scale(v.ki, l.ki_min, l.ki_max);
  g.kd = scale(v.kd, l.kd_min, l.kd_max);
  return g;
}

NormalizedGains normalize(const PIDGains& g, const GainLimits& l) {
  return {unscale(g.kp, l.kp_min, l.kp_max), unscale(g.ki, l.ki_min, l.ki_max),
          unscale(g.kd, l.kd_min, l.kd_max)};
}

PIDGains predict_gains(const MetaNetwork& net, const RobotModel& robot) {
  if (robot.n_joints() != net.n_joints()) {
    throw ShapeError("predict_gains: network was trained for " + std::to_string(net.n_joints()) +
                     " joints, robot has " + std::to_string(robot.n_joints()));
  }
  return denormalize(forward(net, extract_features(robot)), net.limits());
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices,
                 std::span<const double> weights, const GainLimits& limits) {
  if (indices.empty()) return {};
  const Index n = static_cast<Index>(data.samples.at(indices[0]).gains.n_joints());
  Batch b;
  b.features.resize(kFeatureDim, static_cast<Index>(indices.size()));
  b.targets.resize(3 * n, static_cast<Index>(indices.size()));
  b.weights.resize(static_cast<Index>(indices.size()));
  for (std::size_t c = 0; c < indices.size(); ++c) {
    const auto& s = data.samples.at(indices[c]);
    const Index col = static_cast<Index>(c);
    if (static_cast<Index>(s.gains.n_joints()) != n) throw DataError("samples differ in n_joints");
    for (std::size_t k = 0; k < kFeatureDim; ++k) b.features(static_cast<Index>(k), col) = s.features[k];
    const NormalizedGains t = normalize(s.gains, limits);
    for (Index i = 0; i < n; ++i) {
      b.targets(i, col) = t.kp[i];
      b.targets(n + i, col) = t.ki[i];
      b.targets(2 * n + i, col) = t.kd[i];
    }
    b.weights(col) = weights.empty() ? 1.0 : weights[indices[c]];
  }
  return b;
}

double weighted_mse(const MatrixXd& pred, const MatrixXd& target, const VectorXd& weights) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || weights.size() != pred.cols()) {
    throw ShapeError("weighted_mse: shapes differ");
  }
  if (pred.cols() == 0) return 0.0;
  const VectorXd sq = (target - pred).colwise().squaredNorm().transpose();
  return weights.dot(sq) / static_cast<double>(pred.cols());
}

MatrixXd predict_batch(const MetaNetwork& net, const MatrixXd& features) {
  ForwardCache c;
  run_forward(net, features, c);
  return c.out;
}

double batch_loss(const MetaNetwork& net, const Batch& batch) {
  return weighted_mse(predict_batch(net, batch.features), batch.targets, batch.weights);
}

VectorXd backward(const MetaNetwork& net, const Batch& batch, double* loss) {
  if (batch.features.cols() == 0) throw ContractError("backward: empty batch");
  const Index n = static_cast<Index>(net.n_joints());
  if (batch.targets.rows() != 3 * n) throw ShapeError("backward: targets must have 3n rows");
  ForwardCache c;
  run_forward(net, batch.features, c);
  if (loss) *loss = weighted_mse(c.out, batch.targets, batch.weights);

  const auto& L = net.layout();
  const auto& p = net.params();
  VectorXd g = VectorXd::Zero(p.size());
  const double inv_n = 1.0 / static_cast<double>(batch.features.cols());

  MatrixXd dout = 2.0 * inv_n * (c.out - batch.targets);
  dout = dout.array().rowwise() * batch.weights.transpose().array();
  const MatrixXd dz_heads = dout.array() * c.out.array() * (1.0 - c.out.array());

  MatrixXd da3 = MatrixXd::Zero(MetaNetwork::kHidden3, batch.features.cols());
  const DenseSlot* heads[3] = {&L.kp, &L.ki, &L.kd};
  for (int k = 0; k < 3; ++k) {
    const auto dz = dz_heads.middleRows(k * n, n);
    weight_of(g, *heads[k]).noalias() += dz * c.a3.transpose();
    bias_of(g, *heads[k]) += dz.rowwise().sum();
    da3.noalias() += weight_of(p, *heads[k]).transpose() * dz;
  }

  const MatrixXd dz3 = (c.a3.array() > 0.0).select(da3.array(), 0.0).matrix();
  weight_of(g, L.l3).noalias() += dz3 * c.a2.transpose();
  bias_of(g, L.l3) += dz3.rowwise().sum();
  const MatrixXd da2 = weight_of(p, L.l3).transpose() * dz3;

  const Index h1 = MetaNetwork::kHidden1, h2 = MetaNetwork::kHidden2;
  const MatrixXd dy2 = (c.ln2.y.array() > 0.0).select(da2.array(), 0.0).matrix();
  const MatrixXd dz2 = layer_norm_backward(dy2, ConstVecMap(p.data() + L.ln2_gamma, h2), c.ln2,
                                           VecMap(g.data() + L.ln2_gamma, h2),
                                           VecMap(g.data() + L.ln2_beta, h2));
  weight_of(g, L.l2).noalias() += dz2 * c.a1.transpose();
  bias_of(g, L.l2) += dz2.rowwise().sum();
  const MatrixXd da1 = weight_of(p, L.l2).transpose() * dz2;

  const MatrixXd dy1 = (c.ln1.y.array() > 0.0).select(da1.array(), 0.0).matrix();
  const MatrixXd dz1 = layer_norm_backward(dy1, ConstVecMap(p.data() + L.ln1_gamma, h1), c.ln1,
                                           VecMap(g.data() + L.ln1_gamma, h1),
                                           VecMap(g.data() + L.ln1_beta, h1));
  weight_of(g, L.l1).noalias() += dz1 * c.x.transpose();
  bias_of(g, L.l1) += dz1.rowwise().sum();
  return g;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || weight_decay < 0 || batch_size == 0 || max_epochs == 0) {
    throw ConfigError("TrainConfig: learning_rate, batch_size and max_epochs must be positive");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("TrainConfig: val_fraction must lie in (0, 1)");
  }
}

TrainResult train(MetaNetwork net, const Dataset& data, const TrainConfig& cfg,
                  const EpochFn& on_epoch) {
  cfg.validate();
  if (data.samples.empty()) throw DataError("train: dataset is empty");
  for (const auto& s : data.samples) {
    if (s.gains.n_joints() != net.n_joints()) {
      throw DataError("train: sample (" + s.base_name + ", " + std::to_string(s.variant_id) + ") has " +
                      std::to_string(s.gains.n_joints()) + " joints, network expects " +
                      std::to_string(net.n_joints()));
    }
  }

  const std::size_t total = data.samples.size();
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, {kTagSplit}));
  for (std::size_t i = total; i > 1; --i) std::swap(order[i - 1], order[split_rng.index(i)]);
  std::size_t n_val = static_cast<std::size_t>(std::floor(static_cast<double>(total) * cfg.val_fraction));
  if (n_val >= total) n_val = total - 1;
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  const std::vector<double> weights = sample_weights(data);
  const Batch train_batch = make_batch(data, train_idx, weights, net.limits());
  const Batch val_batch = make_batch(data, val_idx, weights, net.limits());

  const double count = static_cast<double>(train_idx.size());
  net.feature_mean = train_batch.features.rowwise().sum() / count;
  const MatrixXd centered = train_batch.features.colwise() - net.feature_mean;
  net.feature_std = (centered.array().square().rowwise().sum() / count).sqrt().matrix();
  for (Index k = 0; k < net.feature_std.size(); ++k) {
    // Constant features (e.g. joint count within one robot family) pass through centred.
    if (net.feature_std(k) < kStdFloor * std::max(1.0, std::abs(net.feature_mean(k)))) {
      net.feature_std(k) = 1.0;
    }
  }

  Adam adam(net.params().size(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  TrainHistory h;
  h.n_train = train_idx.size();
  h.n_val = n_val;
  h.best_val_loss = std::numeric_limits<double>::infinity();
  VectorXd best = net.params();
  std::size_t since_best = 0;
  std::vector<std::size_t> epoch_order = train_idx;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    epoch_order = train_idx;
    Rng shuffle(derive_seed(cfg.seed, {kTagEpoch, epoch}));
    for (std::size_t i = epoch_order.size(); i > 1; --i) {
      std::swap(epoch_order[i - 1], epoch_order[shuffle.index(i)]);
    }
    for (std::size_t start = 0; start < epoch_order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(epoch_order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> ids(epoch_order.data() + start, stop - start);
      const Batch mb = make_batch(data, ids, weights, net.limits());
      const VectorXd grad = backward(net, mb);
      if (!grad.allFinite()) throw NumericError("metanet training produced a non-finite gradient");
      adam.step(net.params(), grad);
    }

    const double train_loss = batch_loss(net, train_batch);
    const double val_loss = n_val > 0 ? batch_loss(net, val_batch) : train_loss;
    h.train_loss.push_back(train_loss);
    h.val_loss.push_back(val_loss);
    if (on_epoch) on_epoch(epoch, train_loss, val_loss);

    if (val_loss < h.best_val_loss) {
      h.best_val_loss = val_loss;
      h.best_epoch = epoch;
      best = net.params();
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= cfg.early_stop_patience) break;
  }
  net.params() = best;
  return {std::move(net), std::move(h)};
}

void to_json(nlohmann::json& j, const MetaNetwork& net) {
  const Index n = static_cast<Index>(net.n_joints());
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& t : named_tensors(net)) {
    tensors[t.name] = to_row_major(ConstMatMap(net.params().data() + t.offset, t.rows, t.cols));
  }
  j = nlohmann::json{
      {"schema_version", kMetanetSchemaVersion},
      {"kind", "metanet"},
      {"n_joints", net.n_joints()},
      {"dims",
       {static_cast<Index>(kFeatureDim), MetaNetwork::kHidden1, MetaNetwork::kHidden2,
        MetaNetwork::kHidden3, n}},
      {"tensors", std::move(tensors)},
      {"feature_mean", std::vector<double>(net.feature_mean.data(), net.feature_mean.data() + kFeatureDim)},
      {"feature_std", std::vector<double>(net.feature_std.data(), net.feature_std.data() + kFeatureDim)},
      {"bounds", net.limits()},
  };
}

void from_json(const nlohmann::json& j, MetaNetwork& net) {
  if (j.value("kind", "") != "metanet") throw DataError("not a metanet checkpoint");
  const int version = j.at("schema_version").get<int>();
  if (version != kMetanetSchemaVersion) {
    throw VersionError("unsupported metanet schema_version " + std::to_string(version));
  }
  const auto n = j.at("n_joints").get<std::size_t>();
  const auto dims = j.at("dims").get<std::vector<Index>>();
  const std::vector<Index> expected = {static_cast<Index>(kFeatureDim), MetaNetwork::kHidden1,
                                       MetaNetwork::kHidden2, MetaNetwork::kHidden3,
                                       static_cast<Index>(n)};
  if (dims != expected) throw ShapeError("metanet checkpoint dims do not match the architecture");
  MetaNetwork out(n, j.at("bounds").get<GainLimits>());
  const auto& tensors = j.at("tensors");
  for (const auto& t : named_tensors(out)) {
    if (!tensors.contains(t.name)) throw ShapeError(std::string("metanet checkpoint lacks ") + t.name);
    MatMap m(out.params().data() + t.offset, t.rows, t.cols);
    from_row_major(tensors.at(t.name).get<std::vector<double>>(), m);
  }
  const auto mean = j.at("feature_mean").get<std::vector<double>>();
  const auto stdv = j.at("feature_std").get<std::vector<double>>();
  if (mean.size() != kFeatureDim || stdv.size() != kFeatureDim) {
    throw ShapeError("metanet feature statistics must have 10 entries");
  }
  out.feature_mean = Eigen::Map<const VectorXd>(mean.data(), kFeatureDim);
  out.feature_std = Eigen::Map<const VectorXd>(stdv.data(), kFeatureDim);
  if ((out.feature_std.array() <= 0.0).any()) throw DataError("metanet feature_std must be positive");
  net = std::move(out);
}

void save_metanet(const MetaNetwork& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write metanet checkpoint '" + path + "'", path);
  out << nlohmann::json(net).dump() << '\n';
  if (!out) throw IoError("failed writing metanet checkpoint '" + path + "'", path);
}

MetaNetwork load_metanet(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open metanet checkpoint '" + path + "'", path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": malformed JSON (" + e.what() + ")", 0);
  }
  try {
    return j.get<MetaNetwork>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what(), 0);
  }
}

}  // namespace metapid
