#include "metapid/plant.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metapid/errors.hpp"

namespace metapid {
namespace {

constexpr int kRobotSchemaVersion = 1;

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void require_length(const std::vector<double>& v, std::size_t n, const char* field) {
  if (v.size() != n) {
    throw ContractError(std::string("RobotModel.") + field + " has length " +
                        std::to_string(v.size()) + ", expected " + std::to_string(n));
  }
}

void require_positive(const std::vector<double>& v, const char* field) {
  for (double x : v) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw ContractError(std::string("RobotModel.") + field + " must be strictly positive");
    }
  }
}

void require_non_negative(const std::vector<double>& v, const char* field) {
  for (double x : v) {
    if (!(x >= 0.0) || !std::isfinite(x)) {
      throw ContractError(std::string("RobotModel.") + field + " must be non-negative");
    }
  }
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

void RobotModel::validate() const {
  const std::size_t n = n_joints();
  if (n < 1 || n > kMaxJoints) {
    throw ContractError("RobotModel '" + name + "' must have 1.." + std::to_string(kMaxJoints) +
                        " joints, got " + std::to_string(n));
  }
  require_length(inertia_per_joint, n, "inertia_per_joint");
  require_length(link_length, n, "link_length");
  require_length(com_offset, n, "com_offset");
  require_length(viscous_damping, n, "viscous_damping");
  require_length(coulomb_friction, n, "coulomb_friction");
  require_length(torque_limit, n, "torque_limit");
  require_length(gravity_gain, n, "gravity_gain");
  require_positive(mass_per_link, "mass_per_link");
  require_positive(inertia_per_joint, "inertia_per_joint");
  require_positive(link_length, "link_length");
  require_positive(viscous_damping, "viscous_damping");
  require_positive(coulomb_friction, "coulomb_friction");
  require_positive(torque_limit, "torque_limit");
  require_non_negative(com_offset, "com_offset");
  require_non_negative(gravity_gain, "gravity_gain");
}

void TrajectorySpec::validate() const {
  const std::size_t n = amplitude.size();
  if (n == 0 || frequency.size() != n || phase.size() != n || offset.size() != n) {
    throw ShapeError("TrajectorySpec vectors must be non-empty and of equal length");
  }
  if (duration_steps < 1) throw ContractError("TrajectorySpec.duration_steps must be >= 1");
  if (!(dt > 0.0)) throw ContractError("TrajectorySpec.dt must be > 0");
}

double TrajectorySpec::mean_amplitude() const { return mean_of(amplitude); }
double TrajectorySpec::mean_frequency() const { return mean_of(frequency); }

void make_reference(const TrajectorySpec& spec, std::size_t step, std::span<double> q,
                    std::span<double> qd) {
  if (step >= spec.duration_steps) {
    throw RangeError("reference step " + std::to_string(step) + " outside [0, " +
                     std::to_string(spec.duration_steps) + ")");
  }
  const double t = static_cast<double>(step) * spec.dt;
  for (std::size_t i = 0; i < spec.amplitude.size(); ++i) {
    const double w = 2.0 * std::numbers::pi * spec.frequency[i];
    const double arg = w * t + spec.phase[i];
    q[i] = spec.amplitude[i] * std::sin(arg) + spec.offset[i];
    qd[i] = spec.amplitude[i] * w * std::cos(arg);
  }
}

Reference make_reference(const TrajectorySpec& spec, std::size_t step) {
  Reference ref{std::vector<double>(spec.n_joints()), std::vector<double>(spec.n_joints())};
  make_reference(spec, step, ref.q, ref.qd);
  return ref;
}

TrajectorySpec random_trajectory(std::size_t n_joints, std::size_t steps, double dt, Rng& rng) {
  TrajectorySpec spec;
  spec.duration_steps = steps;
  spec.dt = dt;
  for (std::size_t i = 0; i < n_joints; ++i) {
    spec.amplitude.push_back(rng.uniform(0.2, 0.8));
    spec.frequency.push_back(rng.uniform(0.1, 0.5));
    spec.phase.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
    spec.offset.push_back(rng.uniform(-0.5, 0.5));
  }
  return spec;
}

void step_plant_inplace(const RobotModel& model, PlantState& state,
                        std::span<const double> torque, std::span<const double> disturbance,
                        double dt) {
  const std::size_t n = model.n_joints();
  for (std::size_t i = 0; i < n; ++i) {
    const double limit = model.torque_limit[i];
    const double u = std::clamp(torque[i], -limit, limit);
    const double d = disturbance.empty() ? 0.0 : disturbance[i];
    const double qd = state.qd[i];
    const double net = u + d - model.viscous_damping[i] * qd -
                       model.coulomb_friction[i] * std::tanh(qd / kFrictionSmoothing) -
                       model.gravity_gain[i] * std::sin(state.q[i]);
    state.qd[i] = qd + net / model.inertia_per_joint[i] * dt;
    state.q[i] += state.qd[i] * dt;
  }
  state.t += dt;
}

PlantState step_plant(const RobotModel& model, const PlantState& state,
                      std::span<const double> torque, std::span<const double> disturbance,
                      double dt) {
  const std::size_t n = model.n_joints();
  if (torque.size() != n || state.q.size() != n || state.qd.size() != n ||
      (!disturbance.empty() && disturbance.size() != n)) {
    throw ShapeError("step_plant: vector lengths must equal n_joints");
  }
  if (!(dt > 0.0)) throw ContractError("step_plant: dt must be > 0");
  if (!all_finite(torque) || !all_finite(disturbance) || !all_finite(state.q) ||
      !all_finite(state.qd) || !std::isfinite(dt)) {
    throw NumericError("step_plant: non-finite input");
  }
  PlantState next = state;
  step_plant_inplace(model, next, torque, disturbance, dt);
  return next;
}

// ---------------------------------------------------------------------------
// Disturbances

std::string_view to_string(DisturbanceKind kind) {
  switch (kind) {
    case DisturbanceKind::None: return "none";
    case DisturbanceKind::RandomForce: return "random_force";
    case DisturbanceKind::PayloadVariation: return "payload";
    case DisturbanceKind::ParameterUncertainty: return "param_uncertainty";
    case DisturbanceKind::Mixed: return "mixed";
  }
  return "none";
}

DisturbanceKind disturbance_kind_from_string(std::string_view name) {
  for (auto kind : kAllDisturbanceKinds) {
    if (to_string(kind) == name) return kind;
  }
  throw ConfigError("unknown disturbance scenario '" + std::string(name) + "'");
}

void DisturbanceScenario::validate() const {
  if (force_min < 0 || force_max < force_min || payload_min < 0 || payload_max < payload_min ||
      mass_inertia_spread < 0 || friction_spread < 0) {
    throw ConfigError("DisturbanceScenario ranges must be non-negative and ordered");
  }
  if (mass_inertia_spread >= 1.0 || friction_spread >= 1.0) {
    throw ConfigError("DisturbanceScenario spreads must be < 1 to keep parameters positive");
  }
  if (force_period < 1) throw ConfigError("DisturbanceScenario.force_period must be >= 1");
}

namespace {

// Stream tags; values are arbitrary but frozen.
constexpr std::uint64_t kTagEpisode = 0x45504953ULL;
constexpr std::uint64_t kTagForce = 0x464f5243ULL;

void apply_parameter_uncertainty(RobotModel& m, const DisturbanceScenario& s, Rng& rng) {
  for (std::size_t i = 0; i < m.n_joints(); ++i) {
    const double k = rng.uniform(1.0 - s.mass_inertia_spread, 1.0 + s.mass_inertia_spread);
    m.mass_per_link[i] *= k;
    m.inertia_per_joint[i] *= k;
  }
  for (std::size_t i = 0; i < m.n_joints(); ++i) {
    m.coulomb_friction[i] *= rng.uniform(1.0 - s.friction_spread, 1.0 + s.friction_spread);
  }
}

void apply_payload(RobotModel& m, const DisturbanceScenario& s, Rng& rng) {
  const double payload = rng.uniform(s.payload_min, s.payload_max);
  const std::size_t last = m.n_joints() - 1;
  const double reach = m.link_length[last];
  m.mass_per_link[last] += payload;
  m.inertia_per_joint[last] += payload * reach * reach;
}

}  // namespace

DisturbanceProcess::DisturbanceProcess(const DisturbanceScenario& scenario,
                                       const RobotModel& model, std::uint64_t seed,
                                       std::uint64_t episode)
    : scenario_(scenario),
      effective_(model),
      stream_(derive_seed(seed, {static_cast<std::uint64_t>(scenario.kind), episode})),
      torque_scale_(mean_of(model.link_length)) {
  scenario_.validate();
  Rng rng(derive_seed(stream_, {kTagEpisode}));
  switch (scenario_.kind) {
    case DisturbanceKind::None:
    case DisturbanceKind::RandomForce:
      break;
    case DisturbanceKind::PayloadVariation:
      apply_payload(effective_, scenario_, rng);
      break;
    case DisturbanceKind::ParameterUncertainty:
      apply_parameter_uncertainty(effective_, scenario_, rng);
      break;
    case DisturbanceKind::Mixed:
      apply_parameter_uncertainty(effective_, scenario_, rng);
      apply_payload(effective_, scenario_, rng);
      break;
  }
}

void DisturbanceProcess::torque_at(std::size_t step, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  if (scenario_.kind != DisturbanceKind::RandomForce) return;
  const std::uint64_t period = step / scenario_.force_period;
  Rng rng(derive_seed(stream_, {kTagForce, period}));
  for (double& tau : out) {
    const double magnitude = rng.uniform(scenario_.force_min, scenario_.force_max);
    tau = (rng.coin() ? 1.0 : -1.0) * magnitude * torque_scale_;
  }
}

std::pair<RobotModel, std::vector<double>> apply_disturbance(const DisturbanceScenario& scenario,
                                                             const RobotModel& model,
                                                             std::uint64_t seed,
                                                             std::uint64_t episode,
                                                             std::size_t step) {
  DisturbanceProcess process(scenario, model, seed, episode);
  std::vector<double> torque(model.n_joints());
  process.torque_at(step, torque);
  return {process.effective_model(), std::move(torque)};
}

// ---------------------------------------------------------------------------
// Features and presets

FeatureVector extract_features(const RobotModel& model) {
  const auto& inertia = model.inertia_per_joint;
  const double inertia_sum = std::accumulate(inertia.begin(), inertia.end(), 0.0);
  return {
      static_cast<double>(model.n_joints()),
      std::accumulate(model.mass_per_link.begin(), model.mass_per_link.end(), 0.0),
      mean_of(inertia),
      *std::max_element(inertia.begin(), inertia.end()),
      inertia_sum,
      mean_of(model.link_length),
      std::accumulate(model.link_length.begin(), model.link_length.end(), 0.0),
      mean_of(model.com_offset),
      mean_of(model.viscous_damping),
      mean_of(model.coulomb_friction),
  };
}

std::vector<double> chain_inertia(std::span<const double> base_inertia,
                                  std::span<const double> mass,
                                  std::span<const double> length, double normalizer) {
  const std::size_t n = base_inertia.size();
  std::vector<double> out(n);
  double distal = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    out[k] = base_inertia[k] * (1.0 + distal / normalizer);
    distal += mass[k] * length[k] * length[k];
  }
  return out;
}

namespace {

RobotModel make_chain(std::string name, std::vector<double> mass, std::vector<double> length,
                      const std::vector<double>& base_inertia, std::vector<double> torque_limit,
                      std::vector<double> gravity, double damping, double friction) {
  RobotModel m;
  m.name = std::move(name);
  m.inertia_per_joint = chain_inertia(base_inertia, mass, length, 1.0);
  for (double l : length) m.com_offset.push_back(0.5 * l);
  m.mass_per_link = std::move(mass);
  m.link_length = std::move(length);
  m.viscous_damping.assign(m.mass_per_link.size(), damping);
  m.coulomb_friction.assign(m.mass_per_link.size(), friction);
  m.torque_limit = std::move(torque_limit);
  m.gravity_gain = std::move(gravity);
  m.validate();
  return m;
}

}  // namespace

RobotModel robot_preset(std::string_view name) {
  if (name == "toy2") {
    return make_chain("toy2", {4.0, 2.0}, {0.5, 0.4}, {1.2, 0.8}, {160.0, 60.0}, {80.0, 30.0},
                      0.1, 0.1);
  }
  if (name == "arm9") {
    // Seven arm joints plus two gripper fingers, 18 kg in total.
    return make_chain("arm9", {3.0, 3.0, 2.5, 2.5, 2.0, 1.8, 1.2, 1.0, 1.0},
                      {0.14, 0.14, 0.13, 0.12, 0.11, 0.09, 0.075, 0.03, 0.02},
                      {2.0, 2.0, 1.5, 1.5, 0.8, 0.6, 0.4, 0.2, 0.2},
                      {150.0, 400.0, 120.0, 250.0, 40.0, 40.0, 40.0, 20.0, 20.0},
                      {30.0, 300.0, 30.0, 180.0, 15.0, 24.0, 6.0, 3.0, 3.0}, 0.1, 0.1);
  }
  if (name == "quad12") {
    // Four legs of (abduction, hip, knee), 25 kg in total.
    std::vector<double> mass, length, inertia, limit, gravity;
    for (int leg = 0; leg < 4; ++leg) {
      mass.insert(mass.end(), {2.5, 2.0, 1.75});
      length.insert(length.end(), {0.08, 0.2, 0.2});
      inertia.insert(inertia.end(), {1.0, 1.5, 0.8});
      limit.insert(limit.end(), {40.0, 480.0, 400.0});
      gravity.insert(gravity.end(), {27.5, 370.0, 305.0});
    }
    return make_chain("quad12", mass, length, inertia, limit, gravity, 0.1, 0.1);
  }
  throw ConfigError("unknown robot preset '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() { return {"toy2", "arm9", "quad12"}; }

void to_json(nlohmann::json& j, const RobotModel& m) {
  j = nlohmann::json{{"schema_version", kRobotSchemaVersion},
                     {"name", m.name},
                     {"n_joints", m.n_joints()},
                     {"mass_per_link", m.mass_per_link},
                     {"inertia_per_joint", m.inertia_per_joint},
                     {"link_length", m.link_length},
                     {"com_offset", m.com_offset},
                     {"viscous_damping", m.viscous_damping},
                     {"coulomb_friction", m.coulomb_friction},
                     {"torque_limit", m.torque_limit},
                     {"gravity_gain", m.gravity_gain}};
}

void from_json(const nlohmann::json& j, RobotModel& m) {
  const int version = j.at("schema_version").get<int>();
  if (version != kRobotSchemaVersion) {
    throw VersionError("unsupported RobotModel schema_version " + std::to_string(version));
  }
  j.at("name").get_to(m.name);
  j.at("mass_per_link").get_to(m.mass_per_link);
  j.at("inertia_per_joint").get_to(m.inertia_per_joint);
  j.at("link_length").get_to(m.link_length);
  j.at("com_offset").get_to(m.com_offset);
  j.at("viscous_damping").get_to(m.viscous_damping);
  j.at("coulomb_friction").get_to(m.coulomb_friction);
  j.at("torque_limit").get_to(m.torque_limit);
  j.at("gravity_gain").get_to(m.gravity_gain);
  if (j.at("n_joints").get<std::size_t>() != m.n_joints()) {
    throw ShapeError("RobotModel.n_joints disagrees with array lengths");
  }
  m.validate();
}

void to_json(nlohmann::json& j, const TrajectorySpec& s) {
  j = nlohmann::json{{"amplitude", s.amplitude}, {"frequency", s.frequency},
                     {"phase", s.phase},         {"offset", s.offset},
                     {"duration_steps", s.duration_steps}, {"dt", s.dt}};
}

void from_json(const nlohmann::json& j, TrajectorySpec& s) {
  j.at("amplitude").get_to(s.amplitude);
  j.at("frequency").get_to(s.frequency);
  j.at("phase").get_to(s.phase);
  j.at("offset").get_to(s.offset);
  j.at("duration_steps").get_to(s.duration_steps);
  j.at("dt").get_to(s.dt);
  s.validate();
}

RobotModel load_robot(const std::string& name_or_path) {
  const auto names = preset_names();
  if (std::find(names.begin(), names.end(), name_or_path) != names.end()) {
    return robot_preset(name_or_path);
  }
  std::ifstream in(name_or_path);
  if (!in) throw IoError("cannot open robot file '" + name_or_path + "'", name_or_path);
  try {
    return nlohmann::json::parse(in).get<RobotModel>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed robot file '" + name_or_path + "': " + e.what(), 0);
  }
}

void save_robot(const RobotModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write robot file '" + path + "'", path);
  out << nlohmann::json(model).dump(2) << '\n';
}

}  // namespace metapid
