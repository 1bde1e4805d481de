#include "metapid/augment.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <utility>

#include <nlohmann/json.hpp>

#include "metapid/errors.hpp"
#include "metapid/parallel.hpp"

namespace metapid {
namespace {

constexpr std::uint64_t kTagPerturb = 1;
constexpr std::uint64_t kTagOptimize = 2;

void check_interval(const Interval& iv, const char* name, bool multiplicative) {
  if (!(iv.lo <= iv.hi) || iv.lo < 0 || (multiplicative && !(iv.lo > 0))) {
    throw ConfigError(std::string("PerturbationRanges.") + name +
                      (multiplicative ? " must satisfy 0 < lo <= hi" : " must satisfy 0 <= lo <= hi"));
  }
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

nlohmann::json sample_to_json(const AugmentedSample& s) {
  const auto& p = s.perturbations;
  return nlohmann::json{
      {"base_name", s.base_name},
      {"variant_id", s.variant_id},
      {"features", s.features},
      {"gains", s.gains},
      {"opt_error_deg", s.opt_error_deg},
      {"perturbations",
       {{"mass", p.mass},
        {"length", p.length},
        {"inertia", p.inertia},
        {"friction", optional_json(p.friction)},
        {"damping", optional_json(p.damping)}}},
      {"seed", s.seed},
  };
}

AugmentedSample sample_from_json(const nlohmann::json& j) {
  AugmentedSample s;
  j.at("base_name").get_to(s.base_name);
  j.at("variant_id").get_to(s.variant_id);
  const auto& features = j.at("features");
  if (!features.is_array() || features.size() != kFeatureDim) {
    throw ShapeError("features must have exactly 10 entries");
  }
  for (std::size_t k = 0; k < kFeatureDim; ++k) s.features[k] = features[k].get<double>();
  j.at("gains").get_to(s.gains);
  j.at("opt_error_deg").get_to(s.opt_error_deg);
  if (!(s.opt_error_deg >= 0.0)) throw DataError("opt_error_deg must be >= 0");
  const auto& p = j.at("perturbations");
  s.perturbations.mass = p.at("mass").get<double>();
  s.perturbations.length = p.at("length").get<double>();
  s.perturbations.inertia = p.at("inertia").get<double>();
  s.perturbations.friction = optional_from(p.at("friction"));
  s.perturbations.damping = optional_from(p.at("damping"));
  j.at("seed").get_to(s.seed);
  return s;
}

}  // namespace

void PerturbationRanges::validate() const {
  check_interval(mass, "mass", true);
  check_interval(length, "length", true);
  check_interval(inertia, "inertia", true);
  check_interval(friction, "friction", false);
  check_interval(damping, "damping", false);
  if (!(friction.lo > 0) || !(damping.lo > 0)) {
    throw ConfigError("PerturbationRanges: friction and damping draws must be strictly positive");
  }
}

PerturbationRanges PerturbationRanges::narrow_inertia() {
  PerturbationRanges r;
  r.inertia = {0.9, 1.1};
  return r;
}

TrajectorySpec test_trajectory(std::size_t n, std::size_t steps, double dt) {
  TrajectorySpec spec;
  spec.duration_steps = steps;
  spec.dt = dt;
  for (std::size_t i = 0; i < n; ++i) {
    spec.amplitude.push_back(0.5);
    spec.frequency.push_back(0.25);
    spec.phase.push_back(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    spec.offset.push_back(0.2);
  }
  return spec;
}

RobotModel apply_perturbation(const RobotModel& base, const PerturbationFactors& f) {
  RobotModel m = base;
  for (auto& x : m.mass_per_link) x *= f.mass;
  for (auto& x : m.link_length) x *= f.length;
  for (auto& x : m.inertia_per_joint) x *= f.inertia;
  if (f.friction) m.coulomb_friction.assign(m.n_joints(), *f.friction);
  if (f.damping) m.viscous_damping.assign(m.n_joints(), *f.damping);
  m.validate();
  return m;
}

std::pair<RobotModel, PerturbationFactors> perturb_robot(const RobotModel& base,
                                                         const PerturbationRanges& ranges,
                                                         Rng& rng) {
  ranges.validate();
  PerturbationFactors f;
  f.mass = rng.uniform(ranges.mass.lo, ranges.mass.hi);
  f.length = rng.uniform(ranges.length.lo, ranges.length.hi);
  f.inertia = rng.uniform(ranges.inertia.lo, ranges.inertia.hi);
  f.friction = rng.uniform(ranges.friction.lo, ranges.friction.hi);
  f.damping = rng.uniform(ranges.damping.lo, ranges.damping.hi);
  return {apply_perturbation(base, f), f};
}

Dataset build_dataset(std::span<const RobotModel> bases, const AugmentConfig& cfg,
                      const ProgressFn& progress) {
  cfg.ranges.validate();
  cfg.hybrid.de.validate();
  for (const auto& b : bases) b.validate();

  const std::size_t per_base = cfg.variants_per_base + 1;
  Dataset data;
  data.samples.resize(bases.size() * per_base);

  std::vector<TrajectorySpec> trajectories;
  for (const auto& b : bases) {
    trajectories.push_back(test_trajectory(b.n_joints(), cfg.trajectory_steps, cfg.dt));
  }

  HybridConfig hybrid = cfg.hybrid;
  hybrid.de.jobs = 1;  // parallelism is across samples
  parallel_for(data.samples.size(), cfg.jobs, [&](std::size_t k) {
    const std::size_t b = k / per_base;
    const std::size_t variant = k % per_base;
    AugmentedSample& s = data.samples[k];
    s.base_name = bases[b].name;
    s.variant_id = variant;
    s.seed = derive_seed(cfg.seed, {b, variant});

    RobotModel robot = bases[b];
    if (variant > 0) {
      Rng prng(derive_seed(s.seed, {kTagPerturb}));
      std::tie(robot, s.perturbations) = perturb_robot(bases[b], cfg.ranges, prng);
    }
    s.features = extract_features(robot);

    Rng orng(derive_seed(s.seed, {kTagOptimize}));
    try {
      OptResult r = hybrid_optimize(robot, trajectories[b], hybrid, orng);
      s.gains = std::move(r.gains);
      s.opt_error_deg = r.cost_deg;
    } catch (const std::exception&) {
      // Kept as a penalty sample so the filter, not the build, drops it.
      s.gains = PIDGains::midpoint(robot.n_joints(), cfg.hybrid.limits);
      s.opt_error_deg = kDivergencePenalty;
    }
  });

  if (progress) {
    for (std::size_t k = 0; k < data.samples.size(); ++k) progress(k, data.samples[k].opt_error_deg);
  }
  return data;
}

Dataset filter_dataset(const Dataset& data, double threshold_deg) {
  Dataset out;
  out.schema_version = data.schema_version;
  for (const auto& s : data.samples) {
    if (s.opt_error_deg <= threshold_deg) out.samples.push_back(s);
  }
  return out;
}

std::vector<double> sample_weights(const Dataset& data) {
  std::vector<double> w;
  w.reserve(data.size());
  double sum = 0.0;
  for (const auto& s : data.samples) {
    w.push_back(1.0 / (1.0 + s.opt_error_deg));
    sum += w.back();
  }
  if (sum > 0.0) {
    const double scale = static_cast<double>(w.size()) / sum;
    for (auto& x : w) x *= scale;
  }
  return w;
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset '" + path + "'", path);
  out << nlohmann::json{{"schema_version", data.schema_version}, {"kind", "dataset"}}.dump() << '\n';
  for (const auto& s : data.samples) out << sample_to_json(s).dump() << '\n';
  if (!out) throw IoError("failed writing dataset '" + path + "'", path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path + "'", path);

  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::set<std::pair<std::string, std::size_t>> keys;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")",
                       line_no);
    }
    if (!header_seen) {
      if (!j.is_object() || j.value("kind", "") != "dataset" || !j.contains("schema_version")) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": missing dataset header", line_no);
      }
      const int version = j.at("schema_version").get<int>();
      if (version != kDatasetSchemaVersion) {
        throw VersionError(path + ": unsupported dataset schema_version " + std::to_string(version));
      }
      data.schema_version = version;
      header_seen = true;
      continue;
    }
    try {
      AugmentedSample s = sample_from_json(j);
      if (!keys.emplace(s.base_name, s.variant_id).second) {
        throw DataError("duplicate sample (" + s.base_name + ", " + std::to_string(s.variant_id) + ")");
      }
      data.samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  if (!header_seen) throw ParseError(path + ": empty dataset file", 0);
  return data;
}

}  // namespace metapid
