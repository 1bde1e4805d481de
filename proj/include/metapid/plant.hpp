/**
 * @file plant.hpp
 * @brief Analytic multi-joint plant: robot description, reference
 *        trajectories, dynamics, disturbances and physical features.
 *
 * Each joint is an independent second-order system
 *
 *   I_i q̈_i = sat(u_i) + d_i - b_i q̇_i - τc_i tanh(q̇_i / ε) - g_i sin(q_i)
 *
 * integrated with semi-implicit Euler.
 */
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "metapid/rng.hpp"

namespace metapid {

inline constexpr double kFrictionSmoothing = 0.01;  // rad/s
inline constexpr double kDefaultDt = 0.01;          // s, 100 Hz
inline constexpr std::size_t kDefaultEpisodeSteps = 2000;
inline constexpr std::size_t kMaxJoints = 12;
inline constexpr std::size_t kFeatureDim = 10;

using FeatureVector = std::array<double, kFeatureDim>;

struct RobotModel {
  std::string name;
  std::vector<double> mass_per_link;      // kg
  std::vector<double> inertia_per_joint;  // kg m^2, reflected
  std::vector<double> link_length;        // m
  std::vector<double> com_offset;         // m
  std::vector<double> viscous_damping;    // N m s / rad
  std::vector<double> coulomb_friction;   // N m
  std::vector<double> torque_limit;       // N m
  std::vector<double> gravity_gain;       // N m

  std::size_t n_joints() const { return mass_per_link.size(); }

  // Throws ContractError when a vector length or sign invariant is broken.
  void validate() const;

  bool operator==(const RobotModel&) const = default;
};

// Sinusoidal joint references q_i(t) = A_i sin(2π f_i t + φ_i) + q0_i.
struct TrajectorySpec {
  std::vector<double> amplitude;  // rad
  std::vector<double> frequency;  // Hz
  std::vector<double> phase;      // rad
  std::vector<double> offset;     // rad
  std::size_t duration_steps = kDefaultEpisodeSteps;
  double dt = kDefaultDt;

  std::size_t n_joints() const { return amplitude.size(); }
  void validate() const;
  double mean_amplitude() const;
  double mean_frequency() const;

  bool operator==(const TrajectorySpec&) const = default;
};

struct PlantState {
  std::vector<double> q;   // rad
  std::vector<double> qd;  // rad/s
  double t = 0.0;

  static PlantState zeros(std::size_t n) { return {std::vector<double>(n), std::vector<double>(n), 0.0}; }
  bool operator==(const PlantState&) const = default;
};

struct Reference {
  std::vector<double> q;
  std::vector<double> qd;
};

enum class DisturbanceKind : std::uint8_t {
  None,
  RandomForce,
  PayloadVariation,
  ParameterUncertainty,
  Mixed,
};

inline constexpr std::array<DisturbanceKind, 5> kAllDisturbanceKinds = {
    DisturbanceKind::None, DisturbanceKind::RandomForce, DisturbanceKind::PayloadVariation,
    DisturbanceKind::ParameterUncertainty, DisturbanceKind::Mixed};

std::string_view to_string(DisturbanceKind kind);
DisturbanceKind disturbance_kind_from_string(std::string_view name);

struct DisturbanceScenario {
  DisturbanceKind kind = DisturbanceKind::None;
  double force_min = 50.0;  // N, converted to N m by the mean link length
  double force_max = 150.0;
  std::size_t force_period = 50;  // steps
  double payload_min = 0.5;       // kg
  double payload_max = 2.0;
  double mass_inertia_spread = 0.20;  // fraction
  double friction_spread = 0.50;      // fraction

  static DisturbanceScenario of(DisturbanceKind kind) {
    DisturbanceScenario s;
    s.kind = kind;
    return s;
  }
  void validate() const;
};

// Sampled disturbance realisation for one (seed, episode).
//
// Per-episode quantities (payload, parameter factors) are drawn at
// construction. Random-force pulses are a pure function of the period index,
// so torque_at() may be queried in any order.
class DisturbanceProcess {
 public:
  DisturbanceProcess(const DisturbanceScenario& scenario, const RobotModel& model,
                     std::uint64_t seed, std::uint64_t episode);

  const RobotModel& effective_model() const { return effective_; }
  const DisturbanceScenario& scenario() const { return scenario_; }

  // Writes the external torque at `step` into `out` (length n_joints).
  void torque_at(std::size_t step, std::span<double> out) const;

 private:
  DisturbanceScenario scenario_;
  RobotModel effective_;
  std::uint64_t stream_;
  double torque_scale_;
};

/// Reference position and velocity at `step`. Throws RangeError past the end.
Reference make_reference(const TrajectorySpec& spec, std::size_t step);
void make_reference(const TrajectorySpec& spec, std::size_t step, std::span<double> q,
                    std::span<double> qd);

/// Random trajectory: A in [0.2, 0.8], f in [0.1, 0.5] Hz, φ in [0, 2π),
/// q0 in [-0.5, 0.5].
TrajectorySpec random_trajectory(std::size_t n_joints, std::size_t steps, double dt, Rng& rng);

// One semi-implicit Euler step. An empty `disturbance` means zero.
PlantState step_plant(const RobotModel& model, const PlantState& state,
                      std::span<const double> torque, std::span<const double> disturbance,
                      double dt);
// In-place variant for inner loops; skips the finiteness checks.
void step_plant_inplace(const RobotModel& model, PlantState& state,
                        std::span<const double> torque, std::span<const double> disturbance,
                        double dt);

/// Effective model and external torque for `step` of episode `episode`.
std::pair<RobotModel, std::vector<double>> apply_disturbance(const DisturbanceScenario& scenario,
                                                             const RobotModel& model,
                                                             std::uint64_t seed,
                                                             std::uint64_t episode,
                                                             std::size_t step);

/**
 * 10-entry physical descriptor, fixed order:
 *   0 n_dof, 1 total mass, 2 mean inertia, 3 max inertia, 4 inertia sum,
 *   5 mean link length, 6 total reach, 7 mean COM offset,
 *   8 mean viscous damping, 9 mean Coulomb friction.
 */
FeatureVector extract_features(const RobotModel& model);

// Reflected inertia I_i = base_i * (1 + sum_{j>i} m_j L_j^2 / normalizer).
std::vector<double> chain_inertia(std::span<const double> base_inertia,
                                  std::span<const double> mass,
                                  std::span<const double> length, double normalizer);

RobotModel robot_preset(std::string_view name);
std::vector<std::string> preset_names();

// Preset name or path to a RobotModel JSON document.
RobotModel load_robot(const std::string& name_or_path);
void save_robot(const RobotModel& model, const std::string& path);

void to_json(nlohmann::json& j, const RobotModel& model);
void from_json(const nlohmann::json& j, RobotModel& model);
void to_json(nlohmann::json& j, const TrajectorySpec& spec);
void from_json(const nlohmann::json& j, TrajectorySpec& spec);

}  // namespace metapid
