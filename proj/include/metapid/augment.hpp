/**
 * @file augment.hpp
 * @brief Physics-based data augmentation: perturbed virtual robots, their
 *        optimized gains, quality filtering and the JSON Lines dataset file.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metapid/optimizer.hpp"
#include "metapid/pid.hpp"
#include "metapid/plant.hpp"
#include "metapid/rng.hpp"

namespace metapid {

inline constexpr int kDatasetSchemaVersion = 1;
inline constexpr double kDefaultQualityThresholdDeg = 30.0;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Interval&) const = default;
};

struct PerturbationRanges {
  Interval mass{0.9, 1.1};        // multiplicative
  Interval length{0.95, 1.05};    // multiplicative
  Interval inertia{0.85, 1.15};   // multiplicative
  Interval friction{0.05, 0.15};  // absolute, N m
  Interval damping{0.05, 0.2};    // absolute, N m s / rad

  void validate() const;
  // Inertia range of ±10% instead of ±15%.
  static PerturbationRanges narrow_inertia();
};

// Factors applied to a base robot. friction / damping are absolute values;
// empty means the base robot's own values were kept (the unperturbed base).
struct PerturbationFactors {
  double mass = 1.0;
  double length = 1.0;
  double inertia = 1.0;
  std::optional<double> friction;
  std::optional<double> damping;

  bool operator==(const PerturbationFactors&) const = default;
};

struct AugmentedSample {
  std::string base_name;
  std::size_t variant_id = 0;  // 0 is the unperturbed base
  FeatureVector features{};
  PIDGains gains;
  double opt_error_deg = 0.0;
  PerturbationFactors perturbations;
  std::uint64_t seed = 0;

  bool operator==(const AugmentedSample&) const = default;
};

struct Dataset {
  int schema_version = kDatasetSchemaVersion;
  std::vector<AugmentedSample> samples;

  std::size_t size() const { return samples.size(); }
  bool operator==(const Dataset&) const = default;
};

struct AugmentConfig {
  std::size_t variants_per_base = 100;
  PerturbationRanges ranges;
  HybridConfig hybrid;
  std::size_t trajectory_steps = kDefaultEpisodeSteps;
  double dt = kDefaultDt;
  std::uint64_t seed = 0;
  int jobs = 1;
};

// Benchmark trajectory used as the tuning objective: A = 0.5 rad,
// f = 0.25 Hz, phases staggered by 2π/n, offset 0.2 rad.
TrajectorySpec test_trajectory(std::size_t n_joints, std::size_t steps = kDefaultEpisodeSteps,
                               double dt = kDefaultDt);

RobotModel apply_perturbation(const RobotModel& base, const PerturbationFactors& factors);

// Draws factors in the order mass, length, inertia, friction, damping.
std::pair<RobotModel, PerturbationFactors> perturb_robot(const RobotModel& base,
                                                         const PerturbationRanges& ranges,
                                                         Rng& rng);

/// Emits, per base, the base itself (variant 0) and `variants_per_base`
/// perturbed robots, each tuned with hybrid_optimize. Output order is
/// (base index, variant_id) regardless of `jobs`.
Dataset build_dataset(std::span<const RobotModel> bases, const AugmentConfig& cfg,
                      const ProgressFn& progress = {});

/// Keeps samples with opt_error_deg <= threshold, preserving order.
Dataset filter_dataset(const Dataset& data, double threshold_deg = kDefaultQualityThresholdDeg);

// w_v = 1 / (1 + opt_error_deg), rescaled to mean 1.
std::vector<double> sample_weights(const Dataset& data);

void save_dataset(const Dataset& data, const std::string& path);
// Throws IoError, VersionError or ParseError (with the 1-based line).
Dataset load_dataset(const std::string& path);

}  // namespace metapid
