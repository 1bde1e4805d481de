/**
 * @file optimizer.hpp
 * @brief Ground-truth PID tuning: tracking-cost objective, differential
 *        evolution, Nelder-Mead polish and their composition.
 *
 * The optimized vector is laid out as [Kp_1..n, Kd_1..n, Ki_1..n].
 */
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "metapid/pid.hpp"
#include "metapid/plant.hpp"
#include "metapid/rng.hpp"

namespace metapid {

inline constexpr double kDivergencePenalty = 1e6;  // degrees

using Objective = std::function<double(std::span<const double>)>;
// Called after each DE generation with (generation, best cost).
using ProgressFn = std::function<void(std::size_t, double)>;

struct GainBounds {
  std::vector<double> lower;
  std::vector<double> upper;

  std::size_t dim() const { return lower.size(); }
  // Throws ConfigError unless lower <= upper elementwise.
  void validate() const;
  bool contains(std::span<const double> x) const;

  // Bounds for the [Kp, Kd, Ki] layout of an n-joint controller.
  static GainBounds for_pid(std::size_t n_joints, const GainLimits& limits = {});
};

std::vector<double> flatten_gains(const PIDGains& gains);
PIDGains unflatten_gains(std::span<const double> x, std::size_t n_joints);

// sqrt((1/T) Σ_t Σ_i e_i(t)^2) in degrees for a row-major T×n error series
// given in radians.
double tracking_cost_deg(std::span<const double> errors, std::size_t n_joints);

// Closed-loop episode without disturbance, scored by tracking_cost_deg.
// Non-finite simulations score kDivergencePenalty.
double evaluate_gains(const RobotModel& model, const PIDGains& gains, const TrajectorySpec& spec);

struct DEConfig {
  std::size_t population = 8;
  std::size_t generations = 15;
  double F = 0.5;
  double CR = 0.7;
  int jobs = 1;

  void validate() const;
};

struct DEResult {
  std::vector<double> best;
  double best_cost = 0.0;
  // history[0] is the initial population best, history[g] after generation g.
  std::vector<double> history;
  std::vector<std::vector<double>> population;
  std::vector<double> population_costs;
  std::size_t evaluations = 0;
  double min_evaluated = 0.0;
};

/// DE/rand/1/bin. Trials of one generation are built from the population at
/// the start of that generation, so evaluation may run in parallel and the
/// result does not depend on `jobs`. Out-of-bounds trial components are
/// reflected back into the box.
DEResult de_search(const Objective& objective, const GainBounds& bounds, const DEConfig& cfg,
                   Rng& rng, const ProgressFn& progress = {});

struct NMConfig {
  std::size_t iterations = 20;
  double reflection = 1.0;
  double expansion = 2.0;
  double contraction = 0.5;
  double shrink = 0.5;
  double initial_step = 0.05;  // fraction of the bound width
};

struct NMResult {
  std::vector<double> best;
  double cost = 0.0;
  std::size_t evaluations = 0;
};

NMResult nelder_mead(const Objective& objective, std::span<const double> start,
                     const GainBounds& bounds, const NMConfig& cfg = {});

struct HybridConfig {
  DEConfig de;
  NMConfig nm;
  GainLimits limits;
};

struct OptResult {
  PIDGains gains;
  double cost_deg = 0.0;
  std::size_t evaluations = 0;
  double de_cost = 0.0;
  double polished_cost = 0.0;
  std::vector<double> de_history;
  double de_min_evaluated = 0.0;

  bool operator==(const OptResult&) const = default;
};

OptResult hybrid_optimize(const RobotModel& model, const TrajectorySpec& spec,
                          const HybridConfig& cfg, Rng& rng, const ProgressFn& progress = {});

}  // namespace metapid
