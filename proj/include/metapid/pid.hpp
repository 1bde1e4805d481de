#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "metapid/plant.hpp"

namespace metapid {

inline constexpr double kIntegralClamp = 10.0;  // rad s

// Admissible range of each gain family.
struct GainLimits {
  double kp_min = 0.1, kp_max = 500.0;
  double ki_min = 0.0, ki_max = 1.0;
  double kd_min = 0.1, kd_max = 500.0;

  void validate() const;
  bool operator==(const GainLimits&) const = default;
};

struct PIDGains {
  std::vector<double> kp;
  std::vector<double> ki;
  std::vector<double> kd;

  std::size_t n_joints() const { return kp.size(); }

  static PIDGains uniform(std::size_t n, double kp, double ki, double kd) {
    return {std::vector<double>(n, kp), std::vector<double>(n, ki), std::vector<double>(n, kd)};
  }
  // Mid-point of every range.
  static PIDGains midpoint(std::size_t n, const GainLimits& limits = {});

  void validate(const GainLimits& limits = {}) const;
  bool within(const GainLimits& limits) const;
  bool operator==(const PIDGains&) const = default;
};

PIDGains clamp_gains(PIDGains gains, const GainLimits& limits);

struct PIDState {
  std::vector<double> integral;
  std::vector<double> prev_error;
  bool initialized = false;

  static PIDState zeros(std::size_t n) { return {std::vector<double>(n), std::vector<double>(n), false}; }
  bool operator==(const PIDState&) const = default;
};

// Zeroed copy of `state`. Idempotent.
PIDState reset(const PIDState& state);

/**
 * One control update per joint:
 *
 *   u = Kp e + Ki clamp(∫e, ±kIntegralClamp) + Kd (e - e_prev) / dt
 *
 * The integral uses the trapezoid rule and is stored clamped; on the first
 * call after a reset the derivative term is zero and the previous error is
 * taken equal to the current one.
 */
void pid_step(const PIDGains& gains, PIDState& state, std::span<const double> error, double dt,
              std::span<double> command);
std::vector<double> pid_step(const PIDGains& gains, PIDState& state,
                             std::span<const double> error, double dt);

// Closed loop of reference, PID and plant for one episode.
//
// Each step() evaluates the reference at the current step index, computes the
// error from the current plant state, applies PID and disturbance torques and
// integrates one dt. The plant starts on the reference.
class ClosedLoop {
 public:
  ClosedLoop(const RobotModel& model, PIDGains gains, TrajectorySpec spec,
             std::optional<DisturbanceProcess> disturbance = std::nullopt);

  // Advances one control step. Returns false once the loop is unstable
  // (non-finite state or |q| beyond the instability bound).
  bool step();

  bool done() const { return step_ >= spec_.duration_steps; }
  bool unstable() const { return unstable_; }
  std::size_t step_index() const { return step_; }

  // Error and reference velocity used by the most recent step().
  const std::vector<double>& error() const { return error_; }
  const std::vector<double>& reference_velocity() const { return ref_qd_; }
  const PlantState& state() const { return state_; }
  const RobotModel& model() const { return model_; }
  const TrajectorySpec& trajectory() const { return spec_; }
  const PIDGains& gains() const { return gains_; }
  void set_gains(PIDGains gains) { gains_ = std::move(gains); }

  // Positions beyond this are treated as divergence (rad).
  static constexpr double kInstabilityBound = 10.0;

 private:
  RobotModel model_;
  PIDGains gains_;
  TrajectorySpec spec_;
  std::optional<DisturbanceProcess> disturbance_;
  PIDState pid_;
  PlantState state_;
  std::size_t step_ = 0;
  bool unstable_ = false;
  std::vector<double> ref_q_, ref_qd_, error_, command_, external_;
};

void to_json(nlohmann::json& j, const PIDGains& g);
void from_json(const nlohmann::json& j, PIDGains& g);
void to_json(nlohmann::json& j, const GainLimits& g);
void from_json(const nlohmann::json& j, GainLimits& g);

}  // namespace metapid
