#include "metapid/pid.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "metapid/errors.hpp"

namespace metapid {

void GainLimits::validate() const {
  if (!(kp_min < kp_max) || !(ki_min < ki_max) || !(kd_min < kd_max) || kp_min < 0 ||
      ki_min < 0 || kd_min < 0) {
    throw ConfigError("GainLimits: every range must satisfy 0 <= lower < upper");
  }
}

PIDGains PIDGains::midpoint(std::size_t n, const GainLimits& l) {
  return uniform(n, 0.5 * (l.kp_min + l.kp_max), 0.5 * (l.ki_min + l.ki_max),
                 0.5 * (l.kd_min + l.kd_max));
}

void PIDGains::validate(const GainLimits& limits) const {
  if (kp.empty() || ki.size() != kp.size() || kd.size() != kp.size()) {
    throw ShapeError("PIDGains: kp, ki, kd must be non-empty and of equal length");
  }
  if (!within(limits)) throw ContractError("PIDGains outside gain limits");
}

bool PIDGains::within(const GainLimits& l) const {
  auto in = [](const std::vector<double>& v, double lo, double hi) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x >= lo && x <= hi; });
  };
  return in(kp, l.kp_min, l.kp_max) && in(ki, l.ki_min, l.ki_max) && in(kd, l.kd_min, l.kd_max);
}

PIDGains clamp_gains(PIDGains g, const GainLimits& l) {
  for (auto& x : g.kp) x = std::clamp(x, l.kp_min, l.kp_max);
  for (auto& x : g.ki) x = std::clamp(x, l.ki_min, l.ki_max);
  for (auto& x : g.kd) x = std::clamp(x, l.kd_min, l.kd_max);
  return g;
}

PIDState reset(const PIDState& state) { return PIDState::zeros(state.integral.size()); }

void pid_step(const PIDGains& gains, PIDState& state, std::span<const double> error, double dt,
              std::span<double> command) {
  const std::size_t n = gains.n_joints();
  if (error.size() != n || command.size() != n || state.integral.size() != n ||
      state.prev_error.size() != n) {
    throw ShapeError("pid_step: error length must match gains");
  }
  if (!(dt > 0.0)) throw ContractError("pid_step: dt must be > 0");
  for (std::size_t i = 0; i < n; ++i) {
    const double e = error[i];
    if (!std::isfinite(e)) throw NumericError("pid_step: non-finite error");
    const double prev = state.initialized ? state.prev_error[i] : e;
    state.integral[i] =
        std::clamp(state.integral[i] + 0.5 * (e + prev) * dt, -kIntegralClamp, kIntegralClamp);
    const double derivative = (e - prev) / dt;
    command[i] = gains.kp[i] * e + gains.ki[i] * state.integral[i] + gains.kd[i] * derivative;
    state.prev_error[i] = e;
  }
  state.initialized = true;
}

std::vector<double> pid_step(const PIDGains& gains, PIDState& state,
                             std::span<const double> error, double dt) {
  std::vector<double> command(gains.n_joints());
  pid_step(gains, state, error, dt, command);
  return command;
}

ClosedLoop::ClosedLoop(const RobotModel& model, PIDGains gains, TrajectorySpec spec,
                       std::optional<DisturbanceProcess> disturbance)
    : model_(disturbance ? disturbance->effective_model() : model),
      gains_(std::move(gains)),
      spec_(std::move(spec)),
      disturbance_(std::move(disturbance)) {
  const std::size_t n = model_.n_joints();
  spec_.validate();
  if (gains_.n_joints() != n || spec_.n_joints() != n) {
    throw ShapeError("ClosedLoop: model, gains and trajectory joint counts differ");
  }
  pid_ = PIDState::zeros(n);
  ref_q_.resize(n);
  ref_qd_.resize(n);
  error_.assign(n, 0.0);
  command_.resize(n);
  external_.assign(n, 0.0);
  make_reference(spec_, 0, ref_q_, ref_qd_);
  state_ = PlantState{ref_q_, ref_qd_, 0.0};
}

bool ClosedLoop::step() {
  if (unstable_) return false;
  if (done()) throw RangeError("ClosedLoop::step past the end of the episode");
  make_reference(spec_, step_, ref_q_, ref_qd_);
  const std::size_t n = model_.n_joints();
  for (std::size_t i = 0; i < n; ++i) error_[i] = ref_q_[i] - state_.q[i];
  pid_step(gains_, pid_, error_, spec_.dt, command_);
  if (disturbance_) disturbance_->torque_at(step_, external_);
  step_plant_inplace(model_, state_, command_, external_, spec_.dt);
  ++step_;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(state_.q[i]) || !std::isfinite(state_.qd[i]) ||
        std::abs(state_.q[i]) > kInstabilityBound) {
      unstable_ = true;
    }
  }
  return !unstable_;
}

void to_json(nlohmann::json& j, const PIDGains& g) {
  j = nlohmann::json{{"kp", g.kp}, {"ki", g.ki}, {"kd", g.kd}};
}

void from_json(const nlohmann::json& j, PIDGains& g) {
  j.at("kp").get_to(g.kp);
  j.at("ki").get_to(g.ki);
  j.at("kd").get_to(g.kd);
  if (g.ki.size() != g.kp.size() || g.kd.size() != g.kp.size()) {
    throw ShapeError("PIDGains: kp, ki, kd lengths differ");
  }
}

void to_json(nlohmann::json& j, const GainLimits& g) {
  j = nlohmann::json{{"kp", {g.kp_min, g.kp_max}},
                     {"ki", {g.ki_min, g.ki_max}},
                     {"kd", {g.kd_min, g.kd_max}}};
}

void from_json(const nlohmann::json& j, GainLimits& g) {
  g.kp_min = j.at("kp").at(0).get<double>();
  g.kp_max = j.at("kp").at(1).get<double>();
  g.ki_min = j.at("ki").at(0).get<double>();
  g.ki_max = j.at("ki").at(1).get<double>();
  g.kd_min = j.at("kd").at(0).get<double>();
  g.kd_max = j.at("kd").at(1).get<double>();
  g.validate();
}

}  // namespace metapid
