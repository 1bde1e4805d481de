/**
 * @file rladapt.hpp
 * @brief Online gain adaptation with PPO.
 *
 * One environment step is one adaptation decision: the policy picks global
 * relative changes (ΔKp, ΔKd), the new gains are held for
 * `decision_interval` control steps, and the reward is the mean per-step
 * reward over that window. An episode is `episode_steps / decision_interval`
 * decisions long.
 */
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "metapid/mlp.hpp"
#include "metapid/pid.hpp"
#include "metapid/plant.hpp"
#include "metapid/rng.hpp"

namespace metapid {

inline constexpr std::size_t kStateDim = 23;
inline constexpr std::size_t kStateJoints = 9;
inline constexpr std::size_t kActionDim = 2;
inline constexpr double kMaxAdjust = 0.2;
inline constexpr double kRewardMin = -100.0;
inline constexpr double kRewardMax = 10.0;
inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 1.0;
inline constexpr int kPolicySchemaVersion = 1;

/**
 * [e_1..e_9, q̇_1..q̇_9, mean normalized Kp, mean normalized Kd,
 *  episode-time fraction, mean amplitude, mean frequency].
 * Robots with fewer than 9 joints are zero padded; larger robots keep the
 * 9 joints with the largest |e|, in joint order.
 */
using AdaptState = std::array<double, kStateDim>;

struct AdaptAction {
  double delta_kp = 0.0;
  double delta_kd = 0.0;

  bool operator==(const AdaptAction&) const = default;
};

enum class RewardKind : std::uint8_t {
  Tracking,  // -10‖e‖/√n - 0.1‖q̇‖/√n - 0.1‖a‖, clipped
  Shaped,    // position/velocity/jerk/gain-change terms with bonus and failure
};

std::string_view to_string(RewardKind kind);
RewardKind reward_kind_from_string(std::string_view name);

AdaptState build_state(std::span<const double> error, std::span<const double> qd,
                       const PIDGains& gains, const GainLimits& limits, double time_fraction,
                       double mean_amplitude, double mean_frequency);

double compute_reward(std::span<const double> error, std::span<const double> qd,
                      const AdaptAction& action, std::size_t n_joints);

// Kp *= 1 + ΔKp and Kd *= 1 + ΔKd on every joint, then clamped to limits.
PIDGains apply_action(const PIDGains& gains, const AdaptAction& action, const GainLimits& limits = {});

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// `values` carries one bootstrap entry past the last reward.
GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const double> dones, double gamma, double lambda);

struct PPOConfig {
  std::size_t total_timesteps = 50'000;
  std::size_t n_envs = 8;
  std::size_t steps_per_env = 2048;
  std::size_t batch_size = 256;
  std::size_t epochs = 10;
  double clip_range = 0.2;
  double learning_rate = 1e-4;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double entropy_coef = 0.02;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double log_std_init = 0.0;
  std::size_t hidden = 256;
  std::size_t decision_interval = 50;    // control steps per decision
  std::size_t episode_steps = kDefaultEpisodeSteps;
  double dt = kDefaultDt;
  RewardKind reward = RewardKind::Tracking;
  GainLimits limits;
  std::uint64_t seed = 0;
  int jobs = 1;

  void validate() const;
  std::size_t iterations() const;
  std::size_t decisions_per_episode() const {
    return (episode_steps + decision_interval - 1) / decision_interval;
  }
};

// Gaussian policy over a pre-squash variable u; the action is 0.2 tanh(u).
struct PolicyNet {
  Mlp actor;   // 23 -> h -> h -> 2 (mean of u)
  Mlp critic;  // 23 -> h -> h -> 1
  Eigen::Vector2d log_std = Eigen::Vector2d::Zero();

  static PolicyNet create(std::size_t hidden, double log_std_init, Rng& rng);
  // All weights zero: the deterministic action is (0, 0).
  static PolicyNet zeros(std::size_t hidden = 256);

  Eigen::Index parameter_count() const;
  Eigen::VectorXd flat() const;
  void set_flat(const Eigen::VectorXd& p);
  double value(const AdaptState& s) const;

  bool operator==(const PolicyNet&) const = default;
};

AdaptAction squash(const Eigen::Vector2d& u);

// Deterministic mode returns 0.2 tanh(mean) and never touches `rng`.
AdaptAction policy_act(const PolicyNet& policy, const AdaptState& state, bool deterministic, Rng& rng);

/// Single environment: plant, PID and disturbance for consecutive episodes.
class AdaptEnv {
 public:
  struct StepResult {
    AdaptState state;
    double reward = 0.0;
    bool done = false;
    bool unstable = false;
  };

  AdaptEnv(RobotModel model, PIDGains init_gains, DisturbanceScenario scenario,
           const PPOConfig& cfg, std::uint64_t seed);

  // Starts the next episode on a freshly drawn random trajectory.
  AdaptState reset();
  // Starts an episode on a given trajectory and disturbance realisation.
  AdaptState reset(const TrajectorySpec& spec, std::uint64_t disturbance_seed, std::uint64_t episode);

  StepResult step(const AdaptAction& action);

  const ClosedLoop& loop() const { return *loop_; }
  // Errors of every control step of the last decision, row-major (steps x n).
  const std::vector<double>& window_errors() const { return window_errors_; }
  std::size_t decision_index() const { return decision_; }
  std::size_t episodes_started() const { return episode_; }

 private:
  AdaptState current_state() const;
  double shaped_reward(const PIDGains& before, const PIDGains& after);

  RobotModel model_;
  PIDGains init_gains_;
  DisturbanceScenario scenario_;
  PPOConfig cfg_;
  std::uint64_t seed_;
  Rng rng_;
  std::optional<ClosedLoop> loop_;
  std::size_t decision_ = 0;
  std::size_t episode_ = 0;
  std::vector<double> window_errors_;
  std::vector<double> prev_qd_, prev_qdd_;
};

// Flattened rollout of all environments, env-major order.
struct RolloutBatch {
  Eigen::MatrixXd states;   // 23 x N
  Eigen::MatrixXd actions;  // 2 x N, pre-squash u
  Eigen::VectorXd log_probs;
  Eigen::VectorXd values;
  Eigen::VectorXd advantages;
  Eigen::VectorXd returns;

  Eigen::Index size() const { return states.cols(); }
};

struct PPODiagnostics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;  // after clipping, mean over minibatches
  double max_grad_norm = 0.0;
  double approx_kl = 0.0;

  bool operator==(const PPODiagnostics&) const = default;
};

// Log-density of u under the policy at `state`.
double log_prob(const PolicyNet& policy, const Eigen::VectorXd& state, const Eigen::Vector2d& u);

// (x - mean) / std with the population std; all zeros when std is 0.
Eigen::VectorXd standardize(const Eigen::VectorXd& x);

PPODiagnostics ppo_update(PolicyNet& policy, Adam& optimizer, const RolloutBatch& batch,
                          const PPOConfig& cfg, std::uint64_t update_seed);

struct TrainLogRow {
  std::size_t iteration = 0;
  std::size_t timesteps = 0;
  double mean_ep_reward = 0.0;
  std::size_t episodes = 0;
  PPODiagnostics diag;

  bool operator==(const TrainLogRow&) const = default;
};

struct RLResult {
  PolicyNet policy;
  std::vector<TrainLogRow> log;
};

using IterationFn = std::function<void(const TrainLogRow&)>;

/**
 * PPO training. Every iteration each of the n_envs environments advances
 * steps_per_env decisions (episodes carry over between iterations), GAE is
 * computed per environment and the policy is updated for `epochs` passes of
 * shuffled minibatches. Results do not depend on cfg.jobs.
 */
RLResult train_rl(const RobotModel& model, const PIDGains& init_gains,
                  const DisturbanceScenario& scenario, const PPOConfig& cfg,
                  const IterationFn& on_iteration = {});

void save_policy(const PolicyNet& policy, const std::string& path);
PolicyNet load_policy(const std::string& path);
void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path);

void to_json(nlohmann::json& j, const PolicyNet& p);
void from_json(const nlohmann::json& j, PolicyNet& p);
void to_json(nlohmann::json& j, const PPOConfig& c);
void from_json(const nlohmann::json& j, PPOConfig& c);

}  // namespace metapid
