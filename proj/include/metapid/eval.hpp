/**
 * @file eval.hpp
 * @brief Tracking metrics, the controller x scenario x seed evaluation
 *        matrix, improvement reporting and the ceiling-effect experiment.
 *
 * Error series are T x n matrices in radians (rows are time steps); all
 * metrics are reported in degrees.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "metapid/optimizer.hpp"
#include "metapid/pid.hpp"
#include "metapid/plant.hpp"
#include "metapid/rladapt.hpp"

namespace metapid {

inline constexpr double kPenaltyDeg = 180.0;
inline constexpr int kSummarySchemaVersion = 1;

// (1/n) Σ_i (1/T) Σ_t |e_i(t)|
double mae(const Eigen::MatrixXd& errors);
// sqrt((1/T) Σ_t ‖e(t)‖²)
double rmse(const Eigen::MatrixXd& errors);
// max_t ‖e(t)‖
double max_error(const Eigen::MatrixXd& errors);
// Population standard deviation of ‖e(t)‖ over t.
double std_dev(const Eigen::MatrixXd& errors);
// (1/T) Σ_t |e_i(t)| per joint.
std::vector<double> per_joint_mae(const Eigen::MatrixXd& errors);

// (baseline - adapted) / baseline * 100; 0 when the baseline is 0.
double improvement_pct(double baseline, double adapted);

struct EpisodeResult {
  std::string model;
  std::string controller_id;
  DisturbanceKind scenario = DisturbanceKind::None;
  std::uint64_t seed = 0;
  std::size_t episode = 0;
  std::vector<double> per_joint_mae;  // degrees
  double mae = 0.0;
  double rmse = 0.0;
  double max_error = 0.0;
  double std_dev = 0.0;
  double reward_sum = 0.0;
  bool unstable = false;
  std::vector<double> error_norm_trace;  // ‖e(t)‖ in degrees, when requested

  bool operator==(const EpisodeResult&) const = default;
};

struct EpisodeOptions {
  std::size_t decision_interval = 50;
  GainLimits limits;
  RewardKind reward = RewardKind::Tracking;
  bool record_trace = false;
};

/**
 * Closed-loop episode from `gains`. With a policy, its deterministic action
 * is applied every decision interval; without one the gains stay fixed.
 * Unstable episodes get 180° for mae, rmse and max (std 0) and are flagged.
 */
EpisodeResult run_episode(const RobotModel& model, const PIDGains& gains, const PolicyNet* policy,
                          DisturbanceKind scenario, const TrajectorySpec& spec, std::uint64_t seed,
                          std::size_t episode, const EpisodeOptions& options = {});

struct Controller {
  std::string id;
  PIDGains gains;
  std::optional<PolicyNet> policy;
};

struct EvalConfig {
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::size_t episodes_per_cell = 3;
  std::size_t episode_steps = kDefaultEpisodeSteps;
  double dt = kDefaultDt;
  EpisodeOptions episode;
  bool include_unstable = true;
  int jobs = 1;

  // 100 seeds x 20 episodes.
  static EvalConfig paper_scale();
  void validate() const;
};

// Reference trajectory shared by every controller and scenario for one
// (seed, episode) so comparisons are paired.
TrajectorySpec evaluation_trajectory(std::size_t n_joints, std::uint64_t seed, std::size_t episode,
                                     std::size_t steps = kDefaultEpisodeSteps, double dt = kDefaultDt);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  bool operator==(const MeanStd&) const = default;
};

struct Aggregate {
  std::string model;
  std::string controller_id;
  DisturbanceKind scenario = DisturbanceKind::None;
  std::size_t count = 0;
  std::size_t unstable = 0;
  MeanStd mae, rmse, max_error, std_dev;
  std::vector<double> per_joint_mae;  // mean over cells

  bool operator==(const Aggregate&) const = default;
};

struct Improvement {
  std::string model;
  std::string baseline_id;
  std::string controller_id;
  DisturbanceKind scenario = DisturbanceKind::None;
  double mae_pct = 0.0;
  double rmse_pct = 0.0;
  double max_pct = 0.0;
  double std_pct = 0.0;
  std::vector<double> per_joint_pct;

  bool operator==(const Improvement&) const = default;
};

struct EvalReport {
  std::vector<EpisodeResult> cells;
  std::vector<Aggregate> aggregates;
  std::vector<Improvement> improvements;
  bool include_unstable = true;

  bool operator==(const EvalReport&) const = default;
};

/// Mean and population std per (model, controller, scenario); unstable
/// cells are skipped when `include_unstable` is false.
std::vector<Aggregate> aggregate_cells(const std::vector<EpisodeResult>& cells, bool include_unstable);
/// Every controller against the first one, per model and scenario.
std::vector<Improvement> compute_improvements(const std::vector<Aggregate>& aggregates);

/**
 * Cartesian product models x controllers x scenarios x seeds x episodes.
 * Cells are ordered by those axes (in the given order) regardless of jobs;
 * the first controller is the baseline for improvements.
 */
EvalReport evaluate_matrix(const std::vector<RobotModel>& models,
                           const std::vector<Controller>& controllers,
                           const std::vector<DisturbanceKind>& scenarios, const EvalConfig& cfg);

/**
 * cells.csv, summary.json and plotdata/{error_vs_time,per_joint_mae}.csv
 * under `dir` (created if missing).
 */
void write_report(const EvalReport& report, const std::string& dir);

// Reads cells.csv back; used to recompute summaries and by the report command.
std::vector<EpisodeResult> read_cells_csv(const std::string& path);

// ---------------------------------------------------------------------------

struct CeilingConfig {
  std::vector<std::uint64_t> seeds = {0};
  std::string robot = "toy2";
  double detune_factor = 0.5;  // applied to joint 1's Kp
  HybridConfig hybrid;
  PPOConfig ppo;
  std::size_t eval_episodes = 3;
  int jobs = 1;
};

struct CeilingRun {
  std::uint64_t seed = 0;
  PIDGains gains;
  double baseline_mae = 0.0;
  double adapted_mae = 0.0;
  double improvement_pct = 0.0;
  std::vector<double> baseline_per_joint;
  std::vector<double> adapted_per_joint;
  std::vector<double> per_joint_pct;
  std::vector<TrainLogRow> log;
};

struct CeilingCondition {
  std::string name;  // "heterogeneous" or "uniform"
  std::vector<CeilingRun> runs;
  double mean_improvement_pct = 0.0;
  double mean_baseline_mae = 0.0;
  std::vector<double> mean_per_joint_pct;
};

struct CeilingSummary {
  PIDGains optimal_gains;
  double optimal_cost_deg = 0.0;
  CeilingCondition heterogeneous;  // detuned joint 1
  CeilingCondition uniform;        // hybrid-optimized
  double gap_pct = 0.0;            // heterogeneous - uniform mean improvement
};

/**
 * Two conditions on the same robot: (A) optimized gains with joint 1's Kp
 * detuned, (B) the optimized gains. PPO is trained per condition and seed;
 * baseline (fixed gains) and adapted (policy) MAE are compared on paired
 * evaluation episodes.
 */
CeilingSummary ceiling_experiment(const CeilingConfig& cfg);

void write_ceiling(const CeilingSummary& summary, const std::string& dir);

}  // namespace metapid
