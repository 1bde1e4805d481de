#include "metapid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "metapid/augment.hpp"
#include "metapid/errors.hpp"
#include "metapid/parallel.hpp"

namespace metapid {
namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;
constexpr std::uint64_t kTagEvalTrajectory = 0xE101;
constexpr std::uint64_t kTagCeilingOpt = 0xE102;

void require_series(const Eigen::MatrixXd& e, const char* op) {
  if (e.rows() == 0 || e.cols() == 0) {
    throw ContractError(std::string(op) + ": error series must be non-empty");
  }
}

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(v.size()));
  return m;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'", p.string());
  return out;
}

void close_out(std::ofstream& out, const std::filesystem::path& p) {
  out.flush();
  if (!out) throw IoError("failed writing '" + p.string() + "'", p.string());
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

nlohmann::json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

}  // namespace

double mae(const Eigen::MatrixXd& e) {
  require_series(e, "mae");
  return e.cwiseAbs().colwise().mean().mean() * kDeg;
}

double rmse(const Eigen::MatrixXd& e) {
  require_series(e, "rmse");
  return std::sqrt(e.rowwise().squaredNorm().mean()) * kDeg;
}

double max_error(const Eigen::MatrixXd& e) {
  require_series(e, "max_error");
  return e.rowwise().norm().maxCoeff() * kDeg;
}

double std_dev(const Eigen::MatrixXd& e) {
  require_series(e, "std_dev");
  const Eigen::VectorXd norms = e.rowwise().norm() * kDeg;
  const double mean = norms.mean();
  return std::sqrt((norms.array() - mean).square().mean());
}

std::vector<double> per_joint_mae(const Eigen::MatrixXd& e) {
  require_series(e, "per_joint_mae");
  const Eigen::RowVectorXd m = e.cwiseAbs().colwise().mean() * kDeg;
  return {m.data(), m.data() + m.size()};
}

double improvement_pct(double baseline, double adapted) {
  if (baseline == 0.0) return 0.0;
  return (baseline - adapted) / baseline * 100.0;
}

// ---------------------------------------------------------------------------

EpisodeResult run_episode(const RobotModel& model, const PIDGains& gains, const PolicyNet* policy,
                          DisturbanceKind scenario, const TrajectorySpec& spec, std::uint64_t seed,
                          std::size_t episode, const EpisodeOptions& opt) {
  PPOConfig env_cfg;
  env_cfg.episode_steps = spec.duration_steps;
  env_cfg.dt = spec.dt;
  env_cfg.decision_interval = std::min(opt.decision_interval, spec.duration_steps);
  env_cfg.limits = opt.limits;
  env_cfg.reward = opt.reward;

  AdaptEnv env(model, gains, DisturbanceScenario::of(scenario), env_cfg, seed);
  AdaptState state = env.reset(spec, seed, episode);
  const std::size_t n = model.n_joints();

  EpisodeResult r;
  r.model = model.name;
  r.scenario = scenario;
  r.seed = seed;
  r.episode = episode;
  std::vector<double> errors;
  errors.reserve(spec.duration_steps * n);
  Rng unused(0);
  while (true) {
    const AdaptAction a = policy ? policy_act(*policy, state, true, unused) : AdaptAction{};
    const AdaptEnv::StepResult step = env.step(a);
    errors.insert(errors.end(), env.window_errors().begin(), env.window_errors().end());
    r.reward_sum += step.reward;
    state = step.state;
    if (step.done) {
      r.unstable = step.unstable;
      break;
    }
  }

  if (r.unstable || errors.empty()) {
    r.unstable = true;
    r.per_joint_mae.assign(n, kPenaltyDeg);
    r.mae = r.rmse = r.max_error = kPenaltyDeg;
    r.std_dev = 0.0;
    return r;
  }
  const auto T = static_cast<Eigen::Index>(errors.size() / n);
  const Eigen::MatrixXd series =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          errors.data(), T, static_cast<Eigen::Index>(n));
  r.per_joint_mae = per_joint_mae(series);
  r.mae = mae(series);
  r.rmse = rmse(series);
  r.max_error = max_error(series);
  r.std_dev = std_dev(series);
  if (opt.record_trace) {
    const Eigen::VectorXd norms = series.rowwise().norm() * kDeg;
    r.error_norm_trace.assign(norms.data(), norms.data() + norms.size());
  }
  return r;
}

EvalConfig EvalConfig::paper_scale() {
  EvalConfig c;
  c.seeds.clear();
  for (std::uint64_t s = 0; s < 100; ++s) c.seeds.push_back(s);
  c.episodes_per_cell = 20;
  return c;
}

void EvalConfig::validate() const {
  if (seeds.empty() || episodes_per_cell == 0 || episode_steps == 0 || !(dt > 0)) {
    throw ConfigError("EvalConfig: seeds, episodes and steps must be non-empty/positive");
  }
  if (episode.decision_interval == 0) throw ConfigError("EvalConfig: decision_interval must be >= 1");
  episode.limits.validate();
}

TrajectorySpec evaluation_trajectory(std::size_t n, std::uint64_t seed, std::size_t episode,
                                     std::size_t steps, double dt) {
  Rng rng(derive_seed(seed, {kTagEvalTrajectory, episode}));
  return random_trajectory(n, steps, dt, rng);
}

std::vector<Aggregate> aggregate_cells(const std::vector<EpisodeResult>& cells, bool include_unstable) {
  using Key = std::tuple<std::string, std::string, DisturbanceKind>;
  std::vector<Key> order;
  std::map<Key, std::vector<const EpisodeResult*>> groups;
  for (const auto& c : cells) {
    Key k{c.model, c.controller_id, c.scenario};
    auto [it, fresh] = groups.try_emplace(k);
    if (fresh) order.push_back(k);
    it->second.push_back(&c);
  }
  std::vector<Aggregate> out;
  for (const auto& k : order) {
    Aggregate a;
    std::tie(a.model, a.controller_id, a.scenario) = k;
    std::vector<double> m, r, x, s;
    std::vector<double> joints;
    for (const EpisodeResult* c : groups[k]) {
      if (c->unstable) ++a.unstable;
      if (c->unstable && !include_unstable) continue;
      m.push_back(c->mae);
      r.push_back(c->rmse);
      x.push_back(c->max_error);
      s.push_back(c->std_dev);
      if (joints.empty()) joints.assign(c->per_joint_mae.size(), 0.0);
      for (std::size_t i = 0; i < joints.size() && i < c->per_joint_mae.size(); ++i) {
        joints[i] += c->per_joint_mae[i];
      }
    }
    a.count = m.size();
    a.mae = mean_std(m);
    a.rmse = mean_std(r);
    a.max_error = mean_std(x);
    a.std_dev = mean_std(s);
    for (auto& j : joints) j /= static_cast<double>(std::max<std::size_t>(1, a.count));
    a.per_joint_mae = std::move(joints);
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<Improvement> compute_improvements(const std::vector<Aggregate>& aggregates) {
  std::vector<Improvement> out;
  if (aggregates.empty()) return out;
  const std::string baseline = aggregates.front().controller_id;
  for (const auto& a : aggregates) {
    if (a.controller_id == baseline) continue;
    const auto b = std::find_if(aggregates.begin(), aggregates.end(), [&](const Aggregate& x) {
      return x.controller_id == baseline && x.model == a.model && x.scenario == a.scenario;
    });
    if (b == aggregates.end()) continue;
    Improvement imp;
    imp.model = a.model;
    imp.baseline_id = baseline;
    imp.controller_id = a.controller_id;
    imp.scenario = a.scenario;
    imp.mae_pct = improvement_pct(b->mae.mean, a.mae.mean);
    imp.rmse_pct = improvement_pct(b->rmse.mean, a.rmse.mean);
    imp.max_pct = improvement_pct(b->max_error.mean, a.max_error.mean);
    imp.std_pct = improvement_pct(b->std_dev.mean, a.std_dev.mean);
    for (std::size_t i = 0; i < a.per_joint_mae.size() && i < b->per_joint_mae.size(); ++i) {
      imp.per_joint_pct.push_back(improvement_pct(b->per_joint_mae[i], a.per_joint_mae[i]));
    }
    out.push_back(std::move(imp));
  }
  return out;
}

EvalReport evaluate_matrix(const std::vector<RobotModel>& models,
                           const std::vector<Controller>& controllers,
                           const std::vector<DisturbanceKind>& scenarios, const EvalConfig& cfg) {
  cfg.validate();
  if (models.empty() || controllers.empty() || scenarios.empty()) {
    throw ConfigError("evaluate_matrix: every axis must be non-empty");
  }
  for (const auto& m : models) {
    m.validate();
    for (const auto& c : controllers) {
      if (c.gains.n_joints() != m.n_joints()) {
        throw ConfigError("controller '" + c.id + "' has " + std::to_string(c.gains.n_joints()) +
                          " joints but robot '" + m.name + "' has " + std::to_string(m.n_joints()));
      }
    }
  }

  struct Task {
    std::size_t model, controller, scenario, seed, episode;
  };
  std::vector<Task> tasks;
  for (std::size_t m = 0; m < models.size(); ++m)
    for (std::size_t c = 0; c < controllers.size(); ++c)
      for (std::size_t s = 0; s < scenarios.size(); ++s)
        for (std::size_t k = 0; k < cfg.seeds.size(); ++k)
          for (std::size_t e = 0; e < cfg.episodes_per_cell; ++e) tasks.push_back({m, c, s, k, e});

  EvalReport report;
  report.include_unstable = cfg.include_unstable;
  report.cells.resize(tasks.size());
  parallel_for(tasks.size(), cfg.jobs, [&](std::size_t i) {
    const Task& t = tasks[i];
    const RobotModel& model = models[t.model];
    const Controller& ctl = controllers[t.controller];
    const std::uint64_t seed = cfg.seeds[t.seed];
    const TrajectorySpec spec =
        evaluation_trajectory(model.n_joints(), seed, t.episode, cfg.episode_steps, cfg.dt);
    EpisodeOptions opt = cfg.episode;
    opt.record_trace = (t.seed == 0 && t.episode == 0);
    EpisodeResult r = run_episode(model, ctl.gains, ctl.policy ? &*ctl.policy : nullptr,
                                  scenarios[t.scenario], spec, seed, t.episode, opt);
    r.controller_id = ctl.id;
    report.cells[i] = std::move(r);
  });
  report.aggregates = aggregate_cells(report.cells, cfg.include_unstable);
  report.improvements = compute_improvements(report.aggregates);
  return report;
}

// ---------------------------------------------------------------------------

void write_report(const EvalReport& report, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root / "plotdata", ec);
  if (ec) throw IoError("cannot create report directory '" + dir + "': " + ec.message(), dir);

  const fs::path cells_path = root / "cells.csv";
  auto cells = open_out(cells_path);
  cells << "controller,scenario,seed,episode,mae_deg,rmse_deg,max_deg,std_deg,reward_sum,unstable,model\n";
  for (const auto& c : report.cells) {
    cells << c.controller_id << ',' << to_string(c.scenario) << ',' << c.seed << ',' << c.episode << ','
          << num(c.mae) << ',' << num(c.rmse) << ',' << num(c.max_error) << ',' << num(c.std_dev) << ','
          << num(c.reward_sum) << ',' << (c.unstable ? 1 : 0) << ',' << c.model << '\n';
  }
  close_out(cells, cells_path);

  nlohmann::json aggs = nlohmann::json::array();
  for (const auto& a : report.aggregates) {
    aggs.push_back({{"model", a.model},
                    {"controller", a.controller_id},
                    {"scenario", std::string(to_string(a.scenario))},
                    {"count", a.count},
                    {"unstable", a.unstable},
                    {"mae_deg", mean_std_json(a.mae)},
                    {"rmse_deg", mean_std_json(a.rmse)},
                    {"max_deg", mean_std_json(a.max_error)},
                    {"std_deg", mean_std_json(a.std_dev)},
                    {"per_joint_mae_deg", a.per_joint_mae}});
  }
  nlohmann::json imps = nlohmann::json::array();
  for (const auto& i : report.improvements) {
    imps.push_back({{"model", i.model},
                    {"baseline", i.baseline_id},
                    {"controller", i.controller_id},
                    {"scenario", std::string(to_string(i.scenario))},
                    {"mae_pct", i.mae_pct},
                    {"rmse_pct", i.rmse_pct},
                    {"max_pct", i.max_pct},
                    {"std_pct", i.std_pct},
                    {"per_joint_mae_pct", i.per_joint_pct}});
  }
  const nlohmann::json summary{{"schema_version", kSummarySchemaVersion},
                               {"kind", "eval_summary"},
                               {"cells", report.cells.size()},
                               {"include_unstable", report.include_unstable},
                               {"aggregates", std::move(aggs)},
                               {"improvements", std::move(imps)}};
  const fs::path summary_path = root / "summary.json";
  auto sj = open_out(summary_path);
  sj << summary.dump(2) << '\n';
  close_out(sj, summary_path);

  const fs::path trace_path = root / "plotdata" / "error_vs_time.csv";
  auto tr = open_out(trace_path);
  tr << "model,controller,scenario,seed,step,error_norm_deg\n";
  for (const auto& c : report.cells) {
    for (std::size_t t = 0; t < c.error_norm_trace.size(); ++t) {
      tr << c.model << ',' << c.controller_id << ',' << to_string(c.scenario) << ',' << c.seed << ','
         << t << ',' << num(c.error_norm_trace[t]) << '\n';
    }
  }
  close_out(tr, trace_path);

  const fs::path bars_path = root / "plotdata" / "per_joint_mae.csv";
  auto bars = open_out(bars_path);
  bars << "model,controller,scenario,joint,mae_deg\n";
  for (const auto& a : report.aggregates) {
    for (std::size_t j = 0; j < a.per_joint_mae.size(); ++j) {
      bars << a.model << ',' << a.controller_id << ',' << to_string(a.scenario) << ',' << j + 1 << ','
           << num(a.per_joint_mae[j]) << '\n';
    }
  }
  close_out(bars, bars_path);
}

std::vector<EpisodeResult> read_cells_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'", path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": missing header", 1);
  const auto header = split_csv(line);
  auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError(path + ": missing column '" + name + "'", 1);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_ctl = col("controller"), c_sc = col("scenario"), c_seed = col("seed"),
                    c_ep = col("episode"), c_mae = col("mae_deg"), c_rmse = col("rmse_deg"),
                    c_max = col("max_deg"), c_std = col("std_deg"), c_rew = col("reward_sum"),
                    c_un = col("unstable");
  const auto model_it = std::find(header.begin(), header.end(), "model");

  std::vector<EpisodeResult> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != header.size()) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                           std::to_string(header.size()) + " fields",
                       line_no);
    }
    try {
      EpisodeResult r;
      r.controller_id = f[c_ctl];
      r.scenario = disturbance_kind_from_string(f[c_sc]);
      r.seed = std::stoull(f[c_seed]);
      r.episode = std::stoull(f[c_ep]);
      r.mae = std::stod(f[c_mae]);
      r.rmse = std::stod(f[c_rmse]);
      r.max_error = std::stod(f[c_max]);
      r.std_dev = std::stod(f[c_std]);
      r.reward_sum = std::stod(f[c_rew]);
      r.unstable = f[c_un] == "1";
      if (model_it != header.end()) r.model = f[static_cast<std::size_t>(model_it - header.begin())];
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

CeilingSummary ceiling_experiment(const CeilingConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("ceiling_experiment: at least one seed is required");
  if (!(cfg.detune_factor > 0.0)) throw ConfigError("ceiling_experiment: detune_factor must be > 0");
  const RobotModel robot = robot_preset(cfg.robot);
  const std::size_t n = robot.n_joints();

  CeilingSummary summary;
  Rng opt_rng(derive_seed(cfg.seeds.front(), {kTagCeilingOpt}));
  HybridConfig hybrid = cfg.hybrid;
  hybrid.de.jobs = cfg.jobs;
  const OptResult opt = hybrid_optimize(robot, test_trajectory(n), hybrid, opt_rng);
  summary.optimal_gains = clamp_gains(opt.gains, cfg.ppo.limits);
  summary.optimal_cost_deg = opt.cost_deg;

  PIDGains detuned = summary.optimal_gains;
  detuned.kp[0] = std::max(cfg.ppo.limits.kp_min, detuned.kp[0] * cfg.detune_factor);

  auto run_condition = [&](const std::string& name, const PIDGains& gains) {
    CeilingCondition cond;
    cond.name = name;
    cond.mean_per_joint_pct.assign(n, 0.0);
    for (std::uint64_t seed : cfg.seeds) {
      PPOConfig ppo = cfg.ppo;
      ppo.seed = seed;
      ppo.jobs = cfg.jobs;
      RLResult rl = train_rl(robot, gains, DisturbanceScenario::of(DisturbanceKind::None), ppo);

      EvalConfig ev;
      ev.seeds = {seed};
      ev.episodes_per_cell = cfg.eval_episodes;
      ev.episode_steps = ppo.episode_steps;
      ev.dt = ppo.dt;
      ev.episode.decision_interval = ppo.decision_interval;
      ev.episode.limits = ppo.limits;
      ev.episode.reward = ppo.reward;
      ev.jobs = cfg.jobs;
      const EvalReport rep = evaluate_matrix(
          {robot}, {Controller{"baseline", gains, std::nullopt}, Controller{"adapted", gains, rl.policy}},
          {DisturbanceKind::None}, ev);

      CeilingRun run;
      run.seed = seed;
      run.gains = gains;
      run.baseline_mae = rep.aggregates.at(0).mae.mean;
      run.adapted_mae = rep.aggregates.at(1).mae.mean;
      run.improvement_pct = rep.improvements.at(0).mae_pct;
      run.baseline_per_joint = rep.aggregates.at(0).per_joint_mae;
      run.adapted_per_joint = rep.aggregates.at(1).per_joint_mae;
      run.per_joint_pct = rep.improvements.at(0).per_joint_pct;
      run.log = std::move(rl.log);
      cond.mean_improvement_pct += run.improvement_pct;
      cond.mean_baseline_mae += run.baseline_mae;
      for (std::size_t j = 0; j < n; ++j) cond.mean_per_joint_pct[j] += run.per_joint_pct[j];
      cond.runs.push_back(std::move(run));
    }
    const double k = static_cast<double>(cfg.seeds.size());
    cond.mean_improvement_pct /= k;
    cond.mean_baseline_mae /= k;
    for (auto& v : cond.mean_per_joint_pct) v /= k;
    return cond;
  };

  summary.heterogeneous = run_condition("heterogeneous", detuned);
  summary.uniform = run_condition("uniform", summary.optimal_gains);
  summary.gap_pct = summary.heterogeneous.mean_improvement_pct - summary.uniform.mean_improvement_pct;
  return summary;
}

void write_ceiling(const CeilingSummary& s, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message(), dir);

  auto condition_json = [](const CeilingCondition& c) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : c.runs) {
      runs.push_back({{"seed", r.seed},
                      {"gains", r.gains},
                      {"baseline_mae_deg", r.baseline_mae},
                      {"adapted_mae_deg", r.adapted_mae},
                      {"improvement_pct", r.improvement_pct},
                      {"baseline_per_joint_mae_deg", r.baseline_per_joint},
                      {"adapted_per_joint_mae_deg", r.adapted_per_joint},
                      {"per_joint_improvement_pct", r.per_joint_pct}});
    }
    return nlohmann::json{{"name", c.name},
                          {"mean_improvement_pct", c.mean_improvement_pct},
                          {"mean_baseline_mae_deg", c.mean_baseline_mae},
                          {"mean_per_joint_improvement_pct", c.mean_per_joint_pct},
                          {"runs", std::move(runs)}};
  };
  const nlohmann::json j{{"schema_version", kSummarySchemaVersion},
                         {"kind", "ceiling"},
                         {"optimal_gains", s.optimal_gains},
                         {"optimal_cost_deg", s.optimal_cost_deg},
                         {"heterogeneous", condition_json(s.heterogeneous)},
                         {"uniform", condition_json(s.uniform)},
                         {"gap_pct", s.gap_pct}};
  const fs::path path = root / "ceiling.json";
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  close_out(out, path);

  for (const CeilingCondition* c : {&s.heterogeneous, &s.uniform}) {
    for (const auto& r : c->runs) {
      write_train_log(r.log, (root / ("train_log_" + c->name + "_seed" + std::to_string(r.seed) + ".csv")).string());
    }
  }
}

}  // namespace metapid
