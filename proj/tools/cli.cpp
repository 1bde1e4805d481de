#include "metapid/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metapid/augment.hpp"
#include "metapid/errors.hpp"
#include "metapid/eval.hpp"
#include "metapid/metanet.hpp"
#include "metapid/parallel.hpp"
#include "metapid/rladapt.hpp"

namespace metapid::cli {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr std::uint64_t kTagMetaInit = 0xC101;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  int jobs = 0;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file; flags given on the command line win");
  c.seed_opt = sub->add_option("--seed", c.seed, "Global seed (default 0)");
  c.out_opt = sub->add_option("--out", c.out, "Output path");
  sub->add_option("--jobs", c.jobs, "Worker threads (default: available parallelism)");
}

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

json load_config(const std::string& path, const std::set<std::string>& known) {
  if (path.empty()) return json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path + "'", path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  check_keys(j, known, "config '" + path + "'");
  return j;
}

// Seeds the merged view: config file first, then the shared flags.
json merge_common(json cfg, const Common& c) {
  if (c.seed_opt->count() > 0) cfg["seed"] = c.seed;
  if (c.out_opt->count() > 0) cfg["out"] = c.out;
  return cfg;
}

std::string require_out(const json& cfg) {
  const std::string out = cfg.value("out", std::string());
  if (out.empty()) throw ConfigError("--out is required");
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'", path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'", path.string());
}

void ensure_parent(const std::string& file) {
  const fs::path parent = fs::path(file).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory '" + parent.string() + "'", parent.string());
}

// Resolved configuration next to a single-file output.
void write_resolved_for_file(const std::string& out, const json& resolved) {
  write_json(fs::path(out + ".resolved_config.json"), resolved);
}

json interval_json(const Interval& i) { return json::array({i.lo, i.hi}); }

Interval interval_from(const json& j, const char* name) {
  if (!j.is_array() || j.size() != 2) throw ConfigError(std::string("ranges.") + name + " must be [lo, hi]");
  return {j[0].get<double>(), j[1].get<double>()};
}

PerturbationRanges ranges_from(const json& j, PerturbationRanges r) {
  check_keys(j, {"mass", "length", "inertia", "friction", "damping"}, "ranges");
  if (j.contains("mass")) r.mass = interval_from(j["mass"], "mass");
  if (j.contains("length")) r.length = interval_from(j["length"], "length");
  if (j.contains("inertia")) r.inertia = interval_from(j["inertia"], "inertia");
  if (j.contains("friction")) r.friction = interval_from(j["friction"], "friction");
  if (j.contains("damping")) r.damping = interval_from(j["damping"], "damping");
  r.validate();
  return r;
}

json ranges_json(const PerturbationRanges& r) {
  return {{"mass", interval_json(r.mass)},
          {"length", interval_json(r.length)},
          {"inertia", interval_json(r.inertia)},
          {"friction", interval_json(r.friction)},
          {"damping", interval_json(r.damping)}};
}

DEConfig de_from(const json& j, DEConfig d) {
  check_keys(j, {"population", "generations", "F", "CR"}, "de");
  d.population = j.value("population", d.population);
  d.generations = j.value("generations", d.generations);
  d.F = j.value("F", d.F);
  d.CR = j.value("CR", d.CR);
  d.validate();
  return d;
}

json de_json(const DEConfig& d) {
  return {{"population", d.population}, {"generations", d.generations}, {"F", d.F}, {"CR", d.CR}};
}

NMConfig nm_from(const json& j, NMConfig n) {
  check_keys(j, {"iterations", "reflection", "expansion", "contraction", "shrink", "initial_step"}, "nm");
  n.iterations = j.value("iterations", n.iterations);
  n.reflection = j.value("reflection", n.reflection);
  n.expansion = j.value("expansion", n.expansion);
  n.contraction = j.value("contraction", n.contraction);
  n.shrink = j.value("shrink", n.shrink);
  n.initial_step = j.value("initial_step", n.initial_step);
  return n;
}

json nm_json(const NMConfig& n) {
  return {{"iterations", n.iterations}, {"reflection", n.reflection},   {"expansion", n.expansion},
          {"contraction", n.contraction}, {"shrink", n.shrink}, {"initial_step", n.initial_step}};
}

TrainConfig train_from(const json& j, TrainConfig t) {
  check_keys(j,
             {"learning_rate", "weight_decay", "batch_size", "max_epochs", "early_stop_patience",
              "val_fraction"},
             "train");
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.early_stop_patience = j.value("early_stop_patience", t.early_stop_patience);
  t.val_fraction = j.value("val_fraction", t.val_fraction);
  return t;
}

json train_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay},
          {"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs},
          {"early_stop_patience", t.early_stop_patience},
          {"val_fraction", t.val_fraction},
          {"seed", t.seed}};
}

GainLimits limits_from(const json& j) {
  check_keys(j, {"kp_min", "kp_max", "ki_min", "ki_max", "kd_min", "kd_max"}, "limits");
  GainLimits l = j.get<GainLimits>();
  l.validate();
  return l;
}

std::vector<DisturbanceKind> scenarios_from(const std::vector<std::string>& names) {
  std::vector<DisturbanceKind> out;
  for (const auto& n : names) {
    if (n == "all") {
      out.assign(kAllDisturbanceKinds.begin(), kAllDisturbanceKinds.end());
      continue;
    }
    try {
      out.push_back(disturbance_kind_from_string(n));
    } catch (const std::exception&) {
      throw ConfigError("unknown scenario '" + n + "'");
    }
  }
  if (out.empty()) throw ConfigError("at least one scenario is required");
  return out;
}

PIDGains load_gains_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open gains file '" + path + "'", path);
  try {
    return json::parse(in).get<PIDGains>();
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what(), 0);
  }
}

// Initial gains from a metanet checkpoint or an explicit gains file.
PIDGains initial_gains(const json& cfg, const RobotModel& robot, std::ostream& err) {
  const std::string meta = cfg.value("meta", std::string());
  const std::string gains = cfg.value("gains", std::string());
  if (!meta.empty() && !gains.empty()) throw ConfigError("pass either --meta or --gains, not both");
  if (!meta.empty()) {
    const MetaNetwork net = load_metanet(meta);
    PIDGains g = predict_gains(net, robot);
    err << "meta-learned gains for " << robot.name << " from " << meta << '\n';
    return g;
  }
  if (!gains.empty()) {
    PIDGains g = load_gains_file(gains);
    if (g.n_joints() != robot.n_joints()) {
      throw DataError("gains file '" + gains + "' has " + std::to_string(g.n_joints()) +
                      " joints, robot has " + std::to_string(robot.n_joints()));
    }
    return g;
  }
  throw ConfigError("initial gains required: pass --meta CHECKPOINT or --gains FILE");
}

int jobs_of(const Common& c) { return resolve_jobs(c.jobs); }

// ---------------------------------------------------------------------------

struct AugmentArgs {
  Common c;
  std::vector<std::string> bases;
  std::size_t variants = 0;
  bool narrow_inertia = false;
};

void run_augment(AugmentArgs& a, CLI::App* sub, std::ostream& err) {
  json cfg = load_config(a.c.config, {"seed", "out", "bases", "variants", "narrow_inertia", "ranges",
                                      "de", "nm", "limits", "trajectory_steps", "dt"});
  cfg = merge_common(std::move(cfg), a.c);
  if (sub->count("--bases")) cfg["bases"] = a.bases;
  if (sub->count("--variants")) cfg["variants"] = a.variants;
  if (sub->count("--narrow-inertia")) cfg["narrow_inertia"] = a.narrow_inertia;
  const std::string out = require_out(cfg);

  AugmentConfig ac;
  ac.seed = cfg.value("seed", std::uint64_t{0});
  ac.variants_per_base = cfg.value("variants", ac.variants_per_base);
  const bool narrow = cfg.value("narrow_inertia", false);
  ac.ranges = ranges_from(cfg.value("ranges", json::object()),
                          narrow ? PerturbationRanges::narrow_inertia() : PerturbationRanges{});
  ac.hybrid.de = de_from(cfg.value("de", json::object()), ac.hybrid.de);
  ac.hybrid.nm = nm_from(cfg.value("nm", json::object()), ac.hybrid.nm);
  if (cfg.contains("limits")) ac.hybrid.limits = limits_from(cfg["limits"]);
  ac.trajectory_steps = cfg.value("trajectory_steps", ac.trajectory_steps);
  ac.dt = cfg.value("dt", ac.dt);
  ac.jobs = jobs_of(a.c);
  const auto names = cfg.value("bases", std::vector<std::string>{"toy2", "arm9", "quad12"});
  if (names.empty()) throw ConfigError("at least one base robot is required");

  std::vector<RobotModel> bases;
  for (const auto& n : names) bases.push_back(load_robot(n));
  err << "augment: " << bases.size() << " base(s) x " << ac.variants_per_base + 1 << " samples\n";
  const Dataset data = build_dataset(bases, ac);
  ensure_parent(out);
  save_dataset(data, out);
  const Dataset kept = filter_dataset(data);
  err << "augment: wrote " << data.size() << " samples to " << out << " (" << kept.size()
      << " within " << kDefaultQualityThresholdDeg << " deg)\n";

  write_resolved_for_file(out, {{"command", "augment"},
                                {"seed", ac.seed},
                                {"out", out},
                                {"bases", names},
                                {"variants", ac.variants_per_base},
                                {"narrow_inertia", narrow},
                                {"ranges", ranges_json(ac.ranges)},
                                {"de", de_json(ac.hybrid.de)},
                                {"nm", nm_json(ac.hybrid.nm)},
                                {"limits", ac.hybrid.limits},
                                {"trajectory_steps", ac.trajectory_steps},
                                {"dt", ac.dt}});
}

// ---------------------------------------------------------------------------

struct TrainMetaArgs {
  Common c;
  std::string data;
  std::size_t joints = 0;
  double threshold = kDefaultQualityThresholdDeg;
  std::size_t epochs = 0;
  std::size_t patience = 0;
};

void run_train_meta(TrainMetaArgs& a, CLI::App* sub, std::ostream& err) {
  json cfg = load_config(a.c.config, {"seed", "out", "data", "joints", "threshold", "train", "limits"});
  cfg = merge_common(std::move(cfg), a.c);
  if (sub->count("--data")) cfg["data"] = a.data;
  if (sub->count("--joints")) cfg["joints"] = a.joints;
  if (sub->count("--threshold")) cfg["threshold"] = a.threshold;
  json train_cfg = cfg.value("train", json::object());
  if (sub->count("--epochs")) train_cfg["max_epochs"] = a.epochs;
  if (sub->count("--patience")) train_cfg["early_stop_patience"] = a.patience;
  const std::string out = require_out(cfg);
  const std::string data_path = cfg.value("data", std::string());
  if (data_path.empty()) throw ConfigError("--data is required");

  TrainConfig tc = train_from(train_cfg, TrainConfig{});
  tc.seed = cfg.value("seed", std::uint64_t{0});
  const double threshold = cfg.value("threshold", kDefaultQualityThresholdDeg);
  const GainLimits limits = cfg.contains("limits") ? limits_from(cfg["limits"]) : GainLimits{};

  const Dataset all = load_dataset(data_path);
  Dataset kept = filter_dataset(all, threshold);
  std::size_t joints = cfg.value("joints", std::size_t{0});
  if (joints == 0) {
    std::set<std::size_t> counts;
    for (const auto& s : kept.samples) counts.insert(s.gains.n_joints());
    if (counts.size() > 1) {
      throw ConfigError("dataset '" + data_path + "' mixes joint counts; pass --joints N");
    }
    if (!counts.empty()) joints = *counts.begin();
  }
  Dataset selected;
  for (auto& s : kept.samples) {
    if (s.gains.n_joints() == joints) selected.samples.push_back(std::move(s));
  }
  if (selected.samples.empty()) {
    throw DataError("no samples with " + std::to_string(joints) + " joints and error <= " +
                    std::to_string(threshold) + " deg in '" + data_path + "'");
  }
  err << "train-meta: " << all.size() << " samples, " << selected.size() << " used (" << joints
      << " joints)\n";

  MetaNetwork net = init_network(joints, derive_seed(tc.seed, {kTagMetaInit}), limits);
  TrainResult r = train(std::move(net), selected, tc, [&](std::size_t epoch, double tl, double vl) {
    if (epoch % 25 == 0) err << "  epoch " << epoch << " train " << tl << " val " << vl << '\n';
  });
  ensure_parent(out);
  save_metanet(r.net, out);

  const std::string hist_path = out + ".history.csv";
  std::ofstream hist(hist_path, std::ios::binary);
  if (!hist) throw IoError("cannot write '" + hist_path + "'", hist_path);
  hist << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < r.history.train_loss.size(); ++e) {
    hist << e << ',' << json(r.history.train_loss[e]).dump() << ',' << json(r.history.val_loss[e]).dump()
         << '\n';
  }
  err << "train-meta: best val loss " << r.history.best_val_loss << " at epoch " << r.history.best_epoch
      << ", wrote " << out << '\n';

  write_resolved_for_file(out, {{"command", "train-meta"},
                                {"seed", tc.seed},
                                {"out", out},
                                {"data", data_path},
                                {"joints", joints},
                                {"threshold", threshold},
                                {"train", train_json(tc)},
                                {"limits", limits},
                                {"samples_used", selected.size()}});
}

// ---------------------------------------------------------------------------

struct TrainRlArgs {
  Common c;
  std::string robot, meta, gains, scenario;
  std::size_t timesteps = 0;
};

void run_train_rl(TrainRlArgs& a, CLI::App* sub, std::ostream& err) {
  json cfg = load_config(a.c.config, {"seed", "out", "robot", "meta", "gains", "scenario", "ppo"});
  cfg = merge_common(std::move(cfg), a.c);
  if (sub->count("--robot")) cfg["robot"] = a.robot;
  if (sub->count("--meta")) cfg["meta"] = a.meta;
  if (sub->count("--gains")) cfg["gains"] = a.gains;
  if (sub->count("--scenario")) cfg["scenario"] = a.scenario;
  const std::string out = require_out(cfg);

  PPOConfig ppo;
  if (cfg.contains("ppo")) cfg["ppo"].get_to(ppo);
  if (sub->count("--timesteps")) ppo.total_timesteps = a.timesteps;
  ppo.seed = cfg.value("seed", std::uint64_t{0});
  ppo.jobs = jobs_of(a.c);
  ppo.validate();
  const std::string scenario_name = cfg.value("scenario", std::string("none"));
  const DisturbanceKind scenario = scenarios_from({scenario_name}).front();
  const std::string robot_name = cfg.value("robot", std::string("toy2"));
  const RobotModel robot = load_robot(robot_name);
  const PIDGains init = initial_gains(cfg, robot, err);

  err << "train-rl: " << ppo.iterations() << " iteration(s) of " << ppo.n_envs * ppo.steps_per_env
      << " decisions\n";
  const RLResult r = train_rl(robot, init, DisturbanceScenario::of(scenario), ppo,
                              [&](const TrainLogRow& row) {
                                err << "  iteration " << row.iteration << " mean episode reward "
                                    << row.mean_ep_reward << '\n';
                              });
  ensure_parent(out);
  save_policy(r.policy, out);
  write_train_log(r.log, out + ".log.csv");
  err << "train-rl: wrote " << out << '\n';

  json ppo_json = ppo;
  write_resolved_for_file(out, {{"command", "train-rl"},
                                {"seed", ppo.seed},
                                {"out", out},
                                {"robot", robot_name},
                                {"meta", cfg.value("meta", std::string())},
                                {"gains", cfg.value("gains", std::string())},
                                {"initial_gains", init},
                                {"scenario", scenario_name},
                                {"ppo", ppo_json}});
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  Common c;
  std::string robot, meta, gains, policy;
  std::vector<std::string> scenarios;
  std::size_t seeds = 0;
  std::size_t episodes = 0;
  bool paper_scale = false;
};

void run_eval(EvalArgs& a, CLI::App* sub, std::ostream& err) {
  json cfg = load_config(a.c.config, {"seed", "out", "robot", "meta", "gains", "policy", "scenarios",
                                      "seeds", "episodes", "paper_scale", "decision_interval",
                                      "include_unstable", "limits"});
  cfg = merge_common(std::move(cfg), a.c);
  if (sub->count("--robot")) cfg["robot"] = a.robot;
  if (sub->count("--meta")) cfg["meta"] = a.meta;
  if (sub->count("--gains")) cfg["gains"] = a.gains;
  if (sub->count("--policy")) cfg["policy"] = a.policy;
  if (sub->count("--scenarios")) cfg["scenarios"] = a.scenarios;
  if (sub->count("--seeds")) cfg["seeds"] = a.seeds;
  if (sub->count("--episodes")) cfg["episodes"] = a.episodes;
  if (sub->count("--paper-scale")) cfg["paper_scale"] = a.paper_scale;
  const std::string out = require_out(cfg);

  const bool paper = cfg.value("paper_scale", false);
  EvalConfig ev = paper ? EvalConfig::paper_scale() : EvalConfig{};
  const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  const std::size_t n_seeds = cfg.value("seeds", ev.seeds.size());
  ev.seeds.clear();
  for (std::size_t k = 0; k < n_seeds; ++k) ev.seeds.push_back(seed + k);
  ev.episodes_per_cell = cfg.value("episodes", ev.episodes_per_cell);
  ev.episode.decision_interval = cfg.value("decision_interval", ev.episode.decision_interval);
  if (cfg.contains("limits")) ev.episode.limits = limits_from(cfg["limits"]);
  ev.include_unstable = cfg.value("include_unstable", true);
  ev.jobs = jobs_of(a.c);
  const auto scenario_names = cfg.value("scenarios", std::vector<std::string>{"all"});
  const auto scenarios = scenarios_from(scenario_names);

  const std::string robot_name = cfg.value("robot", std::string("toy2"));
  const RobotModel robot = load_robot(robot_name);
  const PIDGains gains = initial_gains(cfg, robot, err);
  const std::string base_id = cfg.value("meta", std::string()).empty() ? "fixed" : "meta";
  std::vector<Controller> controllers{{base_id, gains, std::nullopt}};
  const std::string policy_path = cfg.value("policy", std::string());
  if (!policy_path.empty()) controllers.push_back({base_id + "+rl", gains, load_policy(policy_path)});

  err << "eval: " << controllers.size() << " controller(s) x " << scenarios.size() << " scenario(s) x "
      << ev.seeds.size() << " seed(s) x " << ev.episodes_per_cell << " episode(s)\n";
  const EvalReport report = evaluate_matrix({robot}, controllers, scenarios, ev);
  write_report(report, out);
  for (const auto& imp : report.improvements) {
    err << "  " << to_string(imp.scenario) << ": MAE improvement " << imp.mae_pct << " %\n";
  }

  std::vector<std::string> resolved_scenarios;
  for (auto s : scenarios) resolved_scenarios.emplace_back(to_string(s));
  write_json(fs::path(out) / "resolved_config.json",
             {{"command", "eval"},
              {"seed", seed},
              {"out", out},
              {"robot", robot_name},
              {"meta", cfg.value("meta", std::string())},
              {"gains", cfg.value("gains", std::string())},
              {"policy", policy_path},
              {"initial_gains", gains},
              {"scenarios", resolved_scenarios},
              {"seeds", ev.seeds},
              {"episodes", ev.episodes_per_cell},
              {"paper_scale", paper},
              {"decision_interval", ev.episode.decision_interval},
              {"include_unstable", ev.include_unstable},
              {"limits", ev.episode.limits}});
}

// ---------------------------------------------------------------------------

struct CeilingArgs {
  Common c;
  std::string robot;
  std::size_t seeds = 0;
  std::size_t timesteps = 0;
};

void run_ceiling(CeilingArgs& a, CLI::App* sub, std::ostream& err) {
  json cfg = load_config(a.c.config, {"seed", "out", "robot", "seeds", "timesteps", "detune_factor",
                                      "eval_episodes", "ppo", "de", "nm"});
  cfg = merge_common(std::move(cfg), a.c);
  if (sub->count("--robot")) cfg["robot"] = a.robot;
  if (sub->count("--seeds")) cfg["seeds"] = a.seeds;
  if (sub->count("--timesteps")) cfg["timesteps"] = a.timesteps;
  const std::string out = require_out(cfg);

  CeilingConfig cc;
  const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  const std::size_t n_seeds = cfg.value("seeds", std::size_t{1});
  if (n_seeds == 0) throw ConfigError("--seeds must be >= 1");
  cc.seeds.clear();
  for (std::size_t k = 0; k < n_seeds; ++k) cc.seeds.push_back(seed + k);
  cc.robot = cfg.value("robot", cc.robot);
  cc.detune_factor = cfg.value("detune_factor", cc.detune_factor);
  cc.eval_episodes = cfg.value("eval_episodes", cc.eval_episodes);
  if (cfg.contains("ppo")) cfg["ppo"].get_to(cc.ppo);
  cc.ppo.total_timesteps = cfg.value("timesteps", cc.ppo.total_timesteps);
  cc.ppo.validate();
  cc.hybrid.de = de_from(cfg.value("de", json::object()), cc.hybrid.de);
  cc.hybrid.nm = nm_from(cfg.value("nm", json::object()), cc.hybrid.nm);
  cc.jobs = jobs_of(a.c);

  err << "ceiling: " << cc.seeds.size() << " seed(s), " << cc.ppo.total_timesteps << " timesteps each\n";
  const CeilingSummary s = ceiling_experiment(cc);
  write_ceiling(s, out);
  err << "ceiling: heterogeneous " << s.heterogeneous.mean_improvement_pct << " %, uniform "
      << s.uniform.mean_improvement_pct << " %, gap " << s.gap_pct << " pp\n";

  json ppo_json = cc.ppo;
  ppo_json.erase("seed");
  write_json(fs::path(out) / "resolved_config.json", {{"command", "ceiling"},
                                                      {"seed", seed},
                                                      {"out", out},
                                                      {"robot", cc.robot},
                                                      {"seeds", cc.seeds},
                                                      {"detune_factor", cc.detune_factor},
                                                      {"eval_episodes", cc.eval_episodes},
                                                      {"ppo", ppo_json},
                                                      {"de", de_json(cc.hybrid.de)},
                                                      {"nm", nm_json(cc.hybrid.nm)}});
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  Common c;
  std::string in;
  std::string format;
};

void run_report(ReportArgs& a, CLI::App* sub, std::ostream& err) {
  json cfg = load_config(a.c.config, {"seed", "out", "in", "format", "include_unstable"});
  cfg = merge_common(std::move(cfg), a.c);
  if (sub->count("--in")) cfg["in"] = a.in;
  if (sub->count("--format")) cfg["format"] = a.format;
  const std::string out = require_out(cfg);
  std::string in = cfg.value("in", std::string());
  if (in.empty()) throw ConfigError("--in is required");
  const std::string format = cfg.value("format", std::string("json"));
  if (format != "json" && format != "csv") throw ConfigError("--format must be json or csv");
  const bool include_unstable = cfg.value("include_unstable", true);

  const fs::path cells_path = fs::is_directory(in) ? fs::path(in) / "cells.csv" : fs::path(in);
  const auto cells = read_cells_csv(cells_path.string());
  const auto aggs = aggregate_cells(cells, include_unstable);
  const auto imps = compute_improvements(aggs);

  ensure_parent(out);
  std::ofstream o(out, std::ios::binary);
  if (!o) throw IoError("cannot write '" + out + "'", out);
  auto find_imp = [&](const Aggregate& ag) -> const Improvement* {
    for (const auto& i : imps) {
      if (i.model == ag.model && i.controller_id == ag.controller_id && i.scenario == ag.scenario) return &i;
    }
    return nullptr;
  };
  if (format == "json") {
    json rows = json::array();
    for (const auto& ag : aggs) {
      const Improvement* i = find_imp(ag);
      rows.push_back({{"model", ag.model},
                      {"controller", ag.controller_id},
                      {"scenario", std::string(to_string(ag.scenario))},
                      {"count", ag.count},
                      {"unstable", ag.unstable},
                      {"mae_deg", {{"mean", ag.mae.mean}, {"std", ag.mae.std}}},
                      {"rmse_deg", {{"mean", ag.rmse.mean}, {"std", ag.rmse.std}}},
                      {"max_deg", {{"mean", ag.max_error.mean}, {"std", ag.max_error.std}}},
                      {"std_deg", {{"mean", ag.std_dev.mean}, {"std", ag.std_dev.std}}},
                      {"mae_improvement_pct", i ? i->mae_pct : 0.0},
                      {"rmse_improvement_pct", i ? i->rmse_pct : 0.0},
                      {"max_improvement_pct", i ? i->max_pct : 0.0},
                      {"std_improvement_pct", i ? i->std_pct : 0.0}});
    }
    o << json{{"schema_version", kSummarySchemaVersion}, {"kind", "report"}, {"rows", rows}}.dump(2) << '\n';
  } else {
    o << "model,controller,scenario,count,unstable,mae_mean,mae_std,rmse_mean,rmse_std,max_mean,max_std,"
         "std_mean,std_std,mae_improvement_pct,rmse_improvement_pct,max_improvement_pct,"
         "std_improvement_pct\n";
    auto d = [](double x) { return json(x).dump(); };
    for (const auto& ag : aggs) {
      const Improvement* i = find_imp(ag);
      o << ag.model << ',' << ag.controller_id << ',' << to_string(ag.scenario) << ',' << ag.count << ','
        << ag.unstable << ',' << d(ag.mae.mean) << ',' << d(ag.mae.std) << ',' << d(ag.rmse.mean) << ','
        << d(ag.rmse.std) << ',' << d(ag.max_error.mean) << ',' << d(ag.max_error.std) << ','
        << d(ag.std_dev.mean) << ',' << d(ag.std_dev.std) << ',' << d(i ? i->mae_pct : 0.0) << ','
        << d(i ? i->rmse_pct : 0.0) << ',' << d(i ? i->max_pct : 0.0) << ',' << d(i ? i->std_pct : 0.0)
        << '\n';
    }
  }
  if (!o) throw IoError("failed writing '" + out + "'", out);
  err << "report: " << aggs.size() << " aggregate row(s) to " << out << '\n';

  write_resolved_for_file(out, {{"command", "report"},
                                {"out", out},
                                {"in", in},
                                {"format", format},
                                {"include_unstable", include_unstable}});
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-learned and RL-adapted PID tuning laboratory", "metapid"};
  app.require_subcommand(1);
  app.fallthrough(false);

  AugmentArgs aug;
  auto* s_aug = app.add_subcommand("augment", "Build the augmented gain dataset (JSON Lines)");
  add_common(s_aug, aug.c);
  s_aug->add_option("--bases", aug.bases, "Base robots: preset names or RobotModel JSON paths")
      ->delimiter(',');
  s_aug->add_option("--variants", aug.variants, "Perturbed variants per base (default 100)");
  s_aug->add_flag("--narrow-inertia", aug.narrow_inertia, "Use the ±10% inertia range");

  TrainMetaArgs tm;
  auto* s_tm = app.add_subcommand("train-meta", "Train the gain-prediction network");
  add_common(s_tm, tm.c);
  s_tm->add_option("--data", tm.data, "Dataset file written by augment");
  s_tm->add_option("--joints", tm.joints, "Use only samples with this joint count");
  s_tm->add_option("--threshold", tm.threshold, "Quality filter in degrees (default 30)");
  s_tm->add_option("--epochs", tm.epochs, "Maximum epochs (default 500)");
  s_tm->add_option("--patience", tm.patience, "Early-stop patience (default 50)");

  TrainRlArgs rl;
  auto* s_rl = app.add_subcommand("train-rl", "Train the PPO gain-adaptation policy");
  add_common(s_rl, rl.c);
  s_rl->add_option("--robot", rl.robot, "Preset name or RobotModel JSON (default toy2)");
  s_rl->add_option("--meta", rl.meta, "Metanet checkpoint giving the initial gains");
  s_rl->add_option("--gains", rl.gains, "PIDGains JSON giving the initial gains");
  s_rl->add_option("--scenario", rl.scenario, "Training disturbance scenario (default none)");
  s_rl->add_option("--timesteps", rl.timesteps, "Total decisions across all environments");

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "Evaluate controllers over scenarios and seeds");
  add_common(s_ev, ev.c);
  s_ev->add_option("--robot", ev.robot, "Preset name or RobotModel JSON (default toy2)");
  s_ev->add_option("--meta", ev.meta, "Metanet checkpoint for the baseline gains");
  s_ev->add_option("--gains", ev.gains, "PIDGains JSON for the baseline gains");
  s_ev->add_option("--policy", ev.policy, "Policy checkpoint for the adapted controller");
  s_ev->add_option("--scenarios", ev.scenarios, "Scenario names or 'all' (default all)")->delimiter(',');
  s_ev->add_option("--seeds", ev.seeds, "Number of seeds, starting at --seed (default 10)");
  s_ev->add_option("--episodes", ev.episodes, "Episodes per cell (default 3)");
  s_ev->add_flag("--paper-scale", ev.paper_scale, "100 seeds x 20 episodes");

  CeilingArgs ce;
  auto* s_ce = app.add_subcommand("ceiling", "Run the optimization-ceiling experiment");
  add_common(s_ce, ce.c);
  s_ce->add_option("--robot", ce.robot, "Preset name (default toy2)");
  s_ce->add_option("--seeds", ce.seeds, "Number of seeds, starting at --seed (default 1)");
  s_ce->add_option("--timesteps", ce.timesteps, "PPO decisions per training run");

  ReportArgs rp;
  auto* s_rp = app.add_subcommand("report", "Summarize an eval directory as JSON or CSV");
  add_common(s_rp, rp.c);
  s_rp->add_option("--in", rp.in, "Eval output directory or cells.csv");
  s_rp->add_option("--format", rp.format, "json or csv (default json)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (s_aug->parsed()) run_augment(aug, s_aug, err);
    else if (s_tm->parsed()) run_train_meta(tm, s_tm, err);
    else if (s_rl->parsed()) run_train_rl(rl, s_rl, err);
    else if (s_ev->parsed()) run_eval(ev, s_ev, err);
    else if (s_ce->parsed()) run_ceiling(ce, s_ce, err);
    else if (s_rp->parsed()) run_report(rp, s_rp, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: invalid configuration value: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

int dispatch(const std::vector<std::string>& args) { return dispatch(args, std::cout, std::cerr); }

}  // namespace metapid::cli
