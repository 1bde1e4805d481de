// Acceptance run: one line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "metapid/augment.hpp"
#include "metapid/cli.hpp"
#include "metapid/eval.hpp"
#include "metapid/metanet.hpp"
#include "metapid/optimizer.hpp"
#include "metapid/rladapt.hpp"
#include "test_util.hpp"

using namespace metapid;
using metapid::testing::slurp;
using metapid::testing::TempDir;

namespace {

constexpr double kGradRelTol = 1e-4;
constexpr double kFdStep = 1e-5;
constexpr double kGradSeconds = 5.0;
constexpr double kMetricTol = 1e-12;
constexpr double kGridSlack = 1.10;
constexpr double kOptimizerSeconds = 120.0;
constexpr double kOverfitLoss = 1e-3;
constexpr double kOverfitSeconds = 60.0;
constexpr double kPctTol = 0.05;
constexpr std::size_t kExpectedSamples = 303;
constexpr std::size_t kLearningSeedsNeeded = 4;
constexpr double kLearningSeconds = 600.0;
constexpr double kGapPp = 5.0;
constexpr double kPipelineSeconds = 900.0;

constexpr double kDeg = 180.0 / std::numbers::pi;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const Outcome& o, double secs) {
  if (!o.pass) ++failures;
  std::printf("[%s] criterion %d: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, o.detail.c_str(), secs);
  std::fflush(stdout);
}

void run_criterion(int id, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, o, seconds_since(t0));
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int cli_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int rc = cli::dispatch(args, out, err);
  if (rc != 0) std::cerr << "cli " << args.front() << " failed (" << rc << "): " << err.str();
  return rc;
}

// --- metanet helpers -------------------------------------------------------

Dataset synthetic(std::size_t count, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t k = 0; k < count; ++k) {
    AugmentedSample s;
    s.base_name = "synthetic";
    s.variant_id = k;
    for (double& x : s.features) x = rng.uniform(-2.0, 5.0);
    NormalizedGains v;
    for (std::size_t i = 0; i < n; ++i) {
      v.kp.push_back(rng.uniform(0.1, 0.9));
      v.ki.push_back(rng.uniform(0.1, 0.9));
      v.kd.push_back(rng.uniform(0.1, 0.9));
    }
    s.gains = denormalize(v, GainLimits{});
    s.opt_error_deg = rng.uniform(0.0, 20.0);
    d.samples.push_back(s);
  }
  return d;
}

Batch full_batch(const Dataset& d) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(d, idx, sample_weights(d), GainLimits{});
}

Outcome gradient_oracle() {
  const Dataset d = synthetic(3, 2, 1);
  MetaNetwork net = init_network(2, 1);
  Rng rng(2);
  const auto& L = net.layout();
  for (Eigen::Index k = 0; k < MetaNetwork::kHidden1; ++k) {
    net.params()[L.ln1_gamma + k] = rng.uniform(0.5, 1.5);
    net.params()[L.ln1_beta + k] = rng.uniform(-0.3, 0.3);
  }
  for (Eigen::Index k = 0; k < MetaNetwork::kHidden2; ++k) {
    net.params()[L.ln2_gamma + k] = rng.uniform(0.5, 1.5);
    net.params()[L.ln2_beta + k] = rng.uniform(-0.3, 0.3);
  }
  const Batch b = full_batch(d);
  const Eigen::VectorXd g = backward(net, b);

  // Every small tensor entirely, a random subset of the large weight matrices.
  std::vector<std::pair<Eigen::Index, Eigen::Index>> spans;
  for (const auto& s : {L.l1, L.l2, L.l3, L.kp, L.ki, L.kd}) {
    spans.emplace_back(s.weight, s.rows * s.cols);
    spans.emplace_back(s.bias, s.rows);
  }
  spans.emplace_back(L.ln1_gamma, MetaNetwork::kHidden1);
  spans.emplace_back(L.ln1_beta, MetaNetwork::kHidden1);
  spans.emplace_back(L.ln2_gamma, MetaNetwork::kHidden2);
  spans.emplace_back(L.ln2_beta, MetaNetwork::kHidden2);

  double worst = 0.0;
  std::size_t checked = 0;
  for (auto [offset, size] : spans) {
    const Eigen::Index count = std::min<Eigen::Index>(size, 150);
    for (Eigen::Index c = 0; c < count; ++c) {
      const Eigen::Index k = offset + (count == size ? c : static_cast<Eigen::Index>(rng.index(size)));
      MetaNetwork p = net, m = net;
      p.params()[k] += kFdStep;
      m.params()[k] -= kFdStep;
      const double fd = (batch_loss(p, b) - batch_loss(m, b)) / (2 * kFdStep);
      worst = std::max(worst, std::abs(fd - g[k]) / std::max({std::abs(fd), std::abs(g[k]), 1e-6}));
      ++checked;
    }
  }
  return {worst <= kGradRelTol, fmt("max relative error %.2e over %zu parameters (tol %.0e)", worst, checked,
                                    kGradRelTol)};
}

// --- metrics ---------------------------------------------------------------

Outcome metric_oracle() {
  Rng rng(10);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto T = static_cast<Eigen::Index>(1 + rng.index(50));
    const auto n = static_cast<Eigen::Index>(1 + rng.index(12));
    Eigen::MatrixXd e(T, n);
    for (Eigen::Index k = 0; k < e.size(); ++k) e.data()[k] = rng.normal() * 0.2;

    double sum_abs = 0, sum_sq = 0, mx = 0;
    std::vector<double> norms;
    for (Eigen::Index t = 0; t < T; ++t) {
      double sq = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double x = e(t, i) * kDeg;
        sum_abs += std::abs(x);
        sq += x * x;
      }
      sum_sq += sq;
      norms.push_back(std::sqrt(sq));
      mx = std::max(mx, norms.back());
    }
    const double mean_norm = std::accumulate(norms.begin(), norms.end(), 0.0) / static_cast<double>(T);
    double var = 0;
    for (double v : norms) var += (v - mean_norm) * (v - mean_norm);
    const double expect[4] = {sum_abs / static_cast<double>(T * n), std::sqrt(sum_sq / static_cast<double>(T)), mx,
                              std::sqrt(var / static_cast<double>(T))};
    const double got[4] = {mae(e), rmse(e), max_error(e), std_dev(e)};
    for (int k = 0; k < 4; ++k) worst = std::max(worst, std::abs(got[k] - expect[k]) / std::max(1.0, expect[k]));
  }
  return {worst <= kMetricTol, fmt("max deviation %.2e on 100 series (tol %.0e)", worst, kMetricTol)};
}

// --- optimizer -------------------------------------------------------------

Outcome optimizer_oracle() {
  std::size_t monotone = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const GainBounds box{std::vector<double>(3, -5.0), std::vector<double>(3, 5.0)};
    const auto r = de_search(
        [](std::span<const double> x) {
          double s = 0;
          for (double v : x) s += v * v;
          return s;
        },
        box, DEConfig{}, rng);
    monotone += std::is_sorted(r.history.rbegin(), r.history.rend()) ? 1 : 0;
  }

  const auto m = robot_preset("toy2");
  const auto spec = test_trajectory(2);
  Rng rng(0);
  const auto h = hybrid_optimize(m, spec, HybridConfig{}, rng);

  // Decoupled joints: the per-joint grid optimum composes into the joint optimum of the grid.
  std::vector<double> best(2, INFINITY);
  for (int a = 0; a <= 20; ++a) {
    for (int c = 0; c <= 20; ++c) {
      const double kp = 0.1 + (500.0 - 0.1) * a / 20.0;
      const double kd = 0.1 + (500.0 - 0.1) * c / 20.0;
      ClosedLoop loop(m, PIDGains::uniform(2, kp, 0.0, kd), spec);
      std::vector<double> acc(2, 0.0);
      bool ok = true;
      while (!loop.done() && ok) {
        ok = loop.step();
        for (int i = 0; i < 2; ++i) acc[i] += loop.error()[i] * loop.error()[i];
      }
      if (!ok) continue;
      for (int i = 0; i < 2; ++i) best[i] = std::min(best[i], acc[i]);
    }
  }
  const double grid = std::sqrt((best[0] + best[1]) / static_cast<double>(spec.duration_steps)) * kDeg;
  const bool pass = monotone == 10 && h.cost_deg <= kGridSlack * grid;
  return {pass, fmt("DE monotone on %zu/10 seeds; hybrid %.4f deg vs grid %.4f deg (limit x%.2f)", monotone,
                    h.cost_deg, grid, kGridSlack)};
}

Outcome overfit() {
  const Dataset d = synthetic(8, 2, 8);
  TrainConfig cfg;
  cfg.max_epochs = 500;
  cfg.val_fraction = 0.1;
  cfg.early_stop_patience = 500;
  const auto r = train(init_network(2, 8), d, cfg);
  const double loss = batch_loss(r.net, full_batch(d));
  return {loss < kOverfitLoss, fmt("weighted MSE %.3e after %zu epochs (limit %.0e)", loss,
                                   r.history.train_loss.size(), kOverfitLoss)};
}

Outcome reporting() {
  const double a = improvement_pct(7.51, 6.26);
  const double b = improvement_pct(35.90, 29.01);
  const bool pass = std::abs(a - 16.6) <= kPctTol && std::abs(b - 19.2) <= kPctTol;
  return {pass, fmt("7.51->6.26 gives %.3f%%, 35.90->29.01 gives %.3f%% (tol %.2f)", a, b, kPctTol)};
}

Outcome bookkeeping(int jobs) {
  std::vector<RobotModel> bases;
  for (const char* n : {"toy2", "arm9", "quad12"}) bases.push_back(robot_preset(n));
  AugmentConfig cfg;
  cfg.variants_per_base = 100;
  cfg.jobs = jobs;
  const Dataset d = build_dataset(bases, cfg);
  const Dataset f = filter_dataset(d, 30.0);
  auto mean = [](const Dataset& x) {
    double s = 0;
    for (const auto& v : x.samples) s += v.opt_error_deg;
    return x.size() ? s / static_cast<double>(x.size()) : 0.0;
  };
  const bool all_within = std::all_of(f.samples.begin(), f.samples.end(),
                                      [](const AugmentedSample& s) { return s.opt_error_deg <= 30.0; });
  const bool removed_all_above =
      f.size() == static_cast<std::size_t>(std::count_if(d.samples.begin(), d.samples.end(), [](const auto& s) {
        return s.opt_error_deg <= 30.0;
      }));
  const bool lowered = f.size() < d.size() ? mean(f) < mean(d) : mean(f) <= mean(d);
  const bool pass = d.size() == kExpectedSamples && all_within && removed_all_above && lowered;
  return {pass, fmt("%zu samples, %zu kept; mean error %.2f -> %.2f deg", d.size(), f.size(), mean(d), mean(f))};
}

// --- RL ----------------------------------------------------------------------

double window_mean(const std::vector<TrainLogRow>& log, bool tail) {
  const std::size_t k = std::max<std::size_t>(1, log.size() / 10);
  double s = 0;
  for (std::size_t i = 0; i < k; ++i) s += (tail ? log[log.size() - 1 - i] : log[i]).mean_ep_reward;
  return s / static_cast<double>(k);
}

Outcome learning_progress(const CeilingSummary& s) {
  std::size_t improved = 0;
  std::string per_seed;
  for (const auto& run : s.heterogeneous.runs) {
    const double first = window_mean(run.log, false), last = window_mean(run.log, true);
    improved += last > first ? 1 : 0;
    per_seed += fmt(" s%llu:%.2f->%.2f", static_cast<unsigned long long>(run.seed), first, last);
  }
  return {improved >= kLearningSeedsNeeded && s.heterogeneous.runs.size() == 5,
          fmt("%zu/5 seeds improved (need %zu);", improved, kLearningSeedsNeeded) + per_seed};
}

Outcome ceiling_gap(const CeilingSummary& s) {
  return {s.gap_pct >= kGapPp, fmt("detuned %.2f%% vs optimized %.2f%% -> gap %.2f pp (need %.1f); uniform "
                                   "|improvement| %.2f%%",
                                   s.heterogeneous.mean_improvement_pct, s.uniform.mean_improvement_pct, s.gap_pct,
                                   kGapPp, std::abs(s.uniform.mean_improvement_pct))};
}

// --- CLI ---------------------------------------------------------------------

// augment -> train-meta -> train-rl -> eval -> report; returns the first failing step.
std::string pipeline(const TempDir& dir, const std::string& jobs, const std::vector<std::string>& augment_extra,
                     const std::string& variants, const std::string& timesteps, const std::string& seeds) {
  std::vector<std::string> aug{"augment", "--bases", "toy2", "--variants", variants, "--seed", "7", "--jobs",
                               jobs, "--out", dir.file("data.jsonl")};
  aug.insert(aug.end(), augment_extra.begin(), augment_extra.end());
  if (cli_run(aug)) return "augment";
  if (cli_run({"train-meta", "--data", dir.file("data.jsonl"), "--seed", "7", "--jobs", jobs, "--out",
               dir.file("meta.json")}))
    return "train-meta";
  if (cli_run({"train-rl", "--meta", dir.file("meta.json"), "--scenario", "mixed", "--timesteps", timesteps,
               "--seed", "7", "--jobs", jobs, "--out", dir.file("policy.json")}))
    return "train-rl";
  if (cli_run({"eval", "--meta", dir.file("meta.json"), "--policy", dir.file("policy.json"), "--scenarios", "all",
               "--seeds", seeds, "--episodes", "1", "--seed", "7", "--jobs", jobs, "--out", dir.file("eval")}))
    return "eval";
  if (cli_run({"report", "--in", dir.file("eval"), "--out", dir.file("report.json")})) return "report";
  return {};
}

const std::vector<std::string> kArtifacts{"data.jsonl",  "meta.json",         "meta.json.history.csv",
                                          "policy.json", "policy.json.log.csv", "eval/cells.csv",
                                          "eval/summary.json", "eval/plotdata/error_vs_time.csv",
                                          "eval/plotdata/per_joint_mae.csv", "report.json"};

Outcome determinism() {
  TempDir a("acc_j1"), b("acc_j8");
  const std::vector<std::string> quick_opt{"--config", a.file("opt.json")};
  metapid::testing::spit(a.file("opt.json"), R"({"de": {"population": 6, "generations": 4}, "nm": {"iterations": 5}})");
  if (auto step = pipeline(a, "1", quick_opt, "5", "4096", "2"); !step.empty()) return {false, "jobs 1: " + step};
  if (auto step = pipeline(b, "8", quick_opt, "5", "4096", "2"); !step.empty()) return {false, "jobs 8: " + step};
  std::vector<std::string> differ;
  for (const auto& f : kArtifacts) {
    const std::string x = slurp(a.file(f)), y = slurp(b.file(f));
    if (x.empty() || x != y) differ.push_back(f);
  }
  std::string list;
  for (const auto& f : differ) list += " " + f;
  return {differ.empty(), differ.empty() ? fmt("%zu artifacts byte-identical under --jobs 1 and 8", kArtifacts.size())
                                         : "differ:" + list};
}

Outcome end_to_end() {
  TempDir dir("acc_e2e");
  const auto t0 = Clock::now();
  if (auto step = pipeline(dir, "0", {}, "20", "20000", "3"); !step.empty()) return {false, "failed at " + step};
  const double secs = seconds_since(t0);

  const Dataset d = load_dataset(dir.file("data.jsonl"));
  const MetaNetwork net = load_metanet(dir.file("meta.json"));
  const PolicyNet policy = load_policy(dir.file("policy.json"));
  const auto cells = read_cells_csv(dir.file("eval/cells.csv"));
  const auto gains = predict_gains(net, robot_preset("toy2"));
  const bool shapes = d.size() == 21 && net.n_joints() == 2 && gains.within(net.limits()) &&
                      cells.size() == 2u * 5u * 3u && policy.parameter_count() > 0;
  const auto summary = nlohmann::json::parse(slurp(dir.file("eval/summary.json")));
  const auto rep = nlohmann::json::parse(slurp(dir.file("report.json")));
  const bool docs = summary["aggregates"].size() == 10 && rep["rows"].size() == 10;
  return {shapes && docs && secs < kPipelineSeconds,
          fmt("%zu samples, %zu cells, %zu report rows, %.0fs (limit %.0fs)", d.size(), cells.size(),
              rep["rows"].size(), secs, kPipelineSeconds)};
}

}  // namespace

int main() {
  const int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

  run_criterion(1, [] {
    const auto t0 = Clock::now();
    Outcome o = gradient_oracle();
    const double s = seconds_since(t0);
    if (s >= kGradSeconds) o = {false, o.detail + fmt("; too slow (%.1fs)", s)};
    return o;
  });
  run_criterion(2, metric_oracle);
  run_criterion(3, [] {
    const auto t0 = Clock::now();
    Outcome o = optimizer_oracle();
    const double s = seconds_since(t0);
    if (s >= kOptimizerSeconds) o = {false, o.detail + fmt("; too slow (%.1fs)", s)};
    return o;
  });
  run_criterion(4, [] {
    const auto t0 = Clock::now();
    Outcome o = overfit();
    const double s = seconds_since(t0);
    if (s >= kOverfitSeconds) o = {false, o.detail + fmt("; too slow (%.1fs)", s)};
    return o;
  });
  run_criterion(5, reporting);
  run_criterion(6, [jobs] { return bookkeeping(jobs); });

  // Criteria 7 and 8 share one ceiling run: condition A is the detuned robot.
  CeilingSummary ceiling;
  double ceiling_secs = 0.0;
  std::string ceiling_error;
  {
    const auto t0 = Clock::now();
    try {
      CeilingConfig cfg;
      cfg.seeds = {0, 1, 2, 3, 4};
      cfg.robot = "toy2";
      cfg.ppo.total_timesteps = 50'000;
      cfg.jobs = jobs;
      ceiling = ceiling_experiment(cfg);
    } catch (const std::exception& e) {
      ceiling_error = e.what();
    }
    ceiling_secs = seconds_since(t0);
  }
  auto with_ceiling = [&](const std::function<Outcome()>& f) {
    return ceiling_error.empty() ? f() : Outcome{false, "ceiling experiment failed: " + ceiling_error};
  };
  {
    Outcome o = with_ceiling([&] { return learning_progress(ceiling); });
    if (ceiling_secs >= kLearningSeconds) o = {false, o.detail + fmt("; too slow (%.0fs)", ceiling_secs)};
    report(7, o, ceiling_secs);
  }
  report(8, with_ceiling([&] { return ceiling_gap(ceiling); }), 0.0);

  run_criterion(9, determinism);
  run_criterion(10, end_to_end);

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
