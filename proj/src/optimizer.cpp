#include "metapid/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "metapid/errors.hpp"
#include "metapid/parallel.hpp"

namespace metapid {

void GainBounds::validate() const {
  if (lower.size() != upper.size() || lower.empty()) {
    throw ConfigError("GainBounds: lower and upper must be non-empty and of equal length");
  }
  for (std::size_t j = 0; j < lower.size(); ++j) {
    if (!(lower[j] <= upper[j])) throw ConfigError("GainBounds: lower must not exceed upper");
  }
}

bool GainBounds::contains(std::span<const double> x) const {
  if (x.size() != dim()) return false;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x[j] < lower[j] || x[j] > upper[j]) return false;
  }
  return true;
}

GainBounds GainBounds::for_pid(std::size_t n, const GainLimits& l) {
  GainBounds b;
  b.lower.insert(b.lower.end(), n, l.kp_min);
  b.lower.insert(b.lower.end(), n, l.kd_min);
  b.lower.insert(b.lower.end(), n, l.ki_min);
  b.upper.insert(b.upper.end(), n, l.kp_max);
  b.upper.insert(b.upper.end(), n, l.kd_max);
  b.upper.insert(b.upper.end(), n, l.ki_max);
  return b;
}

std::vector<double> flatten_gains(const PIDGains& g) {
  std::vector<double> x;
  x.reserve(3 * g.n_joints());
  x.insert(x.end(), g.kp.begin(), g.kp.end());
  x.insert(x.end(), g.kd.begin(), g.kd.end());
  x.insert(x.end(), g.ki.begin(), g.ki.end());
  return x;
}

PIDGains unflatten_gains(std::span<const double> x, std::size_t n) {
  if (x.size() != 3 * n) throw ShapeError("unflatten_gains: expected 3n parameters");
  PIDGains g;
  g.kp.assign(x.begin(), x.begin() + n);
  g.kd.assign(x.begin() + n, x.begin() + 2 * n);
  g.ki.assign(x.begin() + 2 * n, x.end());
  return g;
}

double tracking_cost_deg(std::span<const double> errors, std::size_t n) {
  if (n == 0 || errors.empty() || errors.size() % n != 0) {
    throw ShapeError("tracking_cost_deg: series must be a non-empty T x n matrix");
  }
  const double steps = static_cast<double>(errors.size() / n);
  double sum = 0.0;
  for (double e : errors) sum += e * e;
  return std::sqrt(sum / steps) * 180.0 / std::numbers::pi;
}

double evaluate_gains(const RobotModel& model, const PIDGains& gains, const TrajectorySpec& spec) {
  ClosedLoop loop(model, gains, spec);
  double sum = 0.0;
  while (!loop.done()) {
    if (!loop.step()) return kDivergencePenalty;
    for (double e : loop.error()) sum += e * e;
    if (!std::isfinite(sum)) return kDivergencePenalty;
  }
  const double cost =
      std::sqrt(sum / static_cast<double>(spec.duration_steps)) * 180.0 / std::numbers::pi;
  return std::isfinite(cost) ? cost : kDivergencePenalty;
}

// ---------------------------------------------------------------------------
// Differential evolution

void DEConfig::validate() const {
  if (population < 4) {
    throw ConfigError("DE population must be >= 4 (mutation needs three distinct partners)");
  }
  if (!(F > 0.0) || !(CR >= 0.0 && CR <= 1.0)) throw ConfigError("DE requires F > 0, CR in [0,1]");
}

namespace {

double reflect_into(double x, double lo, double hi, Rng& rng) {
  if (lo == hi) return lo;
  if (x < lo) x = lo + (lo - x);
  if (x > hi) x = hi - (x - hi);
  // Still outside after one reflection: the overshoot exceeded the width.
  if (x < lo || x > hi) x = rng.uniform(lo, hi);
  return x;
}

void evaluate_all(const Objective& objective, const std::vector<std::vector<double>>& points,
                  std::vector<double>& costs, int jobs) {
  costs.resize(points.size());
  parallel_for(points.size(), jobs, [&](std::size_t i) { costs[i] = objective(points[i]); });
}

}  // namespace

DEResult de_search(const Objective& objective, const GainBounds& bounds, const DEConfig& cfg,
                   Rng& rng, const ProgressFn& progress) {
  cfg.validate();
  bounds.validate();
  const std::size_t dim = bounds.dim();
  const std::size_t np = cfg.population;

  DEResult r;
  r.population.assign(np, std::vector<double>(dim));
  for (auto& member : r.population) {
    for (std::size_t j = 0; j < dim; ++j) member[j] = rng.uniform(bounds.lower[j], bounds.upper[j]);
  }
  evaluate_all(objective, r.population, r.population_costs, cfg.jobs);
  r.evaluations = np;

  auto best_index = [&] {
    return static_cast<std::size_t>(
        std::min_element(r.population_costs.begin(), r.population_costs.end()) -
        r.population_costs.begin());
  };
  r.history.push_back(r.population_costs[best_index()]);
  r.min_evaluated = r.history.back();

  std::vector<std::vector<double>> trials(np, std::vector<double>(dim));
  std::vector<double> trial_costs;
  for (std::size_t g = 1; g <= cfg.generations; ++g) {
    for (std::size_t i = 0; i < np; ++i) {
      std::size_t r1, r2, r3;
      do r1 = rng.index(np); while (r1 == i);
      do r2 = rng.index(np); while (r2 == i || r2 == r1);
      do r3 = rng.index(np); while (r3 == i || r3 == r1 || r3 == r2);
      const std::size_t forced = rng.index(dim);
      for (std::size_t j = 0; j < dim; ++j) {
        const bool cross = rng.uniform() < cfg.CR || j == forced;
        double v = r.population[i][j];
        if (cross) {
          v = r.population[r1][j] + cfg.F * (r.population[r2][j] - r.population[r3][j]);
          v = reflect_into(v, bounds.lower[j], bounds.upper[j], rng);
        }
        trials[i][j] = v;
      }
    }
    evaluate_all(objective, trials, trial_costs, cfg.jobs);
    r.evaluations += np;
    for (std::size_t i = 0; i < np; ++i) {
      r.min_evaluated = std::min(r.min_evaluated, trial_costs[i]);
      if (trial_costs[i] < r.population_costs[i]) {
        r.population[i] = trials[i];
        r.population_costs[i] = trial_costs[i];
      }
    }
    r.history.push_back(r.population_costs[best_index()]);
    if (progress) progress(g, r.history.back());
  }

  const std::size_t b = best_index();
  r.best = r.population[b];
  r.best_cost = r.population_costs[b];
  return r;
}

// ---------------------------------------------------------------------------
// Nelder-Mead

NMResult nelder_mead(const Objective& objective, std::span<const double> start,
                     const GainBounds& bounds, const NMConfig& cfg) {
  bounds.validate();
  const std::size_t dim = bounds.dim();
  if (start.size() != dim) throw ShapeError("nelder_mead: start has wrong dimension");
  if (!bounds.contains(start)) throw ContractError("nelder_mead: start outside bounds");

  NMResult r;
  auto clamp_point = [&](std::vector<double>& x) {
    for (std::size_t j = 0; j < dim; ++j) x[j] = std::clamp(x[j], bounds.lower[j], bounds.upper[j]);
  };
  auto eval = [&](const std::vector<double>& x) {
    ++r.evaluations;
    return objective(x);
  };

  std::vector<std::vector<double>> simplex(dim + 1, std::vector<double>(start.begin(), start.end()));
  for (std::size_t j = 0; j < dim; ++j) {
    const double step = cfg.initial_step * (bounds.upper[j] - bounds.lower[j]);
    auto& v = simplex[j + 1];
    v[j] = (v[j] + step <= bounds.upper[j]) ? v[j] + step : v[j] - step;
    clamp_point(v);
  }
  std::vector<double> f(dim + 1);
  for (std::size_t k = 0; k <= dim; ++k) f[k] = eval(simplex[k]);

  std::vector<std::size_t> order(dim + 1);
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return f[a] < f[b]; });
    std::vector<std::vector<double>> s(dim + 1);
    std::vector<double> fs(dim + 1);
    for (std::size_t k = 0; k <= dim; ++k) {
      s[k] = std::move(simplex[order[k]]);
      fs[k] = f[order[k]];
    }
    simplex = std::move(s);
    f = std::move(fs);
  };

  auto along = [&](const std::vector<double>& c, const std::vector<double>& x, double coef) {
    std::vector<double> y(dim);
    for (std::size_t j = 0; j < dim; ++j) y[j] = c[j] + coef * (x[j] - c[j]);
    clamp_point(y);
    return y;
  };

  std::vector<double> centroid(dim);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    sort_simplex();
    const std::size_t worst = dim;
    std::fill(centroid.begin(), centroid.end(), 0.0);
    for (std::size_t k = 0; k < dim; ++k) {
      for (std::size_t j = 0; j < dim; ++j) centroid[j] += simplex[k][j] / static_cast<double>(dim);
    }

    auto xr = along(centroid, simplex[worst], -cfg.reflection);
    const double fr = eval(xr);
    if (fr < f[0]) {
      auto xe = along(centroid, xr, cfg.expansion);
      const double fe = eval(xe);
      if (fe < fr) {
        simplex[worst] = std::move(xe);
        f[worst] = fe;
      } else {
        simplex[worst] = std::move(xr);
        f[worst] = fr;
      }
      continue;
    }
    if (fr < f[dim - 1]) {
      simplex[worst] = std::move(xr);
      f[worst] = fr;
      continue;
    }
    bool accepted = false;
    if (fr < f[worst]) {
      auto xc = along(centroid, xr, cfg.contraction);
      const double fc = eval(xc);
      if (fc <= fr) {
        simplex[worst] = std::move(xc);
        f[worst] = fc;
        accepted = true;
      }
    } else {
      auto xc = along(centroid, simplex[worst], cfg.contraction);
      const double fc = eval(xc);
      if (fc < f[worst]) {
        simplex[worst] = std::move(xc);
        f[worst] = fc;
        accepted = true;
      }
    }
    if (!accepted) {
      for (std::size_t k = 1; k <= dim; ++k) {
        simplex[k] = along(simplex[0], simplex[k], cfg.shrink);
        f[k] = eval(simplex[k]);
      }
    }
  }
  sort_simplex();
  r.best = simplex[0];
  r.cost = f[0];
  return r;
}

// ---------------------------------------------------------------------------

OptResult hybrid_optimize(const RobotModel& model, const TrajectorySpec& spec,
                          const HybridConfig& cfg, Rng& rng, const ProgressFn& progress) {
  model.validate();
  spec.validate();
  const std::size_t n = model.n_joints();
  const GainBounds bounds = GainBounds::for_pid(n, cfg.limits);
  const Objective objective = [&](std::span<const double> x) {
    return evaluate_gains(model, unflatten_gains(x, n), spec);
  };

  const DEResult global = de_search(objective, bounds, cfg.de, rng, progress);
  const NMResult local = nelder_mead(objective, global.best, bounds, cfg.nm);

  OptResult out;
  out.de_cost = global.best_cost;
  out.de_history = global.history;
  out.de_min_evaluated = global.min_evaluated;
  // The polish may only help: keep the DE point if the simplex found nothing better.
  const bool improved = local.cost <= global.best_cost;
  out.polished_cost = improved ? local.cost : global.best_cost;
  out.gains = unflatten_gains(improved ? local.best : global.best, n);
  out.cost_deg = out.polished_cost;
  out.evaluations = global.evaluations + local.evaluations;
  return out;
}

}  // namespace metapid
