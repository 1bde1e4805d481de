#include "metapid/rladapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metapid/errors.hpp"
#include "metapid/parallel.hpp"

namespace metapid {
namespace {

constexpr std::uint64_t kTagInit = 0x7101;
constexpr std::uint64_t kTagEnv = 0x7102;
constexpr std::uint64_t kTagAction = 0x7103;
constexpr std::uint64_t kTagUpdate = 0x7104;
constexpr std::uint64_t kTagTrajectory = 0x7105;

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 log(2π)
constexpr double kSuccessBand = 5.0 * std::numbers::pi / 180.0;

double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double mean_normalized(const std::vector<double>& g, double lo, double hi) {
  if (g.empty() || !(hi > lo)) return 0.0;
  double s = 0.0;
  for (double x : g) s += (x - lo) / (hi - lo);
  return s / static_cast<double>(g.size());
}

Eigen::VectorXd to_vector(const AdaptState& s) {
  return Eigen::Map<const Eigen::VectorXd>(s.data(), kStateDim);
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

}  // namespace

std::string_view to_string(RewardKind kind) {
  return kind == RewardKind::Tracking ? "tracking" : "shaped";
}

RewardKind reward_kind_from_string(std::string_view name) {
  if (name == "tracking") return RewardKind::Tracking;
  if (name == "shaped") return RewardKind::Shaped;
  throw ConfigError("unknown reward kind '" + std::string(name) + "' (expected tracking or shaped)");
}

AdaptState build_state(std::span<const double> error, std::span<const double> qd,
                       const PIDGains& gains, const GainLimits& limits, double time_fraction,
                       double mean_amplitude, double mean_frequency) {
  if (error.size() != qd.size()) throw ShapeError("build_state: error and velocity lengths differ");
  AdaptState s{};
  const std::size_t n = error.size();
  std::vector<std::size_t> joints(n);
  std::iota(joints.begin(), joints.end(), 0);
  if (n > kStateJoints) {
    std::stable_sort(joints.begin(), joints.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(error[a]) > std::abs(error[b]);
    });
    joints.resize(kStateJoints);
    std::sort(joints.begin(), joints.end());
  }
  for (std::size_t k = 0; k < joints.size(); ++k) {
    s[k] = error[joints[k]];
    s[kStateJoints + k] = qd[joints[k]];
  }
  s[18] = mean_normalized(gains.kp, limits.kp_min, limits.kp_max);
  s[19] = mean_normalized(gains.kd, limits.kd_min, limits.kd_max);
  s[20] = time_fraction;
  s[21] = mean_amplitude;
  s[22] = mean_frequency;
  return s;
}

double compute_reward(std::span<const double> error, std::span<const double> qd,
                      const AdaptAction& action, std::size_t n) {
  if (error.size() != n || qd.size() != n || n == 0) {
    throw ShapeError("compute_reward: vectors must have n_joints entries");
  }
  const double root_n = std::sqrt(static_cast<double>(n));
  const double a = std::hypot(action.delta_kp, action.delta_kd);
  const double r = -10.0 * norm_of(error) / root_n - 0.1 * norm_of(qd) / root_n - 0.1 * a;
  if (std::isnan(r)) return kRewardMin;
  return std::clamp(r, kRewardMin, kRewardMax);
}

PIDGains apply_action(const PIDGains& gains, const AdaptAction& a, const GainLimits& limits) {
  PIDGains out = gains;
  for (auto& k : out.kp) k *= 1.0 + a.delta_kp;
  for (auto& k : out.kd) k *= 1.0 + a.delta_kd;
  return clamp_gains(std::move(out), limits);
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const double> dones, double gamma, double lambda) {
  const std::size_t T = rewards.size();
  if (values.size() != T + 1 || dones.size() != T) {
    throw ShapeError("gae: need |values| = |rewards| + 1 and |dones| = |rewards|");
  }
  GaeResult r;
  r.advantages.assign(T, 0.0);
  r.returns.assign(T, 0.0);
  double next = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const double live = 1.0 - dones[t];
    const double delta = rewards[t] + gamma * live * values[t + 1] - values[t];
    next = delta + gamma * lambda * live * next;
    r.advantages[t] = next;
    r.returns[t] = next + values[t];
  }
  return r;
}

// ---------------------------------------------------------------------------

void PPOConfig::validate() const {
  if (total_timesteps == 0 || n_envs == 0 || steps_per_env == 0 || batch_size == 0 || epochs == 0 ||
      hidden == 0) {
    throw ConfigError("PPOConfig: counts must be positive");
  }
  if ((n_envs * steps_per_env) % batch_size != 0) {
    throw ConfigError("PPOConfig: batch_size must divide n_envs * steps_per_env");
  }
  if (!(clip_range > 0) || !(learning_rate > 0) || !(gamma > 0 && gamma <= 1) ||
      !(gae_lambda >= 0 && gae_lambda <= 1) || entropy_coef < 0 || value_coef < 0 ||
      !(max_grad_norm > 0) || !(dt > 0)) {
    throw ConfigError("PPOConfig: rates and coefficients out of range");
  }
  if (!(log_std_init >= kLogStdMin && log_std_init <= kLogStdMax)) {
    throw ConfigError("PPOConfig: log_std_init must lie in [-5, 1]");
  }
  if (decision_interval == 0 || episode_steps < decision_interval) {
    throw ConfigError("PPOConfig: need 1 <= decision_interval <= episode_steps");
  }
  limits.validate();
}

std::size_t PPOConfig::iterations() const {
  return std::max<std::size_t>(1, total_timesteps / (n_envs * steps_per_env));
}

// ---------------------------------------------------------------------------

PolicyNet PolicyNet::create(std::size_t hidden, double log_std_init, Rng& rng) {
  const auto h = static_cast<Eigen::Index>(hidden);
  PolicyNet p;
  p.actor = Mlp({kStateDim, h, h, kActionDim}, rng, 0.01);
  p.critic = Mlp({kStateDim, h, h, 1}, rng, 1.0);
  p.log_std = Eigen::Vector2d::Constant(log_std_init);
  return p;
}

PolicyNet PolicyNet::zeros(std::size_t hidden) {
  const auto h = static_cast<Eigen::Index>(hidden);
  PolicyNet p;
  p.actor = Mlp({kStateDim, h, h, kActionDim});
  p.critic = Mlp({kStateDim, h, h, 1});
  return p;
}

Eigen::Index PolicyNet::parameter_count() const {
  return actor.params().size() + 2 + critic.params().size();
}

Eigen::VectorXd PolicyNet::flat() const {
  Eigen::VectorXd v(parameter_count());
  v << actor.params(), log_std, critic.params();
  return v;
}

void PolicyNet::set_flat(const Eigen::VectorXd& p) {
  if (p.size() != parameter_count()) throw ShapeError("PolicyNet::set_flat: wrong parameter count");
  const Eigen::Index na = actor.params().size();
  actor.params() = p.head(na);
  log_std = p.segment<2>(na);
  critic.params() = p.tail(critic.params().size());
}

double PolicyNet::value(const AdaptState& s) const { return critic.forward(to_vector(s))(0, 0); }

AdaptAction squash(const Eigen::Vector2d& u) {
  return {kMaxAdjust * std::tanh(u(0)), kMaxAdjust * std::tanh(u(1))};
}

AdaptAction policy_act(const PolicyNet& policy, const AdaptState& state, bool deterministic, Rng& rng) {
  const Eigen::Vector2d mean = policy.actor.forward(to_vector(state)).col(0);
  if (deterministic) return squash(mean);
  const Eigen::Vector2d sigma = policy.log_std.array().exp();
  Eigen::Vector2d u;
  u(0) = mean(0) + sigma(0) * rng.normal();
  u(1) = mean(1) + sigma(1) * rng.normal();
  return squash(u);
}

double log_prob(const PolicyNet& policy, const Eigen::VectorXd& state, const Eigen::Vector2d& u) {
  const Eigen::Vector2d mean = policy.actor.forward(state).col(0);
  double lp = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double z = (u(k) - mean(k)) / std::exp(policy.log_std(k));
    lp += -0.5 * z * z - policy.log_std(k) - kHalfLog2Pi;
  }
  return lp;
}

Eigen::VectorXd standardize(const Eigen::VectorXd& x) {
  if (x.size() == 0) return x;
  const double mean = x.mean();
  const Eigen::VectorXd c = x.array() - mean;
  const double sd = std::sqrt(c.squaredNorm() / static_cast<double>(x.size()));
  if (!(sd > 1e-12)) return Eigen::VectorXd::Zero(x.size());
  Eigen::VectorXd z = c / sd;
  // A second pass removes the rounding residue left in the mean.
  z.array() -= z.mean();
  return z / std::sqrt(z.squaredNorm() / static_cast<double>(z.size()));
}

// ---------------------------------------------------------------------------

AdaptEnv::AdaptEnv(RobotModel model, PIDGains init_gains, DisturbanceScenario scenario,
                   const PPOConfig& cfg, std::uint64_t seed)
    : model_(std::move(model)),
      init_gains_(std::move(init_gains)),
      scenario_(scenario),
      cfg_(cfg),
      seed_(seed),
      rng_(derive_seed(seed, {kTagTrajectory})) {
  model_.validate();
  scenario_.validate();
  if (init_gains_.n_joints() != model_.n_joints()) throw ShapeError("AdaptEnv: gains and model differ in n_joints");
}

AdaptState AdaptEnv::reset() {
  const TrajectorySpec spec = random_trajectory(model_.n_joints(), cfg_.episode_steps, cfg_.dt, rng_);
  return reset(spec, seed_, episode_);
}

AdaptState AdaptEnv::reset(const TrajectorySpec& spec, std::uint64_t disturbance_seed,
                           std::uint64_t episode) {
  std::optional<DisturbanceProcess> dist;
  if (scenario_.kind != DisturbanceKind::None) dist.emplace(scenario_, model_, disturbance_seed, episode);
  loop_.emplace(model_, init_gains_, spec, std::move(dist));
  ++episode_;
  decision_ = 0;
  window_errors_.clear();
  prev_qd_ = loop_->state().qd;
  prev_qdd_.assign(model_.n_joints(), 0.0);
  return current_state();
}

AdaptState AdaptEnv::current_state() const {
  const double frac = static_cast<double>(decision_) / static_cast<double>(cfg_.decisions_per_episode());
  AdaptState s = build_state(loop_->error(), loop_->state().qd, loop_->gains(), cfg_.limits, frac,
                             loop_->trajectory().mean_amplitude(), loop_->trajectory().mean_frequency());
  for (double& x : s) {
    if (!std::isfinite(x)) x = 0.0;
  }
  return s;
}

AdaptEnv::StepResult AdaptEnv::step(const AdaptAction& action) {
  if (!loop_) throw ContractError("AdaptEnv::step before reset");
  if (loop_->done() || loop_->unstable()) throw ContractError("AdaptEnv::step on a finished episode");
  const std::size_t n = model_.n_joints();
  const PIDGains before = loop_->gains();
  if (action.delta_kp != 0.0 || action.delta_kd != 0.0) {
    loop_->set_gains(apply_action(before, action, cfg_.limits));
  }

  window_errors_.clear();
  double acc = 0.0;
  std::size_t count = 0;
  std::vector<double> velocity_error(n), qdd(n), jerk(n);
  for (std::size_t k = 0; k < cfg_.decision_interval && !loop_->done(); ++k) {
    if (!loop_->step()) break;
    const auto& e = loop_->error();
    const auto& qd = loop_->state().qd;
    window_errors_.insert(window_errors_.end(), e.begin(), e.end());
    if (cfg_.reward == RewardKind::Tracking) {
      acc += compute_reward(e, qd, action, n);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        velocity_error[i] = qd[i] - loop_->reference_velocity()[i];
        qdd[i] = (qd[i] - prev_qd_[i]) / cfg_.dt;
        jerk[i] = qdd[i] - prev_qdd_[i];
      }
      prev_qd_ = qd;
      prev_qdd_ = qdd;
      acc += -norm_of(e) - 0.5 * norm_of(velocity_error) - 0.1 * norm_of(jerk);
    }
    ++count;
  }
  ++decision_;

  StepResult r;
  r.unstable = loop_->unstable();
  if (r.unstable) {
    r.reward = kRewardMin;
    r.done = true;
  } else {
    r.reward = count > 0 ? acc / static_cast<double>(count) : 0.0;
    if (cfg_.reward == RewardKind::Shaped) r.reward += shaped_reward(before, loop_->gains());
    r.reward = std::clamp(r.reward, kRewardMin, kRewardMax);
    r.done = loop_->done();
  }
  r.state = current_state();
  return r;
}

double AdaptEnv::shaped_reward(const PIDGains& before, const PIDGains& after) {
  const auto& l = cfg_.limits;
  auto flat_norm = [&](const PIDGains& g) {
    std::vector<double> v;
    for (double x : g.kp) v.push_back((x - l.kp_min) / (l.kp_max - l.kp_min));
    for (double x : g.ki) v.push_back(l.ki_max > l.ki_min ? (x - l.ki_min) / (l.ki_max - l.ki_min) : 0.0);
    for (double x : g.kd) v.push_back((x - l.kd_min) / (l.kd_max - l.kd_min));
    return v;
  };
  const auto a = flat_norm(before), b = flat_norm(after);
  double change = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) change += (a[i] - b[i]) * (a[i] - b[i]);
  double bonus = norm_of(loop_->error()) < kSuccessBand ? 10.0 : 0.0;
  return -0.05 * std::sqrt(change) + bonus;
}

// ---------------------------------------------------------------------------

PPODiagnostics ppo_update(PolicyNet& policy, Adam& optimizer, const RolloutBatch& batch,
                          const PPOConfig& cfg, std::uint64_t update_seed) {
  const Eigen::Index N = batch.size();
  if (N == 0) throw ContractError("ppo_update: empty batch");
  if (batch.actions.cols() != N || batch.log_probs.size() != N || batch.advantages.size() != N ||
      batch.returns.size() != N) {
    throw ShapeError("ppo_update: batch arrays differ in length");
  }
  const Eigen::Index mb = std::min<Eigen::Index>(static_cast<Eigen::Index>(cfg.batch_size), N);
  const Eigen::Index na = policy.actor.params().size();

  PPODiagnostics d;
  std::size_t updates = 0;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(N));
  Mlp::Cache actor_cache, critic_cache;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(update_seed, {epoch}));
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);

    for (Eigen::Index start = 0; start < N; start += mb) {
      const Eigen::Index b = std::min(mb, N - start);
      Eigen::MatrixXd S(kStateDim, b), U(2, b);
      Eigen::VectorXd old_lp(b), adv_raw(b), ret(b);
      for (Eigen::Index c = 0; c < b; ++c) {
        const Eigen::Index i = perm[static_cast<std::size_t>(start + c)];
        S.col(c) = batch.states.col(i);
        U.col(c) = batch.actions.col(i);
        old_lp(c) = batch.log_probs(i);
        adv_raw(c) = batch.advantages(i);
        ret(c) = batch.returns(i);
      }
      const Eigen::VectorXd adv = standardize(adv_raw);

      const Eigen::MatrixXd mu = policy.actor.forward(S, &actor_cache);
      const Eigen::RowVectorXd V = policy.critic.forward(S, &critic_cache).row(0);
      const Eigen::Vector2d sigma = policy.log_std.array().exp();
      const Eigen::MatrixXd z = (U - mu).array().colwise() / sigma.array();
      const double bd = static_cast<double>(b);

      Eigen::VectorXd lp(b), ratio(b), dlogp(b);
      double pg = 0.0, clipped = 0.0, kl = 0.0;
      for (Eigen::Index c = 0; c < b; ++c) {
        lp(c) = -0.5 * z.col(c).squaredNorm() - policy.log_std.sum() - 2.0 * kHalfLog2Pi;
        ratio(c) = std::exp(lp(c) - old_lp(c));
        const double r_clip = std::clamp(ratio(c), 1.0 - cfg.clip_range, 1.0 + cfg.clip_range);
        const double s1 = ratio(c) * adv(c), s2 = r_clip * adv(c);
        pg += -std::min(s1, s2);
        dlogp(c) = (s1 <= s2) ? -adv(c) * ratio(c) / bd : 0.0;
        if (std::abs(ratio(c) - 1.0) > cfg.clip_range) clipped += 1.0;
        kl += old_lp(c) - lp(c);
      }
      const double policy_loss = pg / bd;
      const double value_loss = (V.transpose() - ret).squaredNorm() / bd;
      const double entropy = 2.0 * (0.5 + kHalfLog2Pi) + policy.log_std.sum();
      const double loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy;
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "ppo_update: non-finite loss (policy " << policy_loss << ", value " << value_loss
            << ", entropy " << entropy << ", log_std [" << policy.log_std.transpose()
            << "], max |adv| " << adv.cwiseAbs().maxCoeff() << ", epoch " << epoch << ")";
        throw NumericError(msg.str());
      }

      Eigen::MatrixXd dmu = (z.array().colwise() / sigma.array()).matrix();
      dmu = dmu.array().rowwise() * dlogp.transpose().array();
      Eigen::Vector2d dlog_std;
      for (int k = 0; k < 2; ++k) {
        dlog_std(k) = (dlogp.array() * (z.row(k).transpose().array().square() - 1.0)).sum() -
                      cfg.entropy_coef;
      }
      const Eigen::MatrixXd dV = (cfg.value_coef * 2.0 / bd) * (V - ret.transpose());

      Eigen::VectorXd g_actor = Eigen::VectorXd::Zero(na);
      Eigen::VectorXd g_critic = Eigen::VectorXd::Zero(policy.critic.params().size());
      policy.actor.backward(actor_cache, dmu, g_actor);
      policy.critic.backward(critic_cache, dV, g_critic);
      Eigen::VectorXd grad(policy.parameter_count());
      grad << g_actor, dlog_std, g_critic;
      const double gn = clip_grad_norm(grad, cfg.max_grad_norm);

      Eigen::VectorXd params = policy.flat();
      optimizer.step(params, grad);
      policy.set_flat(params);
      policy.log_std = policy.log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);

      d.policy_loss += policy_loss;
      d.value_loss += value_loss;
      d.entropy += entropy;
      d.clip_fraction += clipped / bd;
      d.grad_norm += gn;
      d.max_grad_norm = std::max(d.max_grad_norm, gn);
      d.approx_kl += kl / bd;
      ++updates;
    }
  }
  const double u = static_cast<double>(updates);
  d.policy_loss /= u;
  d.value_loss /= u;
  d.entropy /= u;
  d.clip_fraction /= u;
  d.grad_norm /= u;
  d.approx_kl /= u;
  return d;
}

// ---------------------------------------------------------------------------

namespace {

struct EnvRollout {
  Eigen::MatrixXd states, actions;
  std::vector<double> log_probs, values, rewards, dones;
  std::vector<double> finished_returns;
};

}  // namespace

RLResult train_rl(const RobotModel& model, const PIDGains& init_gains,
                  const DisturbanceScenario& scenario, const PPOConfig& cfg,
                  const IterationFn& on_iteration) {
  cfg.validate();
  model.validate();
  if (init_gains.n_joints() != model.n_joints()) throw ShapeError("train_rl: gains and model differ in n_joints");
  if (!init_gains.within(cfg.limits)) throw ContractError("train_rl: initial gains outside the gain limits");

  Rng init_rng(derive_seed(cfg.seed, {kTagInit}));
  RLResult result;
  result.policy = PolicyNet::create(cfg.hidden, cfg.log_std_init, init_rng);
  PolicyNet& policy = result.policy;
  Adam adam(policy.parameter_count(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0});

  const std::size_t E = cfg.n_envs, T = cfg.steps_per_env;
  std::vector<AdaptEnv> envs;
  std::vector<Rng> action_rngs;
  std::vector<AdaptState> obs(E);
  std::vector<double> running(E, 0.0);
  for (std::size_t e = 0; e < E; ++e) {
    envs.emplace_back(model, init_gains, scenario, cfg, derive_seed(cfg.seed, {kTagEnv, e}));
    action_rngs.emplace_back(derive_seed(cfg.seed, {kTagAction, e}));
    obs[e] = envs[e].reset();
  }

  std::vector<EnvRollout> rollouts(E);
  for (std::size_t it = 1; it <= cfg.iterations(); ++it) {
    const PolicyNet& snapshot = policy;
    parallel_for(E, cfg.jobs, [&](std::size_t e) {
      EnvRollout& ro = rollouts[e];
      ro.states.resize(kStateDim, static_cast<Eigen::Index>(T));
      ro.actions.resize(2, static_cast<Eigen::Index>(T));
      ro.log_probs.assign(T, 0.0);
      ro.values.assign(T + 1, 0.0);
      ro.rewards.assign(T, 0.0);
      ro.dones.assign(T, 0.0);
      ro.finished_returns.clear();
      const Eigen::Vector2d sigma = snapshot.log_std.array().exp();
      for (std::size_t t = 0; t < T; ++t) {
        const Eigen::VectorXd s = to_vector(obs[e]);
        const Eigen::Vector2d mean = snapshot.actor.forward(s).col(0);
        Eigen::Vector2d u;
        for (int k = 0; k < 2; ++k) u(k) = mean(k) + sigma(k) * action_rngs[e].normal();
        double lp = 0.0;
        for (int k = 0; k < 2; ++k) {
          const double z = (u(k) - mean(k)) / sigma(k);
          lp += -0.5 * z * z - snapshot.log_std(k) - kHalfLog2Pi;
        }
        const auto col = static_cast<Eigen::Index>(t);
        ro.states.col(col) = s;
        ro.actions.col(col) = u;
        ro.log_probs[t] = lp;
        ro.values[t] = snapshot.critic.forward(s)(0, 0);

        const AdaptEnv::StepResult step = envs[e].step(squash(u));
        ro.rewards[t] = step.reward;
        running[e] += step.reward;
        if (step.done) {
          ro.dones[t] = 1.0;
          ro.finished_returns.push_back(running[e]);
          running[e] = 0.0;
          obs[e] = envs[e].reset();
        } else {
          obs[e] = step.state;
        }
      }
      ro.values[T] = snapshot.critic.forward(to_vector(obs[e]))(0, 0);
    });

    RolloutBatch batch;
    const auto total = static_cast<Eigen::Index>(E * T);
    batch.states.resize(kStateDim, total);
    batch.actions.resize(2, total);
    batch.log_probs.resize(total);
    batch.values.resize(total);
    batch.advantages.resize(total);
    batch.returns.resize(total);
    double ret_sum = 0.0, reward_sum = 0.0;
    std::size_t episodes = 0;
    for (std::size_t e = 0; e < E; ++e) {
      const EnvRollout& ro = rollouts[e];
      const GaeResult g = gae(ro.rewards, ro.values, ro.dones, cfg.gamma, cfg.gae_lambda);
      const auto off = static_cast<Eigen::Index>(e * T);
      batch.states.middleCols(off, static_cast<Eigen::Index>(T)) = ro.states;
      batch.actions.middleCols(off, static_cast<Eigen::Index>(T)) = ro.actions;
      for (std::size_t t = 0; t < T; ++t) {
        const auto i = off + static_cast<Eigen::Index>(t);
        batch.log_probs(i) = ro.log_probs[t];
        batch.values(i) = ro.values[t];
        batch.advantages(i) = g.advantages[t];
        batch.returns(i) = g.returns[t];
        reward_sum += ro.rewards[t];
      }
      for (double r : ro.finished_returns) ret_sum += r;
      episodes += ro.finished_returns.size();
    }

    TrainLogRow row;
    row.iteration = it;
    row.timesteps = it * E * T;
    row.episodes = episodes;
    row.mean_ep_reward = episodes > 0
                             ? ret_sum / static_cast<double>(episodes)
                             : reward_sum / static_cast<double>(E * T) *
                                   static_cast<double>(cfg.decisions_per_episode());
    row.diag = ppo_update(policy, adam, batch, cfg, derive_seed(cfg.seed, {kTagUpdate, it}));
    result.log.push_back(row);
    if (on_iteration) on_iteration(row);
  }
  return result;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const PolicyNet& p) {
  j = nlohmann::json{
      {"schema_version", kPolicySchemaVersion},
      {"kind", "policy"},
      {"state_dim", kStateDim},
      {"action_dim", kActionDim},
      {"action_scale", kMaxAdjust},
      {"actor", p.actor},
      {"critic", p.critic},
      {"log_std", {p.log_std(0), p.log_std(1)}},
  };
}

void from_json(const nlohmann::json& j, PolicyNet& p) {
  if (j.value("kind", "") != "policy") throw DataError("not a policy checkpoint");
  const int version = j.at("schema_version").get<int>();
  if (version != kPolicySchemaVersion) {
    throw VersionError("unsupported policy schema_version " + std::to_string(version));
  }
  PolicyNet out;
  j.at("actor").get_to(out.actor);
  j.at("critic").get_to(out.critic);
  if (out.actor.input_dim() != static_cast<Eigen::Index>(kStateDim) ||
      out.actor.output_dim() != static_cast<Eigen::Index>(kActionDim) ||
      out.critic.input_dim() != static_cast<Eigen::Index>(kStateDim) || out.critic.output_dim() != 1) {
    throw ShapeError("policy checkpoint has wrong actor/critic dimensions");
  }
  const auto ls = j.at("log_std").get<std::vector<double>>();
  if (ls.size() != kActionDim) throw ShapeError("policy log_std must have 2 entries");
  out.log_std << ls[0], ls[1];
  p = std::move(out);
}

void to_json(nlohmann::json& j, const PPOConfig& c) {
  j = nlohmann::json{
      {"total_timesteps", c.total_timesteps},
      {"n_envs", c.n_envs},
      {"steps_per_env", c.steps_per_env},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"clip_range", c.clip_range},
      {"learning_rate", c.learning_rate},
      {"gamma", c.gamma},
      {"gae_lambda", c.gae_lambda},
      {"entropy_coef", c.entropy_coef},
      {"value_coef", c.value_coef},
      {"max_grad_norm", c.max_grad_norm},
      {"log_std_init", c.log_std_init},
      {"hidden", c.hidden},
      {"decision_interval", c.decision_interval},
      {"episode_steps", c.episode_steps},
      {"dt", c.dt},
      {"reward", std::string(to_string(c.reward))},
      {"limits", c.limits},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::json& j, PPOConfig& c) {
  static const std::set<std::string> known = {
      "total_timesteps", "n_envs",       "steps_per_env", "batch_size",   "epochs",
      "clip_range",      "learning_rate", "gamma",        "gae_lambda",   "entropy_coef",
      "value_coef",      "max_grad_norm", "log_std_init", "hidden",       "decision_interval",
      "episode_steps",   "dt",            "reward",       "limits",       "seed"};
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) throw ConfigError("unknown PPO config key '" + item.key() + "'");
  }
  PPOConfig out = c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("total_timesteps", out.total_timesteps);
  get("n_envs", out.n_envs);
  get("steps_per_env", out.steps_per_env);
  get("batch_size", out.batch_size);
  get("epochs", out.epochs);
  get("clip_range", out.clip_range);
  get("learning_rate", out.learning_rate);
  get("gamma", out.gamma);
  get("gae_lambda", out.gae_lambda);
  get("entropy_coef", out.entropy_coef);
  get("value_coef", out.value_coef);
  get("max_grad_norm", out.max_grad_norm);
  get("log_std_init", out.log_std_init);
  get("hidden", out.hidden);
  get("decision_interval", out.decision_interval);
  get("episode_steps", out.episode_steps);
  get("dt", out.dt);
  if (j.contains("reward")) out.reward = reward_kind_from_string(j.at("reward").get<std::string>());
  get("limits", out.limits);
  get("seed", out.seed);
  c = out;
}

void save_policy(const PolicyNet& policy, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write policy checkpoint '" + path + "'", path);
  out << nlohmann::json(policy).dump() << '\n';
  if (!out) throw IoError("failed writing policy checkpoint '" + path + "'", path);
}

PolicyNet load_policy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open policy checkpoint '" + path + "'", path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": malformed JSON (" + e.what() + ")", 0);
  }
  try {
    return j.get<PolicyNet>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what(), 0);
  }
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write training log '" + path + "'", path);
  out << "iteration,timesteps,mean_ep_reward,policy_loss,value_loss,entropy,clip_fraction,grad_norm\n";
  for (const auto& r : log) {
    out << r.iteration << ',' << r.timesteps << ',' << fmt(r.mean_ep_reward) << ','
        << fmt(r.diag.policy_loss) << ',' << fmt(r.diag.value_loss) << ',' << fmt(r.diag.entropy)
        << ',' << fmt(r.diag.clip_fraction) << ',' << fmt(r.diag.grad_norm) << '\n';
  }
  if (!out) throw IoError("failed writing training log '" + path + "'", path);
}

}  // namespace metapid
