#include <gtest/gtest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "metapid/errors.hpp"
#include "metapid/rladapt.hpp"
#include "test_util.hpp"

using namespace metapid;

namespace {

PPOConfig tiny(std::uint64_t seed = 0) {
  PPOConfig c;
  c.n_envs = 3;
  c.steps_per_env = 16;
  c.batch_size = 16;
  c.epochs = 2;
  c.hidden = 16;
  c.episode_steps = 400;
  c.total_timesteps = 3 * 16 * 2;
  c.seed = seed;
  return c;
}

RolloutBatch random_batch(const PolicyNet& p, Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  RolloutBatch b;
  b.states = Eigen::MatrixXd(kStateDim, n);
  b.actions = Eigen::MatrixXd(2, n);
  b.log_probs.resize(n);
  b.values.resize(n);
  b.advantages.resize(n);
  b.returns.resize(n);
  for (Eigen::Index c = 0; c < n; ++c) {
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(kStateDim); ++r) b.states(r, c) = rng.uniform(-1, 1);
    b.actions(0, c) = rng.normal();
    b.actions(1, c) = rng.normal();
    b.log_probs(c) = log_prob(p, b.states.col(c), b.actions.col(c));
    b.values(c) = rng.uniform(-1, 1);
    b.advantages(c) = rng.normal() * 3.0 + 1.0;
    b.returns(c) = b.values(c) + b.advantages(c);
  }
  return b;
}

}  // namespace

TEST(BuildState, NineJointsAtRest) {
  const std::vector<double> zero(9, 0.0);
  const auto s = build_state(zero, zero, PIDGains{std::vector<double>(9, 0.1), std::vector<double>(9, 0.0),
                                                  std::vector<double>(9, 0.1)},
                             GainLimits{}, 0.0, 0.45, 0.3);
  for (std::size_t k = 0; k < 21; ++k) EXPECT_EQ(s[k], 0.0) << k;
  EXPECT_EQ(s[21], 0.45);
  EXPECT_EQ(s[22], 0.3);
}

TEST(BuildState, TwoJointsArePadded) {
  const std::vector<double> e{0.1, -0.2}, qd{0.3, 0.4};
  const auto s = build_state(e, qd, PIDGains::midpoint(2), GainLimits{}, 0.5, 0.5, 0.25);
  EXPECT_EQ(s.size(), 23u);
  EXPECT_EQ(s[0], 0.1);
  EXPECT_EQ(s[1], -0.2);
  EXPECT_EQ(s[9], 0.3);
  EXPECT_EQ(s[10], 0.4);
  for (std::size_t k = 2; k < 9; ++k) EXPECT_EQ(s[k], 0.0);
  for (std::size_t k = 11; k < 18; ++k) EXPECT_EQ(s[k], 0.0);
  EXPECT_NEAR(s[18], 0.5, 1e-15);
  EXPECT_NEAR(s[19], 0.5, 1e-15);
  EXPECT_EQ(s[20], 0.5);
}

TEST(BuildState, LargeRobotsKeepWorstJointsInOrder) {
  std::vector<double> e(12), qd(12);
  for (std::size_t i = 0; i < 12; ++i) {
    e[i] = 0.01 * static_cast<double>(i + 1) * (i % 2 ? -1.0 : 1.0);
    qd[i] = 100.0 + static_cast<double>(i);
  }
  // Joints 0, 1, 2 have the smallest |e| and are dropped.
  const auto s = build_state(e, qd, PIDGains::midpoint(12), GainLimits{}, 0.0, 0.5, 0.2);
  for (std::size_t k = 0; k < 9; ++k) {
    EXPECT_EQ(s[k], e[k + 3]);
    EXPECT_EQ(s[9 + k], qd[k + 3]);
  }
}

TEST(Reward, Examples) {
  const std::vector<double> e(9, 1.0), zero9(9, 0.0);
  EXPECT_DOUBLE_EQ(compute_reward(e, zero9, AdaptAction{}, 9), -10.0);
  const std::vector<double> z2(2, 0.0);
  EXPECT_EQ(compute_reward(z2, z2, AdaptAction{}, 2), 0.0);
  const std::vector<double> big{25.0};
  EXPECT_EQ(compute_reward(big, std::vector<double>{0.0}, AdaptAction{}, 1), -100.0);
  const std::vector<double> nan{NAN};
  EXPECT_EQ(compute_reward(nan, std::vector<double>{0.0}, AdaptAction{}, 1), -100.0);
}

TEST(Reward, MatchesFormulaAndStaysClipped) {
  Rng rng(2);
  for (int k = 0; k < 500; ++k) {
    const std::size_t n = 1 + rng.index(12);
    std::vector<double> e(n), qd(n);
    double se = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      e[i] = rng.uniform(-3, 3);
      qd[i] = rng.uniform(-20, 20);
      se += e[i] * e[i];
      sq += qd[i] * qd[i];
    }
    const AdaptAction a{rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};
    const double r = compute_reward(e, qd, a, n);
    const double raw = -10 * std::sqrt(se / n) - 0.1 * std::sqrt(sq / n) -
                       0.1 * std::sqrt(a.delta_kp * a.delta_kp + a.delta_kd * a.delta_kd);
    EXPECT_NEAR(r, std::clamp(raw, -100.0, 10.0), 1e-12);
    EXPECT_LE(r, 10.0);
    EXPECT_GE(r, -100.0);
  }
}

TEST(ApplyAction, Examples) {
  const PIDGains g{{100.0, 450.0}, {0.3, 0.4}, {50.0, 10.0}};
  const auto up = apply_action(g, {0.2, 0.0});
  EXPECT_DOUBLE_EQ(up.kp[0], 120.0);
  EXPECT_DOUBLE_EQ(up.kp[1], 500.0);
  EXPECT_EQ(up.ki, g.ki);
  EXPECT_EQ(up.kd, g.kd);
  EXPECT_EQ(apply_action(g, {}), g);
}

TEST(ApplyAction, LegalActionsKeepGainsInBounds) {
  Rng rng(5);
  for (int k = 0; k < 300; ++k) {
    PIDGains g{{rng.uniform(0.1, 500)}, {rng.uniform(0, 1)}, {rng.uniform(0.1, 500)}};
    const auto out = apply_action(g, {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)});
    EXPECT_TRUE(out.within(GainLimits{}));
    EXPECT_GT(out.kp[0], 0.0);
  }
}

TEST(Gae, Examples) {
  const auto one = gae(std::vector<double>{1.0}, std::vector<double>{0.0, 0.0}, std::vector<double>{0.0},
                       0.99, 0.95);
  EXPECT_DOUBLE_EQ(one.advantages[0], 1.0);
  const auto two = gae(std::vector<double>{1.0, 1.0}, std::vector<double>(3, 0.0), std::vector<double>(2, 0.0),
                       0.99, 0.95);
  EXPECT_NEAR(two.advantages[0], 1.9405, 1e-12);
  EXPECT_DOUBLE_EQ(two.advantages[1], 1.0);
  EXPECT_THROW(gae(std::vector<double>{1.0}, std::vector<double>{0.0}, std::vector<double>{0.0}, 0.9, 0.9),
               ShapeError);
}

TEST(Gae, LambdaZeroIsTdError) {
  Rng rng(1);
  std::vector<double> r(10), v(11), d(10);
  for (auto& x : r) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  for (std::size_t t = 0; t < 10; ++t) d[t] = t == 4 ? 1.0 : 0.0;
  const auto out = gae(r, v, d, 0.9, 0.0);
  for (std::size_t t = 0; t < 10; ++t) {
    EXPECT_NEAR(out.advantages[t], r[t] + 0.9 * (1 - d[t]) * v[t + 1] - v[t], 1e-14);
    EXPECT_NEAR(out.returns[t], out.advantages[t] + v[t], 1e-14);
  }
}

TEST(Gae, UndiscountedEqualsRewardToGoMinusValue) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> r(10), v(11), d(10, 0.0);
    for (auto& x : r) x = rng.uniform(-5, 5);
    for (auto& x : v) x = rng.uniform(-5, 5);
    const auto out = gae(r, v, d, 1.0, 1.0);
    for (std::size_t t = 0; t < 10; ++t) {
      double togo = v[10];
      for (std::size_t k = t; k < 10; ++k) togo += r[k];
      EXPECT_NEAR(out.advantages[t], togo - v[t], 1e-12);
    }
  }
}

TEST(Standardize, ExactMomentsAndDegenerateInput) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd x(2 + rng.index(300));
    for (Eigen::Index k = 0; k < x.size(); ++k) x[k] = rng.normal() * 1e3 + 17.0;
    const Eigen::VectorXd z = standardize(x);
    EXPECT_LT(std::abs(z.mean()), 1e-10);
    EXPECT_NEAR(std::sqrt(z.squaredNorm() / z.size()), 1.0, 1e-10);
  }
  EXPECT_EQ(standardize(Eigen::VectorXd::Constant(5, 3.0)), Eigen::VectorXd::Zero(5));
}

TEST(Policy, ZeroActorActsZeroDeterministically) {
  const auto p = PolicyNet::zeros(32);
  Rng a(1), b(2);
  AdaptState s{};
  s.fill(0.7);
  EXPECT_EQ(policy_act(p, s, true, a), AdaptAction{});
  EXPECT_EQ(policy_act(p, s, true, b), AdaptAction{});
}

TEST(Policy, SampledActionsWithinBounds) {
  Rng init(3);
  auto p = PolicyNet::create(32, 1.0, init);
  Rng rng(9);
  AdaptState s{};
  for (int k = 0; k < 2000; ++k) {
    for (double& x : s) x = rng.uniform(-3, 3);
    const auto a = policy_act(p, s, false, rng);
    EXPECT_LE(std::abs(a.delta_kp), 0.2);
    EXPECT_LE(std::abs(a.delta_kd), 0.2);
  }
}

TEST(Policy, DeterministicModeIgnoresRng) {
  Rng init(3);
  const auto p = PolicyNet::create(32, 0.0, init);
  AdaptState s{};
  s[0] = 0.4;
  Rng a(1), b(99);
  EXPECT_EQ(policy_act(p, s, true, a), policy_act(p, s, true, b));
  EXPECT_EQ(a.next(), Rng(1).next());
}

TEST(Policy, LogProbMatchesGaussianDensity) {
  Rng init(3);
  auto p = PolicyNet::create(8, 0.0, init);
  p.log_std << -0.3, 0.2;
  Eigen::VectorXd s = Eigen::VectorXd::LinSpaced(kStateDim, -1, 1);
  const Eigen::Vector2d mean = p.actor.forward(s).col(0);
  const Eigen::Vector2d u(0.4, -0.1);
  double expect = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double sd = std::exp(p.log_std(k));
    expect += std::log(std::exp(-0.5 * std::pow((u(k) - mean(k)) / sd, 2)) / (sd * std::sqrt(2 * M_PI)));
  }
  EXPECT_NEAR(log_prob(p, s, u), expect, 1e-12);
}

TEST(Policy, FlatRoundTripAndJson) {
  Rng init(5);
  auto p = PolicyNet::create(16, -0.5, init);
  PolicyNet q = PolicyNet::zeros(16);
  q.set_flat(p.flat());
  EXPECT_EQ(q, p);
  const nlohmann::json j = p;
  EXPECT_EQ(j.get<PolicyNet>(), p);
  metapid::testing::TempDir dir("policy");
  save_policy(p, dir.file("p.json"));
  EXPECT_EQ(load_policy(dir.file("p.json")), p);
  EXPECT_THROW(load_policy(dir.file("none.json")), IoError);
}

TEST(PpoUpdate, FreshPolicyHasUnitRatioAndNoClipping) {
  Rng init(1);
  auto p = PolicyNet::create(16, 0.0, init);
  const auto batch = random_batch(p, 64, 2);
  PPOConfig cfg = tiny();
  cfg.batch_size = 64;
  cfg.epochs = 1;
  Adam adam(p.parameter_count(), AdamConfig{cfg.learning_rate});
  const auto d = ppo_update(p, adam, batch, cfg, 0);
  EXPECT_EQ(d.clip_fraction, 0.0);
  EXPECT_NEAR(d.approx_kl, 0.0, 1e-15);
}

TEST(PpoUpdate, ZeroAdvantagesGiveZeroPolicyLoss) {
  Rng init(1);
  auto p = PolicyNet::create(16, 0.0, init);
  auto batch = random_batch(p, 32, 3);
  batch.advantages.setZero();
  PPOConfig cfg = tiny();
  cfg.batch_size = 32;
  cfg.epochs = 1;
  Adam adam(p.parameter_count(), AdamConfig{cfg.learning_rate});
  EXPECT_EQ(ppo_update(p, adam, batch, cfg, 0).policy_loss, 0.0);
}

TEST(PpoUpdate, ClippedGradNormNeverExceedsLimit) {
  Rng init(1);
  auto p = PolicyNet::create(16, 0.0, init);
  auto batch = random_batch(p, 96, 4);
  batch.returns *= 100.0;  // large value error, large raw gradient
  PPOConfig cfg = tiny();
  cfg.batch_size = 16;
  cfg.epochs = 4;
  Adam adam(p.parameter_count(), AdamConfig{1e-3});
  const auto d = ppo_update(p, adam, batch, cfg, 7);
  EXPECT_LE(d.max_grad_norm, 0.5);
  EXPECT_LE(d.grad_norm, 0.5);
  EXPECT_GE(p.log_std.minCoeff(), kLogStdMin);
  EXPECT_LE(p.log_std.maxCoeff(), kLogStdMax);
}

TEST(PpoUpdate, NonFiniteLossAborts) {
  Rng init(1);
  auto p = PolicyNet::create(16, 0.0, init);
  auto batch = random_batch(p, 16, 5);
  batch.returns(3) = NAN;
  PPOConfig cfg = tiny();
  Adam adam(p.parameter_count(), AdamConfig{cfg.learning_rate});
  EXPECT_THROW(ppo_update(p, adam, batch, cfg, 0), NumericError);
}

TEST(PpoConfig, SchedulingAndValidation) {
  PPOConfig c;
  EXPECT_EQ(c.iterations(), 3u);
  c.total_timesteps = c.n_envs * c.steps_per_env;
  EXPECT_EQ(c.iterations(), 1u);
  EXPECT_EQ(c.decisions_per_episode(), 40u);
  c.batch_size = 300;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PPOConfig{};
  c.log_std_init = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
  const nlohmann::json j = PPOConfig{};
  EXPECT_EQ(j.get<PPOConfig>().batch_size, 256u);
  nlohmann::json bad = j;
  bad["learning_rat"] = 1.0;
  EXPECT_THROW(bad.get<PPOConfig>(), ConfigError);
}

TEST(AdaptEnv, ZeroActionMatchesFixedGainLoop) {
  const auto m = robot_preset("toy2");
  PPOConfig cfg = tiny();
  AdaptEnv env(m, PIDGains::uniform(2, 300, 0.1, 50), DisturbanceScenario{}, cfg, 3);
  const TrajectorySpec spec{{0.5, 0.4}, {0.2, 0.3}, {0.0, 1.0}, {0.1, 0.0}, 400, 0.01};
  env.reset(spec, 3, 0);
  ClosedLoop ref(m, PIDGains::uniform(2, 300, 0.1, 50), spec);
  std::size_t decisions = 0;
  while (true) {
    const auto r = env.step({});
    ++decisions;
    for (std::size_t k = 0; k < env.window_errors().size() / 2; ++k) {
      ref.step();
      ASSERT_EQ(env.window_errors()[2 * k], ref.error()[0]);
      ASSERT_EQ(env.window_errors()[2 * k + 1], ref.error()[1]);
    }
    EXPECT_LE(r.reward, 10.0);
    EXPECT_GE(r.reward, -100.0);
    if (r.done) break;
  }
  EXPECT_EQ(decisions, 8u);
  EXPECT_EQ(env.loop().gains(), PIDGains::uniform(2, 300, 0.1, 50));
}

TEST(AdaptEnv, RewardIsWindowMean) {
  const auto m = robot_preset("toy2");
  PPOConfig cfg = tiny();
  AdaptEnv env(m, PIDGains::uniform(2, 200, 0.0, 30), DisturbanceScenario{}, cfg, 1);
  const TrajectorySpec spec{{0.5, 0.4}, {0.2, 0.3}, {0.0, 1.0}, {0.1, 0.0}, 400, 0.01};
  env.reset(spec, 1, 0);
  ClosedLoop ref(m, PIDGains::uniform(2, 200, 0.0, 30), spec);
  const AdaptAction a{0.1, -0.05};
  const auto r = env.step(a);
  ref.set_gains(apply_action(ref.gains(), a));
  double sum = 0.0;
  for (int k = 0; k < 50; ++k) {
    ref.step();
    sum += compute_reward(ref.error(), ref.state().qd, a, 2);
  }
  EXPECT_NEAR(r.reward, sum / 50.0, 1e-12);
  EXPECT_NEAR(r.state[20], 1.0 / 8.0, 1e-15);
}

TEST(AdaptEnv, InstabilityEndsEpisodeWithFloorReward) {
  const auto m = robot_preset("toy2");
  PPOConfig cfg = tiny();
  cfg.limits.kd_min = -500.0;  // admit a destabilizing controller
  AdaptEnv env(m, PIDGains::uniform(2, 500, 0.0, -500), DisturbanceScenario{}, cfg, 1);
  env.reset();
  AdaptEnv::StepResult r;
  do r = env.step({}); while (!r.done);
  EXPECT_TRUE(r.unstable);
  EXPECT_EQ(r.reward, -100.0);
}

TEST(TrainRl, DeterministicAndIndependentOfJobs) {
  const auto m = robot_preset("toy2");
  const auto g = PIDGains::uniform(2, 250, 0.1, 60);
  PPOConfig serial = tiny(11), parallel = tiny(11);
  parallel.jobs = 3;
  const auto a = train_rl(m, g, DisturbanceScenario::of(DisturbanceKind::RandomForce), serial);
  const auto b = train_rl(m, g, DisturbanceScenario::of(DisturbanceKind::RandomForce), parallel);
  const auto c = train_rl(m, g, DisturbanceScenario::of(DisturbanceKind::RandomForce), serial);
  ASSERT_EQ(a.log.size(), 2u);
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(a.policy, b.policy);
  EXPECT_EQ(a.log, c.log);
  EXPECT_EQ(a.log[1].timesteps, 2u * 3u * 16u);
}

TEST(TrainRl, OneIterationWhenBudgetIsOneBatch) {
  PPOConfig cfg = tiny();
  cfg.total_timesteps = cfg.n_envs * cfg.steps_per_env;
  const auto r = train_rl(robot_preset("toy2"), PIDGains::midpoint(2), DisturbanceScenario{}, cfg);
  EXPECT_EQ(r.log.size(), 1u);
}

TEST(TrainRl, RejectsGainsOutsideLimits) {
  EXPECT_THROW(train_rl(robot_preset("toy2"), PIDGains::uniform(2, 900, 0, 1), DisturbanceScenario{}, tiny()),
               ContractError);
}

TEST(TrainLog, CsvHasDashboardColumns) {
  metapid::testing::TempDir dir("log");
  const auto r = train_rl(robot_preset("toy2"), PIDGains::midpoint(2), DisturbanceScenario{}, tiny());
  write_train_log(r.log, dir.file("log.csv"));
  const std::string text = metapid::testing::slurp(dir.file("log.csv"));
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "iteration,timesteps,mean_ep_reward,policy_loss,value_loss,entropy,clip_fraction,grad_norm");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
