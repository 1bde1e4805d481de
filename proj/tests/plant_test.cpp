#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "metapid/errors.hpp"
#include "metapid/plant.hpp"
#include "test_util.hpp"

using namespace metapid;

namespace {

RobotModel two_joint(double gravity = 0.0, double friction = 0.0, double damping = 0.3) {
  RobotModel m;
  m.name = "test2";
  m.mass_per_link = {2.0, 1.0};
  m.inertia_per_joint = {0.5, 0.2};
  m.link_length = {0.4, 0.3};
  m.com_offset = {0.2, 0.15};
  m.viscous_damping = {damping, damping};
  m.coulomb_friction = {friction, friction};
  m.torque_limit = {50.0, 20.0};
  m.gravity_gain = {gravity, gravity};
  return m;
}

TrajectorySpec single(double a, double f, double phi, double q0, std::size_t steps = 1000,
                      double dt = 0.01) {
  return {{a}, {f}, {phi}, {q0}, steps, dt};
}

}  // namespace

TEST(Reference, ZeroPhaseStartsAtOffsetWithPeakVelocity) {
  const Reference r = make_reference(single(0.5, 0.25, 0.0, 1.0), 0);
  EXPECT_DOUBLE_EQ(r.q[0], 1.0);
  EXPECT_NEAR(r.qd[0], 0.5 * 2.0 * std::numbers::pi * 0.25, 1e-15);
}

TEST(Reference, QuarterPhaseStartsAtPeak) {
  const Reference r = make_reference(single(0.5, 0.25, std::numbers::pi / 2, 0.0), 0);
  EXPECT_DOUBLE_EQ(r.q[0], 0.5);
  EXPECT_NEAR(r.qd[0], 0.0, 1e-15);
}

TEST(Reference, PeriodicInOnePeriod) {
  // f = 0.25 Hz at dt = 0.01 gives a 400-step period.
  const auto spec = single(0.7, 0.25, 0.3, -0.2, 1000);
  for (std::size_t k : {0u, 17u, 250u, 599u}) {
    EXPECT_NEAR(make_reference(spec, k).q[0], make_reference(spec, k + 400).q[0], 1e-12);
  }
}

TEST(Reference, StepPastEndThrows) {
  const auto spec = single(0.5, 0.25, 0.0, 0.0, 10);
  EXPECT_NO_THROW(make_reference(spec, 9));
  EXPECT_THROW(make_reference(spec, 10), RangeError);
}

TEST(Reference, VelocityMatchesCentralDifference) {
  Rng rng(11);
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const auto spec = random_trajectory(3, 200, 0.01, rng);
    const std::size_t step = 1 + rng.index(190);
    TrajectorySpec plus = spec, minus = spec;
    // Shift time by ±h through the phase: q(t ± h) = A sin(2πf t + φ ± 2πf h) + q0.
    for (std::size_t i = 0; i < 3; ++i) {
      plus.phase[i] += 2.0 * std::numbers::pi * spec.frequency[i] * h;
      minus.phase[i] -= 2.0 * std::numbers::pi * spec.frequency[i] * h;
    }
    const auto r = make_reference(spec, step);
    const auto rp = make_reference(plus, step);
    const auto rm = make_reference(minus, step);
    for (std::size_t i = 0; i < 3; ++i) {
      const double fd = (rp.q[i] - rm.q[i]) / (2.0 * h);
      EXPECT_NEAR(fd, r.qd[i], 1e-6 * std::max(1.0, std::abs(r.qd[i])));
    }
  }
}

TEST(RandomTrajectory, RespectsSamplingRanges) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_trajectory(9, 100, 0.01, rng);
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_GE(s.amplitude[i], 0.2);
      EXPECT_LE(s.amplitude[i], 0.8);
      EXPECT_GE(s.frequency[i], 0.1);
      EXPECT_LE(s.frequency[i], 0.5);
    }
  }
}

TEST(StepPlant, ZeroTorqueAtRestOnlyAdvancesTime) {
  const auto m = two_joint();
  PlantState s{{0.3, -0.2}, {0.0, 0.0}, 1.0};
  const std::vector<double> u{0.0, 0.0};
  const PlantState next = step_plant(m, s, u, {}, 0.01);
  EXPECT_EQ(next.q, s.q);
  EXPECT_EQ(next.qd, s.qd);
  EXPECT_DOUBLE_EQ(next.t, 1.01);
}

TEST(StepPlant, ViscousDampingShrinksSpeed) {
  const auto m = two_joint();
  PlantState s{{0.0, 0.0}, {1.0, -1.0}, 0.0};
  const std::vector<double> u{0.0, 0.0};
  const PlantState next = step_plant(m, s, u, {}, 0.01);
  EXPECT_LT(std::abs(next.qd[0]), 1.0);
  EXPECT_LT(std::abs(next.qd[1]), 1.0);
}

TEST(StepPlant, TorqueIsClampedAtLimit) {
  const auto m = two_joint(1.0, 0.1);
  PlantState s{{0.1, 0.2}, {0.3, 0.4}, 0.0};
  const std::vector<double> at{50.0, -20.0};
  const std::vector<double> over{150.0, -120.0};
  EXPECT_EQ(step_plant(m, s, at, {}, 0.01), step_plant(m, s, over, {}, 0.01));
}

TEST(StepPlant, MatchesHandComputedSemiImplicitEuler) {
  const auto m = two_joint(2.0, 0.1, 0.3);
  PlantState s{{0.4, -0.1}, {0.5, -0.2}, 0.0};
  const std::vector<double> u{3.0, -1.0};
  const std::vector<double> d{0.5, 0.25};
  const double dt = 0.01;
  const PlantState next = step_plant(m, s, u, d, dt);
  for (std::size_t i = 0; i < 2; ++i) {
    const double acc = (u[i] + d[i] - 0.3 * s.qd[i] - 0.1 * std::tanh(s.qd[i] / 0.01) -
                        2.0 * std::sin(s.q[i])) /
                       m.inertia_per_joint[i];
    const double qd = s.qd[i] + acc * dt;
    EXPECT_NEAR(next.qd[i], qd, 1e-14);
    EXPECT_NEAR(next.q[i], s.q[i] + qd * dt, 1e-14);
  }
}

TEST(StepPlant, NonFiniteInputThrows) {
  const auto m = two_joint();
  const PlantState s = PlantState::zeros(2);
  const std::vector<double> bad{std::nan(""), 0.0};
  EXPECT_THROW(step_plant(m, s, bad, {}, 0.01), NumericError);
}

TEST(StepPlant, KineticEnergyNeverIncreasesWithoutInput) {
  const auto m = two_joint(0.0, 0.05, 0.2);
  PlantState s{{0.0, 0.0}, {2.0, -3.0}, 0.0};
  const std::vector<double> u{0.0, 0.0};
  auto energy = [&](const PlantState& p) {
    return m.inertia_per_joint[0] * p.qd[0] * p.qd[0] + m.inertia_per_joint[1] * p.qd[1] * p.qd[1];
  };
  double prev = energy(s);
  for (int k = 0; k < 500; ++k) {
    s = step_plant(m, s, u, {}, 0.01);
    const double e = energy(s);
    EXPECT_LE(e, prev + 1e-15);
    prev = e;
  }
}

TEST(StepPlant, JointsAreDecoupledUnderRelabeling) {
  const auto m = two_joint(1.5, 0.1, 0.3);
  RobotModel swapped = m;
  for (auto* v : {&swapped.mass_per_link, &swapped.inertia_per_joint, &swapped.link_length,
                  &swapped.com_offset, &swapped.viscous_damping, &swapped.coulomb_friction,
                  &swapped.torque_limit, &swapped.gravity_gain}) {
    std::swap((*v)[0], (*v)[1]);
  }
  PlantState s{{0.4, -0.7}, {0.2, 1.1}, 0.0};
  PlantState t{{-0.7, 0.4}, {1.1, 0.2}, 0.0};
  const std::vector<double> u{4.0, -2.0}, us{-2.0, 4.0};
  const auto a = step_plant(m, s, u, {}, 0.01);
  const auto b = step_plant(swapped, t, us, {}, 0.01);
  EXPECT_EQ(a.q[0], b.q[1]);
  EXPECT_EQ(a.q[1], b.q[0]);
  EXPECT_EQ(a.qd[0], b.qd[1]);
  EXPECT_EQ(a.qd[1], b.qd[0]);
}

TEST(Disturbance, NoneLeavesModelAndTorqueAlone) {
  const auto m = robot_preset("toy2");
  for (std::size_t step : {0u, 49u, 50u, 1234u}) {
    const auto [eff, torque] = apply_disturbance(DisturbanceScenario::of(DisturbanceKind::None), m, 3, 1, step);
    EXPECT_EQ(eff, m);
    EXPECT_EQ(torque, std::vector<double>(2, 0.0));
  }
}

TEST(Disturbance, ZeroSpreadUncertaintyIsIdentity) {
  const auto m = robot_preset("arm9");
  auto sc = DisturbanceScenario::of(DisturbanceKind::ParameterUncertainty);
  sc.mass_inertia_spread = 0.0;
  sc.friction_spread = 0.0;
  const auto [eff, torque] = apply_disturbance(sc, m, 7, 0, 0);
  EXPECT_EQ(eff, m);
}

TEST(Disturbance, PayloadTouchesOnlyTerminalLink) {
  const auto m = robot_preset("arm9");
  auto sc = DisturbanceScenario::of(DisturbanceKind::PayloadVariation);
  sc.payload_min = sc.payload_max = 1.0;
  const auto [eff, torque] = apply_disturbance(sc, m, 1, 0, 0);
  const std::size_t last = m.n_joints() - 1;
  EXPECT_NEAR(eff.mass_per_link[last], m.mass_per_link[last] + 1.0, 1e-12);
  EXPECT_GT(eff.inertia_per_joint[last], m.inertia_per_joint[last]);
  for (std::size_t i = 0; i < last; ++i) EXPECT_EQ(eff.mass_per_link[i], m.mass_per_link[i]);
  EXPECT_EQ(eff.link_length, m.link_length);
  EXPECT_EQ(eff.viscous_damping, m.viscous_damping);
  EXPECT_EQ(eff.coulomb_friction, m.coulomb_friction);
  EXPECT_EQ(torque, std::vector<double>(m.n_joints(), 0.0));
}

TEST(Disturbance, RandomForceMagnitudeAndHold) {
  const auto m = robot_preset("toy2");
  const auto sc = DisturbanceScenario::of(DisturbanceKind::RandomForce);
  const double lbar = std::accumulate(m.link_length.begin(), m.link_length.end(), 0.0) / 2.0;
  for (std::size_t period = 0; period < 10; ++period) {
    const auto first = apply_disturbance(sc, m, 9, 2, period * 50).second;
    for (double t : first) {
      EXPECT_GE(std::abs(t), 50.0 * lbar - 1e-9);
      EXPECT_LE(std::abs(t), 150.0 * lbar + 1e-9);
    }
    EXPECT_EQ(apply_disturbance(sc, m, 9, 2, period * 50 + 49).second, first);
  }
}

TEST(Disturbance, UncertaintyFactorsStayInRange) {
  const auto m = robot_preset("quad12");
  const auto sc = DisturbanceScenario::of(DisturbanceKind::ParameterUncertainty);
  for (std::uint64_t ep = 0; ep < 20; ++ep) {
    const auto eff = apply_disturbance(sc, m, 4, ep, 0).first;
    for (std::size_t i = 0; i < m.n_joints(); ++i) {
      const double fm = eff.mass_per_link[i] / m.mass_per_link[i];
      const double ff = eff.coulomb_friction[i] / m.coulomb_friction[i];
      EXPECT_GE(fm, 0.8 - 1e-12);
      EXPECT_LE(fm, 1.2 + 1e-12);
      EXPECT_GE(ff, 0.5 - 1e-12);
      EXPECT_LE(ff, 1.5 + 1e-12);
    }
  }
}

TEST(Disturbance, DeterministicPerSeedEpisodeAndStep) {
  const auto m = robot_preset("arm9");
  for (auto kind : kAllDisturbanceKinds) {
    const auto sc = DisturbanceScenario::of(kind);
    const auto a = apply_disturbance(sc, m, 42, 3, 175);
    const auto b = apply_disturbance(sc, m, 42, 3, 175);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
  }
  const auto sc = DisturbanceScenario::of(DisturbanceKind::Mixed);
  EXPECT_NE(apply_disturbance(sc, m, 42, 3, 0).first, apply_disturbance(sc, m, 42, 4, 0).first);
}

TEST(Disturbance, KindNamesRoundTrip) {
  for (auto kind : kAllDisturbanceKinds) {
    EXPECT_EQ(disturbance_kind_from_string(to_string(kind)), kind);
  }
  EXPECT_ANY_THROW(disturbance_kind_from_string("earthquake"));
}

TEST(Features, TenEntriesForEveryPreset) {
  for (const auto& name : preset_names()) {
    const auto f = extract_features(robot_preset(name));
    EXPECT_EQ(f.size(), 10u);
    EXPECT_EQ(f[0], static_cast<double>(robot_preset(name).n_joints()));
  }
}

TEST(Features, DoublingMassDoublesTotalMassOnly) {
  const auto m = robot_preset("arm9");
  RobotModel heavy = m;
  for (double& x : heavy.mass_per_link) x *= 2.0;
  const auto a = extract_features(m);
  const auto b = extract_features(heavy);
  EXPECT_EQ(a, extract_features(m));
  EXPECT_EQ(b[0], a[0]);
  EXPECT_NEAR(b[1], 2.0 * a[1], 1e-12);
}

TEST(Features, LayoutMatchesSummaryDefinitions) {
  const auto m = two_joint(0.5, 0.08, 0.12);
  const auto f = extract_features(m);
  EXPECT_DOUBLE_EQ(f[1], 3.0);
  EXPECT_DOUBLE_EQ(f[2], 0.35);
  EXPECT_DOUBLE_EQ(f[3], 0.5);
  EXPECT_DOUBLE_EQ(f[4], 0.7);
  EXPECT_DOUBLE_EQ(f[5], 0.35);
  EXPECT_DOUBLE_EQ(f[6], 0.7);
  EXPECT_DOUBLE_EQ(f[7], 0.175);
  EXPECT_DOUBLE_EQ(f[8], 0.12);
  EXPECT_DOUBLE_EQ(f[9], 0.08);
}

TEST(Presets, MatchDocumentedScale) {
  auto total = [](const RobotModel& m) {
    return std::accumulate(m.mass_per_link.begin(), m.mass_per_link.end(), 0.0);
  };
  EXPECT_EQ(robot_preset("toy2").n_joints(), 2u);
  EXPECT_EQ(robot_preset("arm9").n_joints(), 9u);
  EXPECT_EQ(robot_preset("quad12").n_joints(), 12u);
  EXPECT_NEAR(total(robot_preset("arm9")), 18.0, 1e-9);
  EXPECT_NEAR(total(robot_preset("quad12")), 25.0, 1e-9);
  for (const auto& n : preset_names()) EXPECT_NO_THROW(robot_preset(n).validate());
}

TEST(Presets, InertiaDecaysAlongChain) {
  const auto m = robot_preset("arm9");
  for (std::size_t i = 0; i + 1 < m.n_joints(); ++i) {
    EXPECT_GT(m.inertia_per_joint[i], m.inertia_per_joint[i + 1]);
  }
}

TEST(RobotModel, ValidateRejectsBrokenInvariants) {
  auto m = two_joint();
  m.inertia_per_joint[1] = 0.0;
  EXPECT_THROW(m.validate(), ContractError);
  m = two_joint();
  m.torque_limit.pop_back();
  EXPECT_THROW(m.validate(), ContractError);
}

TEST(RobotModel, JsonFileRoundTrip) {
  metapid::testing::TempDir dir("robot");
  const auto m = robot_preset("quad12");
  save_robot(m, dir.file("r.json"));
  EXPECT_EQ(load_robot(dir.file("r.json")), m);
  EXPECT_THROW(load_robot(dir.file("missing.json")), IoError);
}
