#include "kmpc/gait.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace kmpc;

TEST(Fsm, MidFirstPhase) {
  TrotScheduler fsm;
  const auto& s = fsm.update(0.1);
  EXPECT_EQ(s.stance, kPairA);
  EXPECT_NEAR(s.phase[1], 0.5, 1e-12);
  EXPECT_NEAR(s.phase[2], 0.5, 1e-12);
}

TEST(Fsm, RolesSwapAfterOnePhase) {
  TrotScheduler fsm;
  fsm.update(0.1);
  const auto& s = fsm.update(0.25);
  EXPECT_EQ(s.stance, kPairB);
  EXPECT_NEAR(s.phase[0], 0.25, 1e-9);
  EXPECT_TRUE(s.phase_changed);
}

TEST(Fsm, EarlyContactFreezesSwingPhase) {
  TrotScheduler fsm;
  fsm.update(0.0);
  fsm.update(0.12);  // FL, RR swing at 0.6
  fsm.update(0.12, {false, true, false, false});
  EXPECT_TRUE(fsm.state().frozen[1]);
  EXPECT_FALSE(fsm.state().frozen[2]);
  fsm.update(0.18);
  EXPECT_NEAR(fsm.swing_phase(1), 0.6, 1e-9);
  EXPECT_NEAR(fsm.swing_phase(2), 0.9, 1e-9);
  // contact on a stance leg is not an event
  fsm.update(0.19, {true, false, false, false});
  EXPECT_FALSE(fsm.state().frozen[0]);
  // cleared at the next phase
  fsm.update(0.21);
  EXPECT_FALSE(fsm.state().frozen[1]);
}

TEST(Fsm, NegativeTimeRejected) {
  TrotScheduler fsm;
  EXPECT_THROW(fsm.update(-0.1), Error);
  EXPECT_THROW(TrotScheduler(0.0), ConfigError);
}

TEST(Fsm, FiftyPercentDutyAndSynchronizedPairs) {
  TrotScheduler fsm;
  const int ticks = 10000;  // 10 s at 1 ms
  PerLeg<int> stance_ticks{0, 0, 0, 0};
  long transitions = 0, last = -1;
  for (int k = 0; k < ticks; ++k) {
    const auto& s = fsm.update(k * 0.001);
    ASSERT_EQ(s.stance[0], s.stance[3]);
    ASSERT_EQ(s.stance[1], s.stance[2]);
    ASSERT_NE(s.stance[0], s.stance[1]);
    for (int leg = 0; leg < kNumLegs; ++leg) stance_ticks[leg] += s.stance[leg];
    if (s.phase_index != last) ++transitions;
    last = s.phase_index;
  }
  for (int leg = 0; leg < kNumLegs; ++leg) EXPECT_LE(std::abs(stance_ticks[leg] - ticks / 2), 1);
  EXPECT_EQ(transitions, 50);
}

TEST(Fsm, TwoHundredPlantStepsPerPhase) {
  TrotScheduler fsm;
  std::vector<int> per_phase;
  long last = -1;
  for (int k = 0; k < 2000; ++k) {
    const auto& s = fsm.update(k * 0.001);
    if (s.phase_index != last) per_phase.push_back(0);
    ++per_phase.back();
    last = s.phase_index;
  }
  for (int n : per_phase) EXPECT_EQ(n, 200);
}

TEST(Swing, Endpoints) {
  const Vec3 a(0.1, -0.2, 0.0), b(0.25, -0.1, 0.02);
  EXPECT_LT((swing_trajectory(a, b, 0.05, 0.0).position - a).norm(), 1e-15);
  EXPECT_LT((swing_trajectory(a, b, 0.05, 1.0).position - b).norm(), 1e-15);
  EXPECT_LT(swing_trajectory(a, b, 0.05, 0.0).velocity.norm(), 1e-15);
  EXPECT_LT(swing_trajectory(a, b, 0.05, 1.0).velocity.norm(), 1e-14);
  EXPECT_NEAR(swing_trajectory(a, b, 0.05, 0.5).position.z(), 0.07, 1e-15);
}

TEST(Swing, VerticalHop) {
  const Vec3 a(0.3, 0.1, 0.0);
  const auto mid = swing_trajectory(a, a, 0.05, 0.5);
  EXPECT_NEAR(mid.position.z(), 0.05, 1e-15);
  EXPECT_NEAR(mid.position.x(), 0.3, 1e-15);
  for (double s = 0.0; s <= 1.0; s += 0.01) EXPECT_LE(swing_trajectory(a, a, 0.05, s).position.z(), 0.05 + 1e-15);
}

TEST(Swing, VelocityMatchesFiniteDifference) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.3, 0.3), s01(0.01, 0.99);
  for (int i = 0; i < 200; ++i) {
    const Vec3 a(u(rng), u(rng), 0.1 * u(rng)), b(u(rng), u(rng), 0.1 * u(rng));
    const double s = s01(rng), rate = 5.0;
    const double h = 1e-6;
    const Vec3 fd = (swing_trajectory(a, b, 0.06, s + h).position - swing_trajectory(a, b, 0.06, s - h).position) /
                    (2 * h) * rate;
    EXPECT_LT((swing_trajectory(a, b, 0.06, s, rate).velocity - fd).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Swing, PhaseOutOfRangeRejected) {
  EXPECT_THROW(swing_trajectory(Vec3::Zero(), Vec3::Zero(), 0.05, 1.5), Error);
}

TEST(Raibert, NeutralAtRestAndLeadsWithVelocity) {
  const Vec3 hip(0.19, -0.13, 0.3);
  const auto rest = raibert_target(hip, Vec3::Zero(), Vec3::Zero(), 0.1, 0.2, 0.03);
  EXPECT_LT((rest - Vec3(0.19, -0.13, 0.0)).norm(), 1e-15);
  const auto moving = raibert_target(hip, Vec3(0.2, 0, 0), Vec3(0.2, 0, 0), 0.1, 0.2, 0.03);
  EXPECT_NEAR(moving.x(), 0.19 + 0.02 + 0.02, 1e-15);
  const auto lagging = raibert_target(hip, Vec3(0.3, 0, 0), Vec3(0.2, 0, 0), 0.0, 0.2, 0.03);
  EXPECT_NEAR(lagging.x(), 0.19 + 0.03 + 0.003, 1e-15);
}
