#include "kmpc/leg_kinematics.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace kmpc;

namespace {

// Homogeneous-transform chain: roll joint, pitch joint, thigh, knee, shank.
Vec3 fk_oracle(const Vec3& q, double l1, double l2) {
  auto rx = [](double a) {
    Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
    t.block<3, 3>(0, 0) = Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix();
    return t;
  };
  auto ry = [](double a) {
    Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
    t.block<3, 3>(0, 0) = Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix();
    return t;
  };
  auto tz = [](double d) {
    Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
    t(2, 3) = -d;
    return t;
  };
  const Eigen::Matrix4d t = rx(q(0)) * ry(q(1)) * tz(l1) * ry(q(2)) * tz(l2);
  return t.block<3, 1>(0, 3);
}

Vec3 random_q(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> roll(-0.6, 0.6), pitch(-1.2, 1.2), knee(-2.6, -0.1);
  return {roll(rng), pitch(rng), knee(rng)};
}

}  // namespace

TEST(LegFk, StraightLeg) {
  const LegGeometry g;
  EXPECT_LT((leg_fk(Vec3::Zero(), g) - Vec3(0, 0, -0.4)).norm(), 1e-15);
}

TEST(LegFk, KneeQuarterTurnPlanarTwoLink) {
  // thigh straight down to (0,0,-l1); shank rotated +90 deg about y points along -x
  const LegGeometry g;
  EXPECT_LT((leg_fk(Vec3(0, 0, M_PI / 2), g) - Vec3(-0.2, 0, -0.2)).norm(), 1e-15);
}

TEST(LegFk, MatchesTransformChain) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3, 3);
  LegGeometry g;
  g.l1 = 0.21;
  g.l2 = 0.19;
  for (int i = 0; i < 500; ++i) {
    const Vec3 q(u(rng), u(rng), u(rng));
    EXPECT_LT((leg_fk(q, g) - fk_oracle(q, g.l1, g.l2)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(LegIk, StraightLegInverse) {
  const LegGeometry g;
  // the exact boundary is excluded; step just inside it
  const Vec3 q = leg_ik(Vec3(0, 0, -0.4 + 1e-5), g);
  EXPECT_NEAR(q(0), 0.0, 1e-12);
  EXPECT_NEAR(q(1), 0.0, 1e-2);
  EXPECT_NEAR(q(2), 0.0, 2e-2);
  EXPECT_LT((leg_fk(q, g) - Vec3(0, 0, -0.4 + 1e-5)).norm(), 1e-9);
}

TEST(LegIk, OutOfWorkspaceRejected) {
  const LegGeometry g;
  EXPECT_THROW(leg_ik(Vec3(0, 0, -0.41), g), WorkspaceError);
  EXPECT_THROW(leg_ik(Vec3(0, 0, -0.4), g), WorkspaceError);
  EXPECT_THROW(leg_ik(Vec3(0, 0, 0), g), WorkspaceError);
  LegGeometry g2;
  g2.l1 = 0.25;  // inner radius 0.05
  EXPECT_THROW(leg_ik(Vec3(0, 0, -0.04), g2), WorkspaceError);
}

TEST(LegIk, RoundTripThousandTargets) {
  const LegGeometry g;
  std::mt19937_64 rng(2);
  int checked = 0;
  while (checked < 1000) {
    const Vec3 q = random_q(rng);
    const Vec3 target = leg_fk(q, g);
    const Vec3 back = leg_ik(target, g);
    EXPECT_LT((leg_fk(back, g) - target).norm(), 1e-9);
    EXPECT_LE(back(2), 0.0);
    // with the foot below the roll axis the knee-backward branch recovers q
    const double planar_z = -g.l1 * std::cos(q(1)) - g.l2 * std::cos(q(1) + q(2));
    if (planar_z < -1e-3) EXPECT_LT((back - q).cwiseAbs().maxCoeff(), 1e-7);
    ++checked;
  }
}

TEST(LegJacobian, SingularWhenStraight) {
  const LegGeometry g;
  const Mat3 j = leg_jacobian(Vec3::Zero(), g);
  Eigen::FullPivLU<Mat3> lu(j);
  EXPECT_LT(lu.rank(), 3);
}

TEST(LegJacobian, MatchesFiniteDifferences) {
  const LegGeometry g;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int i = 0; i < 500; ++i) {
    const Vec3 q(u(rng), u(rng), u(rng));
    const Eigen::MatrixXd fd = oracle::fd_jacobian([&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
      return leg_fk(Vec3(x), g);
    }, q);
    EXPECT_LT((leg_jacobian(q, g) - fd).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(LegJacobian, VirtualWorkIdentity) {
  const LegGeometry g;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  for (int i = 0; i < 100; ++i) {
    const Vec3 q = random_q(rng), qd(n(rng), n(rng), n(rng)), f(n(rng), n(rng), n(rng));
    const Mat3 j = leg_jacobian(q, g);
    EXPECT_NEAR((j.transpose() * f).dot(qd), f.dot(j * qd), 1e-13);
  }
}

TEST(StanceTorques, ZeroForce) {
  const auto t = stance_torques(leg_jacobian(Vec3(0.1, 0.5, -1.0), LegGeometry{}), Vec3::Zero());
  EXPECT_TRUE(t.tau.isZero(0.0));
  EXPECT_FALSE(t.saturated);
}

TEST(StanceTorques, ForceAlongStraightLegNeedsNoTorque) {
  const Mat3 j = leg_jacobian(Vec3::Zero(), LegGeometry{});
  const auto t = stance_torques(j, Vec3(0, 0, 100));
  EXPECT_LT(t.tau.norm(), 1e-12);
}

TEST(StanceTorques, MatchesVirtualWorkOfFk) {
  const LegGeometry g;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  for (int i = 0; i < 50; ++i) {
    const Vec3 q = random_q(rng), f(n(rng), n(rng), n(rng));
    const auto fd = oracle::fd_gradient([&](const Eigen::VectorXd& x) { return f.dot(leg_fk(Vec3(x), g)); }, q);
    EXPECT_LT((stance_torques(leg_jacobian(q, g), f, 1e9).tau - fd).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(StanceTorques, SaturatesAtLimit) {
  const Mat3 j = leg_jacobian(Vec3(0.0, 0.8, -1.6), LegGeometry{});
  const auto t = stance_torques(j, Vec3(2000, 0, 2000));
  EXPECT_TRUE(t.saturated);
  EXPECT_LE(t.tau.cwiseAbs().maxCoeff(), 33.5);
}

TEST(SwingTorques, ZeroErrorZeroTorque) {
  const Vec3 q(0.1, 0.2, -1.0), qd(0.5, -0.3, 0.2);
  const auto t = swing_torques(q, qd, q, qd, Vec3::Constant(20), Vec3::Constant(0.5));
  EXPECT_TRUE(t.tau.isZero(0.0));
}

TEST(SwingTorques, ProportionalOnly) {
  const auto t = swing_torques(Vec3::Ones(), Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3::Constant(20), Vec3::Zero());
  EXPECT_EQ(t.tau, Vec3::Constant(-20));
  EXPECT_FALSE(t.saturated);
}

TEST(SwingTorques, HugeErrorSaturates) {
  const auto t = swing_torques(Vec3::Constant(100), Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3::Constant(20),
                               Vec3::Constant(0.5));
  EXPECT_TRUE(t.saturated);
  EXPECT_EQ(t.tau, Vec3::Constant(-33.5));
}

TEST(SwingTorques, NegativeGainsRejected) {
  EXPECT_THROW(swing_torques(Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3(-1, 0, 0), Vec3::Zero()),
               Error);
}

TEST(SwingFixture, PdTracksStepTarget) {
  SwingLegFixture leg;
  leg.state.q = Vec3(0.0, 0.6, -1.2);
  const Vec3 target(0.1, 0.3, -0.9);
  for (int k = 0; k < 1000; ++k) {
    const auto t = swing_torques(leg.state.q, leg.state.qd, target, Vec3::Zero(), Vec3::Constant(20),
                                 Vec3::Constant(0.5));
    EXPECT_LE(t.tau.cwiseAbs().maxCoeff(), 33.5);
    leg.step(t.tau, 0.001);
  }
  EXPECT_LT((leg.state.q - target).cwiseAbs().maxCoeff(), 1e-3);
}
