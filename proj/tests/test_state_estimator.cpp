#include "kmpc/leg_kinematics.hpp"
#include "kmpc/srb_dynamics.hpp"
#include "kmpc/state_estimator.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace kmpc;

namespace {

bool is_psd(const Mat3& p) {
  if ((p - p.transpose()).cwiseAbs().maxCoeff() > 1e-15) return false;
  return Eigen::SelfAdjointEigenSolver<Mat3>(p).eigenvalues().minCoeff() >= 0.0;
}

// Joint rates that keep a foot fixed in the world while the body moves.
LegOdometry planted_leg(const RigidBodyState& x, const Vec3& hip, const Vec3& foot_world, const LegGeometry& g) {
  const Mat3 r = rotation_from_euler(x.theta);
  LegOdometry leg;
  leg.foot = r.transpose() * (foot_world - x.p);
  const Vec3 q = leg_ik(leg.foot - hip, g);
  leg.J = leg_jacobian(q, g);
  const Vec3 foot_rate = -x.omega.cross(leg.foot) - r.transpose() * x.v;
  leg.qd = leg.J.lu().solve(foot_rate);
  return leg;
}

}  // namespace

TEST(EkfPredict, StationaryReadingKeepsVelocity) {
  EstimatorState est;
  est.v = Vec3(0.1, -0.2, 0.05);
  const Mat3 r = rotation_from_euler(Vec3(0.1, -0.2, 0.7));
  const auto out = ekf_predict(est, -r.transpose() * world_gravity(), r, 0.001);
  EXPECT_LT((out.v - est.v).norm(), 1e-15);
}

TEST(EkfPredict, ZeroReadingIsFreeFall) {
  EstimatorState est;
  const auto out = ekf_predict(est, Vec3::Zero(), Mat3::Identity(), 0.002);
  EXPECT_NEAR(out.v.z(), -9.81 * 0.002, 1e-15);
}

TEST(EkfPredict, CovarianceTraceGrows) {
  EstimatorState est;
  for (int i = 0; i < 100; ++i) {
    const auto next = ekf_predict(est, Vec3(0, 0, 9.81), Mat3::Identity(), 0.001);
    EXPECT_GT(next.P.trace(), est.P.trace());
    est = next;
  }
  EXPECT_THROW(ekf_predict(est, Vec3::Zero(), Mat3::Identity(), 0.0), Error);
}

TEST(EkfUpdate, ConsistentZeroMeasurementContracts) {
  EstimatorState est;
  est.v = Vec3(0.3, 0.0, -0.1);
  const LegGeometry g;
  RigidBodyState x;
  x.p = Vec3(0, 0, 0.3);
  std::vector<LegOdometry> legs;
  for (int leg = 0; leg < kNumLegs; ++leg) {
    const Vec3 foot = x.p + g.hip_offsets[leg] - Vec3(0, 0, 0.3);
    legs.push_back(planted_leg(x, g.hip_offsets[leg], foot, g));
  }
  const auto out = ekf_update(est, legs, Mat3::Identity(), Vec3::Zero());
  EXPECT_LT(out.v.norm(), est.v.norm());
  EXPECT_LT(out.P.trace(), est.P.trace());
  EXPECT_TRUE(is_psd(out.P));
}

TEST(EkfUpdate, NoStanceLegsIsIdentity) {
  EstimatorState est;
  est.v = Vec3(1, 2, 3);
  const auto out = ekf_update(est, {}, Mat3::Identity(), Vec3::Zero());
  EXPECT_EQ(out.v, est.v);
  EXPECT_EQ(out.P, est.P);
}

TEST(EkfUpdate, MeasurementMatchesPlantVelocity) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  const LegGeometry g;
  for (int i = 0; i < 100; ++i) {
    RigidBodyState x;
    x.p = Vec3(u(rng), u(rng), 0.3 + 0.03 * u(rng));
    x.theta = 0.1 * Vec3(u(rng), u(rng), 5 * u(rng));
    x.v = Vec3(u(rng), u(rng), 0.2 * u(rng));
    x.omega = Vec3(u(rng), u(rng), u(rng));
    const Mat3 r = rotation_from_euler(x.theta);
    const int leg = i % kNumLegs;
    Vec3 foot = x.p + r * g.hip_offsets[leg];
    foot.z() = 0.0;
    const auto odo = planted_leg(x, g.hip_offsets[leg], foot, g);
    EXPECT_LT((leg_velocity_measurement(odo, r, x.omega) - x.v).norm(), 1e-12);
  }
}

TEST(ConditionCovariance, FloorsAndSymmetrizes) {
  Mat3 p;
  p << 1, 0.5, 0, 0.4, -1, 0, 0, 0, 2;
  const Mat3 c = condition_covariance(p);
  EXPECT_TRUE(is_psd(c));
  EXPECT_GE(Eigen::SelfAdjointEigenSolver<Mat3>(c).eigenvalues().minCoeff(), kCovarianceFloor - 1e-15);
}

TEST(Ekf, ZeroNoiseTracksPlantExactly) {
  // Noiseless sensors generated from the plant: specific force from the
  // per-step velocity change, joint rates from the planted-foot constraint.
  const ModelParams params;
  const LegGeometry g;
  RigidBodyState x;
  x.p = Vec3(0, 0, 0.3);
  x.v = Vec3(0.2, -0.1, 0.0);
  x.omega = Vec3(0.1, -0.2, 0.3);
  PerLeg<Vec3> feet;
  for (int leg = 0; leg < kNumLegs; ++leg) feet[leg] = Vec3(g.hip_offsets[leg].x(), g.hip_offsets[leg].y(), 0.0);
  EstimatorState est;
  est.sigma_a = 0.0;
  est.sigma_v = 0.0;
  est.v = Vec3::Zero();
  bool updated = false;
  for (int k = 0; k < 300; ++k) {
    const Mat3 r = rotation_from_euler(x.theta);
    if (k % 5 == 0) {
      std::vector<LegOdometry> legs;
      for (int leg = 0; leg < kNumLegs; ++leg) legs.push_back(planted_leg(x, g.hip_offsets[leg], feet[leg], g));
      est = ekf_update(est, legs, r, x.omega);
      updated = true;
    }
    if (updated) EXPECT_LT((est.v - x.v).norm(), 1e-9) << "tick " << k;
    ControlInput u;
    for (int leg = 0; leg < kNumLegs; ++leg) {
      u.foot_offsets[leg] = r.transpose() * (feet[leg] - x.p);
      u.forces[leg] = Vec3(0.2, -0.1, params.mass * 9.81 / 4 + 0.3 * leg);
    }
    const auto next = rk4_step(x, u, 0.001, params);
    const Vec3 accel = r.transpose() * ((next.v - x.v) / 0.001 - world_gravity());
    est = ekf_predict(est, accel, r, 0.001);
    x = next;
    EXPECT_TRUE(is_psd(est.P));
  }
}

TEST(Ekf, NoisyTrotStaysAccurate) {
  // constant-velocity body, alternating diagonal stance, noisy IMU and encoders
  const LegGeometry g;
  double sq = 0.0;
  int n = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> na(0.0, 0.1), nv(0.0, 0.05);
    RigidBodyState x;
    x.p = Vec3(0, 0, 0.3);
    x.v = Vec3(0.2, -0.1, 0.0);
    EstimatorState est;
    PerLeg<Vec3> feet;
    for (int leg = 0; leg < kNumLegs; ++leg) feet[leg] = Vec3(g.hip_offsets[leg].x(), g.hip_offsets[leg].y(), 0.0);
    for (int k = 0; k < 5000; ++k) {
      const double t = k * 0.001;
      const bool pair_a = static_cast<long>(std::floor(t / 0.2 + 1e-9)) % 2 == 0;
      if (k % 200 == 0) {
        for (int leg = 0; leg < kNumLegs; ++leg) feet[leg] = Vec3(x.p.x() + g.hip_offsets[leg].x(), x.p.y() + g.hip_offsets[leg].y(), 0.0);
      }
      if (k % 5 == 0) {
        std::vector<LegOdometry> legs;
        for (int leg = 0; leg < kNumLegs; ++leg) {
          if ((leg == 0 || leg == 3) != pair_a) continue;
          auto odo = planted_leg(x, g.hip_offsets[leg], feet[leg], g);
          odo.qd += odo.J.lu().solve(Vec3(nv(rng), nv(rng), nv(rng)));
          legs.push_back(odo);
        }
        est = ekf_update(est, legs, Mat3::Identity(), Vec3::Zero());
        if (t > 0.5) {
          sq += (est.v - x.v).squaredNorm();
          ++n;
        }
      }
      const Vec3 accel = -world_gravity() + Vec3(na(rng), na(rng), na(rng));
      est = ekf_predict(est, accel, Mat3::Identity(), 0.001);
      x.p += x.v * 0.001;
    }
  }
  EXPECT_LT(std::sqrt(sq / n), 0.05);
}
