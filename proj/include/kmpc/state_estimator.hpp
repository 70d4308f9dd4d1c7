#pragma once

// Linear-velocity EKF: integrated IMU acceleration as the process model,
// stationary-foot leg odometry as the measurement.

#include "kmpc/common.hpp"

#include <vector>

namespace kmpc {

inline constexpr double kCovarianceFloor = 1e-12;

struct EstimatorState {
  Vec3 v = Vec3::Zero();  // world frame
  Mat3 P = Mat3::Identity() * 1e-2;
  double sigma_a = 0.1;   // m/s^2
  double sigma_v = 0.05;  // m/s
};

/// One stance leg's odometry inputs. `foot` is the foot position relative to
/// the CoM in the body frame; `J` maps joint rates to foot velocity in the body frame.
struct LegOdometry {
  Mat3 J = Mat3::Identity();
  Vec3 qd = Vec3::Zero();
  Vec3 foot = Vec3::Zero();
};

/// Symmetrizes and floors the eigenvalues at kCovarianceFloor.
inline Mat3 condition_covariance(const Mat3& p) {
  const Mat3 sym = 0.5 * (p + p.transpose());
  Eigen::SelfAdjointEigenSolver<Mat3> eig(sym);
  if (eig.eigenvalues().minCoeff() >= kCovarianceFloor) return sym;
  const Vec3 lam = eig.eigenvalues().cwiseMax(kCovarianceFloor);
  const Mat3 out = eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

/// Gravity in the world frame (points down).
inline Vec3 world_gravity(double g = 9.81) { return {0.0, 0.0, -g}; }

inline EstimatorState ekf_predict(const EstimatorState& est, const Vec3& accel_body, const Mat3& rot, double dt,
                                  const Vec3& gravity_world = world_gravity()) {
  if (!(dt > 0.0)) throw Error("ekf_predict requires dt > 0");
  EstimatorState out = est;
  out.v = est.v + (rot * accel_body + gravity_world) * dt;
  out.P = condition_covariance(est.P + est.sigma_a * est.sigma_a * dt * dt * Mat3::Identity());
  return out;
}

/// Body velocity implied by a planted foot, world frame.
inline Vec3 leg_velocity_measurement(const LegOdometry& leg, const Mat3& rot, const Vec3& omega) {
  return -rot * (leg.J * leg.qd + omega.cross(leg.foot));
}

/// Sequential per-leg Kalman updates (H = I, R = sigma_v^2 I), Joseph form.
inline EstimatorState ekf_update(const EstimatorState& est, const std::vector<LegOdometry>& stance_legs,
                                 const Mat3& rot, const Vec3& omega) {
  EstimatorState out = est;
  const Mat3 meas_cov = est.sigma_v * est.sigma_v * Mat3::Identity();
  for (const auto& leg : stance_legs) {
    const Vec3 z = leg_velocity_measurement(leg, rot, omega);
    const Mat3 s = out.P + meas_cov;
    const Mat3 k = s.ldlt().solve(out.P).transpose();  // P S^-1 with P, S symmetric
    out.v += k * (z - out.v);
    const Mat3 ikh = Mat3::Identity() - k;
    out.P = condition_covariance(ikh * out.P * ikh.transpose() + k * meas_cov * k.transpose());
  }
  return out;
}

}  // namespace kmpc
