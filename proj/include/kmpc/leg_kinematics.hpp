#pragma once

// 3-DOF leg: hip roll about body x, hip pitch about y, knee pitch about y.
// Zero configuration is the leg hanging straight down. Foot positions are in
// the hip frame (body axes, origin at the hip joint).

#include "kmpc/common.hpp"

#include <algorithm>
#include <cmath>

namespace kmpc {

inline constexpr double kTorqueLimit = 33.5;
inline constexpr double kWorkspaceMargin = 1e-6;

struct LegGeometry {
  PerLeg<Vec3> hip_offsets = default_hip_offsets();
  double l1 = 0.2;  // thigh
  double l2 = 0.2;  // shank
  double torque_limit = kTorqueLimit;

  void validate() const {
    if (!(l1 > 0.0) || !(l2 > 0.0)) throw ConfigError("link lengths must be positive");
    if (!(torque_limit > 0.0)) throw ConfigError("torque limit must be positive");
  }
};

struct JointState {
  Vec3 q = Vec3::Zero();
  Vec3 qd = Vec3::Zero();
};

struct TorqueCommand {
  Vec3 tau = Vec3::Zero();
  bool saturated = false;
};

namespace detail {

inline Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }

// Foot in the leg's sagittal plane before the roll rotation.
inline Vec3 planar_foot(const Vec3& q, const LegGeometry& g) {
  const double s1 = std::sin(q(1)), c1 = std::cos(q(1));
  const double s12 = std::sin(q(1) + q(2)), c12 = std::cos(q(1) + q(2));
  return {-g.l1 * s1 - g.l2 * s12, 0.0, -g.l1 * c1 - g.l2 * c12};
}

inline TorqueCommand clamp_torque(const Vec3& tau, double limit) {
  TorqueCommand out;
  for (int i = 0; i < 3; ++i) {
    out.tau(i) = std::clamp(tau(i), -limit, limit);
    out.saturated = out.saturated || out.tau(i) != tau(i);
  }
  return out;
}

}  // namespace detail

inline Vec3 leg_fk(const Vec3& q, const LegGeometry& g) {
  return detail::rot_x(q(0)) * detail::planar_foot(q, g);
}

/// Closed-form inverse on the knee-bent-backward branch (knee angle <= 0).
inline Vec3 leg_ik(const Vec3& foot, const LegGeometry& g) {
  if (!foot.allFinite()) throw WorkspaceError("foot target is not finite");
  const double d = foot.norm();
  const double inner = std::abs(g.l1 - g.l2) + kWorkspaceMargin;
  const double outer = g.l1 + g.l2 - kWorkspaceMargin;
  if (!(d > inner && d < outer))
    throw WorkspaceError("foot target at distance " + std::to_string(d) + " m is outside the leg workspace");
  const double rho = std::hypot(foot.y(), foot.z());
  if (rho < kWorkspaceMargin) throw WorkspaceError("foot target on the hip-roll axis");
  const double roll = std::atan2(foot.y(), -foot.z());
  const double x = foot.x(), z = -rho;
  const double c2 = std::clamp((d * d - g.l1 * g.l1 - g.l2 * g.l2) / (2.0 * g.l1 * g.l2), -1.0, 1.0);
  const double knee = -std::acos(c2);
  const double a = g.l1 + g.l2 * std::cos(knee), b = g.l2 * std::sin(knee);
  const double pitch = std::atan2(-x, -z) - std::atan2(b, a);
  return {roll, pitch, knee};
}

inline Mat3 leg_jacobian(const Vec3& q, const LegGeometry& g) {
  const Mat3 rx = detail::rot_x(q(0));
  const Vec3 v = detail::planar_foot(q, g);
  const double s1 = std::sin(q(1)), c1 = std::cos(q(1));
  const double s12 = std::sin(q(1) + q(2)), c12 = std::cos(q(1) + q(2));
  Mat3 j;
  j.col(0) = rx * Vec3::UnitX().cross(v);
  j.col(1) = rx * Vec3(-g.l1 * c1 - g.l2 * c12, 0.0, g.l1 * s1 + g.l2 * s12);
  j.col(2) = rx * Vec3(-g.l2 * c12, 0.0, g.l2 * s12);
  return j;
}

/// tau = J^T f, f being the force the foot exerts on its environment.
inline TorqueCommand stance_torques(const Mat3& jac, const Vec3& f, double limit = kTorqueLimit) {
  return detail::clamp_torque(jac.transpose() * f, limit);
}

inline TorqueCommand swing_torques(const Vec3& q, const Vec3& qd, const Vec3& q_des, const Vec3& qd_des,
                                   const Vec3& kp, const Vec3& kd, double limit = kTorqueLimit) {
  if ((kp.array() < 0.0).any() || (kd.array() < 0.0).any()) throw Error("PD gains must be nonnegative");
  const Vec3 tau = -kp.cwiseProduct(q - q_des) - kd.cwiseProduct(qd - qd_des);
  return detail::clamp_torque(tau, limit);
}

/// Massless-leg plant stand-in for exercising the swing controller: each
/// joint is an independent rotor with inertia `inertia`.
struct SwingLegFixture {
  double inertia = 0.02;
  JointState state;

  void step(const Vec3& tau, double dt) {
    state.qd += tau / inertia * dt;
    state.q += state.qd * dt;
  }
};

}  // namespace kmpc
