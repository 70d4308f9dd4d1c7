#pragma once

// Single-rigid-body torso model driven by foot contact forces.
//
// State ordering is [p, Theta, pdot, Omega]:
//   p      CoM position, world frame (m)
//   Theta  X-Y-Z Euler angles [roll, pitch, yaw], R = Rx(roll) Ry(pitch) Rz(yaw)
//   pdot   CoM velocity, world frame (m/s)
//   Omega  angular velocity, body frame (rad/s)
//
// Contact forces and their lever arms are expressed in the body frame. The
// rotational dynamics use the standard Euler equation
//   I Omega_dot = -Omega x (I Omega) + sum r_i x F_i.

#include "kmpc/common.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace kmpc {

inline constexpr double kOrientationGuard = 1e-3;
inline constexpr double kDivergenceLimit = 1e6;

struct RigidBodyState {
  Vec3 p = Vec3::Zero();
  Vec3 theta = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 omega = Vec3::Zero();

  Vec12 to_vector() const {
    Vec12 x;
    x << p, theta, v, omega;
    return x;
  }

  static RigidBodyState from_vector(const Eigen::Ref<const VecX>& x) {
    require_dims(x.size() == kStateDim, "rigid-body state must have 12 entries");
    RigidBodyState s;
    s.p = x.segment<3>(0);
    s.theta = x.segment<3>(3);
    s.v = x.segment<3>(6);
    s.omega = x.segment<3>(9);
    return s;
  }

  bool finite() const { return to_vector().allFinite(); }

  /// Throws if non-finite or if pitch sits at the Euler singularity.
  void validate() const {
    if (!finite()) throw Error("rigid-body state has non-finite components");
    if (std::abs(theta.y()) >= M_PI / 2 - kOrientationGuard)
      throw SingularOrientationError("pitch " + std::to_string(theta.y()) +
                                     " rad is at the Euler-angle singularity");
  }

  bool operator==(const RigidBodyState&) const = default;
};

struct ModelParams {
  double mass = 12.75;  // torso 4.75 kg + 4 legs x 2 kg
  Mat3 inertia = Eigen::Vector3d(0.1, 0.25, 0.3).asDiagonal();
  Vec3 gravity{0.0, 0.0, 9.81};  // subtracted from the CoM acceleration

  void validate() const {
    if (!(mass > 0.0) || !std::isfinite(mass)) throw ConfigError("mass must be positive");
    if (!inertia.allFinite() || (inertia - inertia.transpose()).cwiseAbs().maxCoeff() > 1e-12)
      throw ConfigError("inertia must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat3> eig(inertia);
    if (eig.eigenvalues().minCoeff() <= 0.0) throw ConfigError("inertia must be positive definite");
    if (!gravity.allFinite()) throw ConfigError("gravity must be finite");
  }
};

/// Body-frame force applied at a body-frame point (used for pushes).
struct PointForce {
  Vec3 force = Vec3::Zero();
  Vec3 offset = Vec3::Zero();
};

struct ControlInput {
  PerLeg<Vec3> forces{Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  PerLeg<Vec3> foot_offsets{Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  StanceMask stance{true, true, true, true};
  std::vector<PointForce> external;

  /// Stacked per-leg forces in leg order, 12 entries.
  Vec12 force_vector() const {
    Vec12 u;
    for (int i = 0; i < kNumLegs; ++i) u.segment<3>(3 * i) = forces[i];
    return u;
  }

  void validate() const {
    for (int i = 0; i < kNumLegs; ++i) {
      if (!forces[i].allFinite() || !foot_offsets[i].allFinite())
        throw Error("control input has non-finite entries");
      if (!stance[i] && !forces[i].isZero(0.0))
        throw Error(std::string("swing leg ") + kLegNames[i] + " carries a nonzero force");
    }
  }
};

inline Mat3 rotation_from_euler(const Vec3& theta) {
  const double cr = std::cos(theta.x()), sr = std::sin(theta.x());
  const double cp = std::cos(theta.y()), sp = std::sin(theta.y());
  const double cy = std::cos(theta.z()), sy = std::sin(theta.z());
  Mat3 r;
  r << cp * cy, -cp * sy, sp,
       cr * sy + sr * sp * cy, cr * cy - sr * sp * sy, -sr * cp,
       sr * sy - cr * sp * cy, sr * cy + cr * sp * sy, cr * cp;
  return r;
}

/// Inverse of rotation_from_euler for |pitch| < pi/2.
inline Vec3 euler_from_rotation(const Mat3& r) {
  const double pitch = std::asin(std::clamp(r(0, 2), -1.0, 1.0));
  const double roll = std::atan2(-r(1, 2), r(2, 2));
  const double yaw = std::atan2(-r(0, 1), r(0, 0));
  return {roll, pitch, yaw};
}

/// Maps body angular velocity to X-Y-Z Euler-angle rates: Theta_dot = A * Omega.
inline Mat3 euler_rate_matrix(double pitch, double yaw) {
  if (!(std::abs(pitch) < M_PI / 2 - kOrientationGuard))
    throw SingularOrientationError("Euler-rate matrix is singular at pitch " + std::to_string(pitch));
  const double ct = std::cos(pitch), st = std::sin(pitch);
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  Mat3 a;
  a << cy / ct, -sy / ct, 0.0,
       sy, cy, 0.0,
       -cy * st / ct, sy * st / ct, 1.0;
  return a;
}

namespace detail {

inline Vec12 srb_derivative(const Vec12& x, const ControlInput& u, const ModelParams& params) {
  const Vec3 theta = x.segment<3>(3);
  const Vec3 v = x.segment<3>(6);
  const Vec3 omega = x.segment<3>(9);
  const Mat3 rot = rotation_from_euler(theta);

  Vec3 force = Vec3::Zero();
  Vec3 torque = Vec3::Zero();
  for (int i = 0; i < kNumLegs; ++i) {
    if (!u.stance[i]) continue;
    force += u.forces[i];
    torque += u.foot_offsets[i].cross(u.forces[i]);
  }
  for (const auto& ext : u.external) {
    force += ext.force;
    torque += ext.offset.cross(ext.force);
  }

  Vec12 dx;
  dx.segment<3>(0) = v;
  dx.segment<3>(3) = euler_rate_matrix(theta.y(), theta.z()) * omega;
  dx.segment<3>(6) = rot * force / params.mass - params.gravity;
  dx.segment<3>(9) = params.inertia.ldlt().solve(-omega.cross(params.inertia * omega) + torque);
  return dx;
}

}  // namespace detail

inline Vec12 dynamics(const RigidBodyState& x, const ControlInput& u, const ModelParams& params) {
  x.validate();
  u.validate();
  return detail::srb_derivative(x.to_vector(), u, params);
}

/// Classical RK4 with the control held over the step.
inline RigidBodyState rk4_step(const RigidBodyState& x, const ControlInput& u, double dt,
                               const ModelParams& params) {
  if (!(dt >= 0.0)) throw Error("rk4_step requires dt >= 0");
  x.validate();
  u.validate();
  if (dt == 0.0) return x;
  const Vec12 x0 = x.to_vector();
  const Vec12 k1 = detail::srb_derivative(x0, u, params);
  const Vec12 k2 = detail::srb_derivative(x0 + 0.5 * dt * k1, u, params);
  const Vec12 k3 = detail::srb_derivative(x0 + 0.5 * dt * k2, u, params);
  const Vec12 k4 = detail::srb_derivative(x0 + dt * k3, u, params);
  return RigidBodyState::from_vector(x0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
}

inline void check_divergence(const RigidBodyState& x) {
  const Vec12 v = x.to_vector();
  if (!v.allFinite() || v.cwiseAbs().maxCoeff() > kDivergenceLimit)
    throw DivergenceError("state diverged (component magnitude above 1e6)");
}

inline std::vector<RigidBodyState> rollout(const RigidBodyState& x0, std::span<const ControlInput> controls,
                                           double dt, const ModelParams& params) {
  if (controls.empty()) throw Error("rollout needs at least one control");
  std::vector<RigidBodyState> traj;
  traj.reserve(controls.size() + 1);
  traj.push_back(x0);
  for (const auto& u : controls) {
    traj.push_back(rk4_step(traj.back(), u, dt, params));
    check_divergence(traj.back());
  }
  return traj;
}

}  // namespace kmpc
