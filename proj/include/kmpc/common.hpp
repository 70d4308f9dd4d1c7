#pragma once

#include <Eigen/Dense>

#include <array>
#include <stdexcept>
#include <string>

namespace kmpc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using Vec12 = Eigen::Matrix<double, 12, 1>;

inline constexpr int kNumLegs = 4;
inline constexpr int kStateDim = 12;
inline constexpr int kControlDim = 3 * kNumLegs;

/// Leg order used everywhere: front-right, front-left, rear-right, rear-left.
enum class Leg : int { FR = 0, FL = 1, RR = 2, RL = 3 };

inline constexpr std::array<const char*, kNumLegs> kLegNames = {"FR", "FL", "RR", "RL"};

template <typename T>
using PerLeg = std::array<T, kNumLegs>;

using StanceMask = PerLeg<bool>;

/// Nominal standing CoM height above flat ground (m).
inline constexpr double kNominalHeight = 0.3;

/// Hip joint positions relative to the CoM, body frame (m).
inline PerLeg<Vec3> default_hip_offsets() {
  return {Vec3(0.19, -0.13, 0.0), Vec3(0.19, 0.13, 0.0), Vec3(-0.19, -0.13, 0.0),
          Vec3(-0.19, 0.13, 0.0)};
}

/// Feet directly below the hips at nominal height: the lever arms the
/// identified model is trained with.
inline PerLeg<Vec3> nominal_foot_offsets() {
  auto r = default_hip_offsets();
  for (auto& v : r) v.z() -= kNominalHeight;
  return r;
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// |pitch| too close to pi/2 for the XYZ Euler-rate map.
class SingularOrientationError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class RankDeficiencyError : public Error {
 public:
  using Error::Error;
};

class WorkspaceError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Max-abs norm that is 0 for empty vectors.
template <typename Derived>
double inf_norm(const Eigen::MatrixBase<Derived>& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError("dimension mismatch: " + what);
}

}  // namespace kmpc
