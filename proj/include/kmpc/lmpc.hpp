#pragma once

// Condensed linear MPC over the lifted Koopman model.
//
// Stacking the recursion Pi_{i+1} = A Pi_i + B u_i over k steps gives
//   X = A_qp Pi_0 + B_qp U,   X = [C_x Pi_1; ...; C_x Pi_k]
// and the tracking cost sum ||x_i - x_i^d||_Q^2 + ||u_i||_R^2 becomes the QP
//   min 1/2 U^T H U + P U,  H = 2 (B_qp^T Q B_qp + R),  P = 2 (A_qp Pi_0 - X^d)^T Q B_qp.

#include "kmpc/common.hpp"
#include "kmpc/koopman.hpp"
#include "kmpc/qp_solver.hpp"
#include "kmpc/srb_dynamics.hpp"

#include <optional>
#include <vector>

namespace kmpc {

/// Rows per foot per step: 3 force bounds followed by 4 friction-pyramid faces.
inline constexpr int kRowsPerFoot = 7;
inline constexpr int kRowsPerStep = kRowsPerFoot * kNumLegs;

struct MpcConfig {
  int horizon = 10;
  double dt = 0.001;
  Vec12 q_diag = (Vec12() << 50, 50, 100, 100, 100, 100, 30, 30, 20, 1, 1, 1).finished();
  VecX r_diag = VecX::Constant(kControlDim, 1e-7);
  Vec3 f_min{-150.0, -150.0, 0.0};
  Vec3 f_max{150.0, 150.0, 250.0};
  double mu = 0.6;
  bool friction_pyramid = true;
  bool heading_frame = true;
  bool warm_start = true;
  int warm_shift_steps = 5;  // model steps per control tick
  QpSettings qp;

  void validate() const {
    if (horizon < 1) throw ConfigError("MPC horizon must be >= 1");
    if (!(dt > 0.0)) throw ConfigError("MPC dt must be positive");
    if ((q_diag.array() < 0.0).any()) throw ConfigError("Q entries must be nonnegative");
    if (r_diag.size() != kControlDim || (r_diag.array() <= 0.0).any())
      throw ConfigError("R must have 12 strictly positive entries");
    if (f_min.x() > 0.0 || f_min.y() > 0.0 || f_max.x() < 0.0 || f_max.y() < 0.0)
      throw ConfigError("tangential force bounds must bracket 0");
    if (f_min.z() != 0.0 || f_max.z() <= 0.0) throw ConfigError("vertical force bounds must be [0, fz_max]");
    if (!(mu >= 0.0)) throw ConfigError("friction coefficient must be nonnegative");
  }
};

struct CondensedMatrices {
  MatX A_qp;  // nk x N
  MatX B_qp;  // nk x mk
  VecX Q_qp;  // diagonal, nk
  VecX R_qp;  // diagonal, mk
  int horizon = 0;
};

/// Desired rigid-body states, one per horizon step.
using ReferenceTrajectory = std::vector<Vec12>;

inline CondensedMatrices condense(const KoopmanModel& model, int k) {
  model.validate();
  if (k < 1) throw Error("horizon must be >= 1");
  const auto n = model.C_x.rows();
  const auto big_n = model.A.rows();
  const auto m = model.B.cols();
  // powers[i] = C_x A^i
  std::vector<MatX> powers(k + 1);
  powers[0] = model.C_x;
  for (int i = 1; i <= k; ++i) powers[i] = powers[i - 1] * model.A;

  std::vector<MatX> markov(k);  // C_x A^i B
  for (int i = 0; i < k; ++i) markov[i] = powers[i] * model.B;

  CondensedMatrices cm;
  cm.horizon = k;
  cm.A_qp.resize(n * k, big_n);
  cm.B_qp = MatX::Zero(n * k, m * k);
  for (int i = 0; i < k; ++i) {
    cm.A_qp.middleRows(i * n, n) = powers[i + 1];
    for (int j = 0; j <= i; ++j) cm.B_qp.block(i * n, j * m, n, m) = markov[i - j];
  }
  return cm;
}

inline CondensedMatrices condense(const KoopmanModel& model, const MpcConfig& cfg) {
  cfg.validate();
  CondensedMatrices cm = condense(model, cfg.horizon);
  cm.Q_qp = cfg.q_diag.replicate(cfg.horizon, 1);
  cm.R_qp = cfg.r_diag.replicate(cfg.horizon, 1);
  return cm;
}

inline VecX stack_reference(const ReferenceTrajectory& ref, int k) {
  if (static_cast<int>(ref.size()) < k) throw Error("reference trajectory shorter than the horizon");
  VecX out(kStateDim * k);
  for (int i = 0; i < k; ++i) out.segment<kStateDim>(kStateDim * i) = ref[i];
  return out;
}

inline MatX cost_hessian(const CondensedMatrices& cm) {
  require_dims(cm.Q_qp.size() == cm.B_qp.rows() && cm.R_qp.size() == cm.B_qp.cols(), "weights");
  MatX h = 2.0 * (cm.B_qp.transpose() * cm.Q_qp.asDiagonal() * cm.B_qp);
  h.diagonal() += 2.0 * cm.R_qp;
  return 0.5 * (h + h.transpose());
}

/// Linear term as a column vector, i.e. P^T.
inline VecX cost_linear(const CondensedMatrices& cm, const LiftedState& lifted0, const VecX& x_ref) {
  require_dims(lifted0.size() == cm.A_qp.cols(), "lifted state");
  require_dims(x_ref.size() == cm.A_qp.rows(), "stacked reference");
  return 2.0 * cm.B_qp.transpose() * (cm.Q_qp.asDiagonal() * (cm.A_qp * lifted0 - x_ref));
}

struct QpCost {
  MatX H;
  VecX P;
};

inline QpCost build_cost(const CondensedMatrices& cm, const LiftedState& lifted0, const VecX& x_ref) {
  return {cost_hessian(cm), cost_linear(cm, lifted0, x_ref)};
}

/// Tracking cost sum ||x_i - x_i^d||_Q^2 + ||u_i||_R^2 with x from the stacked prediction.
inline double tracking_cost(const CondensedMatrices& cm, const LiftedState& lifted0, const VecX& x_ref,
                            const VecX& u) {
  const VecX e = cm.A_qp * lifted0 + cm.B_qp * u - x_ref;
  return e.dot(cm.Q_qp.asDiagonal() * e) + u.dot(cm.R_qp.asDiagonal() * u);
}

struct ForceConstraints {
  MatX C;
  VecX lo;
  VecX hi;
};

inline ForceConstraints build_constraints(const MpcConfig& cfg, const std::vector<StanceMask>& schedule) {
  const int k = static_cast<int>(schedule.size());
  if (k != cfg.horizon) throw Error("stance schedule length must equal the horizon");
  ForceConstraints fc;
  fc.C = MatX::Zero(kRowsPerStep * k, kControlDim * k);
  fc.lo.resize(kRowsPerStep * k);
  fc.hi.resize(kRowsPerStep * k);
  for (int i = 0; i < k; ++i) {
    for (int leg = 0; leg < kNumLegs; ++leg) {
      const int row = i * kRowsPerStep + leg * kRowsPerFoot;
      const int col = i * kControlDim + 3 * leg;
      const bool stance = schedule[i][leg];
      for (int a = 0; a < 3; ++a) {
        fc.C(row + a, col + a) = 1.0;
        fc.lo(row + a) = stance ? cfg.f_min(a) : 0.0;
        fc.hi(row + a) = stance ? cfg.f_max(a) : 0.0;
      }
      // |f_t| <= mu f_z as f_t - mu f_z <= 0 and f_t + mu f_z >= 0
      for (int t = 0; t < 2; ++t) {
        const int r_minus = row + 3 + 2 * t;
        const int r_plus = r_minus + 1;
        fc.C(r_minus, col + t) = 1.0;
        fc.C(r_minus, col + 2) = -cfg.mu;
        fc.C(r_plus, col + t) = 1.0;
        fc.C(r_plus, col + 2) = cfg.mu;
        fc.lo(r_minus) = -kInf;
        fc.hi(r_minus) = cfg.friction_pyramid ? 0.0 : kInf;
        fc.lo(r_plus) = cfg.friction_pyramid ? 0.0 : -kInf;
        fc.hi(r_plus) = kInf;
      }
    }
  }
  return fc;
}

// ---------------------------------------------------------------------------
// Heading frame

/// Yaw-aligned frame at the robot's current planar position. The rigid-body
/// dynamics are invariant to yaw rotations and planar translations, so the
/// controller works in this frame and the identified model always sees small
/// yaw and positions near the origin.
struct HeadingFrame {
  Mat3 rot = Mat3::Identity();  // world <- local
  Vec3 origin = Vec3::Zero();

  static HeadingFrame at(const RigidBodyState& x) {
    const Mat3 r = rotation_from_euler(x.theta);
    HeadingFrame f;
    const double heading = std::atan2(r(1, 0), r(0, 0));
    f.rot = Eigen::AngleAxisd(heading, Vec3::UnitZ()).toRotationMatrix();
    f.origin = Vec3(x.p.x(), x.p.y(), 0.0);
    return f;
  }

  Vec12 to_local(const Vec12& w) const {
    Vec12 l;
    l.segment<3>(0) = rot.transpose() * (w.segment<3>(0) - origin);
    l.segment<3>(3) = euler_from_rotation(rot.transpose() * rotation_from_euler(w.segment<3>(3)));
    l.segment<3>(6) = rot.transpose() * w.segment<3>(6);
    l.segment<3>(9) = w.segment<3>(9);
    return l;
  }

  /// Back to world coordinates; yaw is unwrapped towards `yaw_hint`.
  Vec12 to_world(const Vec12& l, double yaw_hint) const {
    Vec12 w;
    w.segment<3>(0) = rot * l.segment<3>(0) + origin;
    Vec3 th = euler_from_rotation(rot * rotation_from_euler(l.segment<3>(3)));
    th.z() += 2.0 * M_PI * std::round((yaw_hint - th.z()) / (2.0 * M_PI));
    w.segment<3>(3) = th;
    w.segment<3>(6) = rot * l.segment<3>(6);
    w.segment<3>(9) = l.segment<3>(9);
    return w;
  }
};

// ---------------------------------------------------------------------------
// Receding-horizon controller

struct MpcResult {
  PerLeg<Vec3> forces{Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};  // body frame
  VecX U;                                   // full horizon
  std::vector<Vec12> predicted;             // k predicted states, world frame
  QpStatus status = QpStatus::MaxIterations;
  bool degraded = false;
  int iterations = 0;
  double stationarity_residual = 0.0;
  double feasibility_residual = 0.0;
  double solve_time = 0.0;
};

class MpcController {
 public:
  MpcController(KoopmanModel model, MpcConfig cfg) : model_(std::move(model)), cfg_(std::move(cfg)) {
    cfg_.validate();
    model_.validate();
    require_dims(model_.B.cols() == kControlDim, "MPC expects a 12-input model");
    cm_ = condense(model_, cfg_);
    hessian_ = cost_hessian(cm_);
    solver_ = QpSolver(cfg_.qp);
  }

  const MpcConfig& config() const { return cfg_; }
  const KoopmanModel& model() const { return model_; }
  const CondensedMatrices& condensed() const { return cm_; }
  const MatX& hessian() const { return hessian_; }

  void reset_warm_start() { warm_.clear(); }

  /// The QP that solve() would pose, without solving it.
  QpProblem problem(const RigidBodyState& x0, const ReferenceTrajectory& ref,
                    const std::vector<StanceMask>& schedule) const {
    const auto [lifted, xref, frame] = localize(x0, ref);
    (void)frame;
    const auto fc = build_constraints(cfg_, schedule);
    return {hessian_, cost_linear(cm_, lifted, xref), fc.C, fc.lo, fc.hi};
  }

  MpcResult solve(const RigidBodyState& x0, const ReferenceTrajectory& ref, const std::vector<StanceMask>& schedule) {
    x0.validate();
    const auto [lifted, xref, frame] = localize(x0, ref);
    MpcResult res = solve_lifted(lifted, xref, schedule);
    res.predicted.clear();
    for (int i = 0; i < cfg_.horizon; ++i) {
      const Vec12 local = (cm_.A_qp.middleRows(i * kStateDim, kStateDim) * lifted +
                           cm_.B_qp.middleRows(i * kStateDim, kStateDim) * res.U);
      res.predicted.push_back(frame.to_world(local, x0.theta.z()));
    }
    return res;
  }

  /// Core solve on an already-lifted initial condition and stacked reference.
  MpcResult solve_lifted(const LiftedState& lifted0, const VecX& x_ref, const std::vector<StanceMask>& schedule) {
    const auto fc = build_constraints(cfg_, schedule);
    QpProblem prob{hessian_, cost_linear(cm_, lifted0, x_ref), fc.C, fc.lo, fc.hi};
    const auto* warm = (cfg_.warm_start && !warm_.empty()) ? &warm_ : nullptr;
    const QpSolution sol = solver_.solve(prob, warm);

    MpcResult res;
    res.status = sol.status;
    res.iterations = sol.iterations;
    res.stationarity_residual = sol.stationarity_residual;
    res.feasibility_residual = sol.feasibility_residual;
    res.solve_time = sol.solve_time;
    res.degraded = !sol.optimal();
    res.U = sol.U;
    if (res.degraded) project_to_bounds(res.U, schedule);
    for (int leg = 0; leg < kNumLegs; ++leg)
      res.forces[leg] = schedule[0][leg] ? Vec3(res.U.segment<3>(3 * leg)) : Vec3::Zero();
    for (int i = 0; i < cfg_.horizon; ++i)
      for (int leg = 0; leg < kNumLegs; ++leg)
        if (!schedule[i][leg]) res.U.segment<3>(i * kControlDim + 3 * leg).setZero();

    warm_.clear();
    if (sol.optimal()) {
      const int shift = cfg_.warm_shift_steps * kRowsPerStep;
      for (const auto& a : sol.active_set)
        if (a.side != BoundSide::Equality && a.row >= shift) warm_.push_back({a.row - shift, a.side});
    }
    (void)x_ref;
    return res;
  }

 private:
  struct Localized {
    LiftedState lifted;
    VecX xref;
    HeadingFrame frame;
  };

  Localized localize(const RigidBodyState& x0, const ReferenceTrajectory& ref) const {
    const VecX stacked = stack_reference(ref, cfg_.horizon);
    if (!cfg_.heading_frame) return {lift(x0, model_.dict_order), stacked, HeadingFrame{}};
    const HeadingFrame frame = HeadingFrame::at(x0);
    const RigidBodyState local = RigidBodyState::from_vector(frame.to_local(x0.to_vector()));
    VecX xref(stacked.size());
    for (int i = 0; i < cfg_.horizon; ++i)
      xref.segment<kStateDim>(kStateDim * i) = frame.to_local(stacked.segment<kStateDim>(kStateDim * i));
    return {lift(local, model_.dict_order), xref, frame};
  }

  void project_to_bounds(VecX& u, const std::vector<StanceMask>& schedule) const {
    for (int i = 0; i < cfg_.horizon; ++i) {
      for (int leg = 0; leg < kNumLegs; ++leg) {
        auto f = u.segment<3>(i * kControlDim + 3 * leg);
        if (!schedule[i][leg]) {
          f.setZero();
          continue;
        }
        for (int a = 0; a < 3; ++a) f(a) = std::clamp(f(a), cfg_.f_min(a), cfg_.f_max(a));
        if (cfg_.friction_pyramid)
          for (int a = 0; a < 2; ++a) f(a) = std::clamp(f(a), -cfg_.mu * f(2), cfg_.mu * f(2));
      }
    }
  }

  KoopmanModel model_;
  MpcConfig cfg_;
  CondensedMatrices cm_;
  MatX hessian_;
  QpSolver solver_;
  std::vector<ActiveConstraint> warm_;
};

/// One-shot convenience wrapper (no warm start, no caching across calls).
inline MpcResult solve_mpc(const KoopmanModel& model, const MpcConfig& cfg, const RigidBodyState& x0,
                           const ReferenceTrajectory& ref, const std::vector<StanceMask>& schedule) {
  MpcConfig c = cfg;
  c.warm_start = false;
  MpcController ctrl(model, c);
  return ctrl.solve(x0, ref, schedule);
}

/// Holds the current stance mask over the whole horizon.
inline std::vector<StanceMask> hold_schedule(const StanceMask& mask, int k) {
  return std::vector<StanceMask>(static_cast<std::size_t>(k), mask);
}

/// Integrates commanded planar velocity and yaw rate into desired states.
class ReferenceGenerator {
 public:
  struct Command {
    double forward = 0.0;   // m/s, heading frame
    double lateral = 0.0;   // m/s, heading frame
    double yaw_rate = 0.0;  // rad/s
  };

  ReferenceGenerator() = default;
  ReferenceGenerator(const RigidBodyState& start, double height) : height_(height) {
    pos_ = Vec3(start.p.x(), start.p.y(), height);
    yaw_ = start.theta.z();
  }

  /// Advances the integrated position/yaw by dt under the command.
  void advance(const Command& cmd, double dt) {
    pos_ += world_velocity(cmd) * dt;
    yaw_ += cmd.yaw_rate * dt;
  }

  Vec12 current(const Command& cmd) const { return state_at(cmd, 0.0); }

  ReferenceTrajectory horizon(const Command& cmd, int k, double dt) const {
    ReferenceTrajectory out;
    out.reserve(k);
    for (int i = 1; i <= k; ++i) out.push_back(state_at(cmd, i * dt));
    return out;
  }

  Vec3 world_velocity(const Command& cmd) const {
    return Eigen::AngleAxisd(yaw_, Vec3::UnitZ()) * Vec3(cmd.forward, cmd.lateral, 0.0);
  }

  /// Re-centres the reference x-y on a measured position (height untouched).
  void anchor_xy(const Vec3& p) {
    pos_.x() = p.x();
    pos_.y() = p.y();
  }

  const Vec3& position() const { return pos_; }
  double yaw() const { return yaw_; }

 private:
  Vec12 state_at(const Command& cmd, double ahead) const {
    const double yaw = yaw_ + cmd.yaw_rate * ahead;
    const Vec3 vel = Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Vec3(cmd.forward, cmd.lateral, 0.0);
    Vec12 x;
    x.segment<3>(0) = pos_ + world_velocity(cmd) * ahead;
    x.segment<3>(3) = Vec3(0.0, 0.0, yaw);
    x.segment<3>(6) = vel;
    x.segment<3>(9) = Vec3(0.0, 0.0, cmd.yaw_rate);
    return x;
  }

  Vec3 pos_ = Vec3(0.0, 0.0, kNominalHeight);
  double yaw_ = 0.0;
  double height_ = kNominalHeight;
};

}  // namespace kmpc
