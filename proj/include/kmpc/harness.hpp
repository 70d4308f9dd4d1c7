#pragma once

// Closed-loop experiments: estimator -> MPC (every control tick) -> stance /
// swing torque mapping -> rigid-body plant at fine substeps.

#include "kmpc/config.hpp"
#include "kmpc/gait.hpp"
#include "kmpc/leg_kinematics.hpp"
#include "kmpc/lmpc.hpp"
#include "kmpc/state_estimator.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace kmpc {

struct LogRow {
  double t = 0.0;
  Vec12 state = Vec12::Zero();
  Vec3 v_est = Vec3::Zero();
  Vec12 reference = Vec12::Zero();
  Vec12 forces = Vec12::Zero();   // commanded, body frame
  Vec12 torques = Vec12::Zero();  // joint torques at the tick's first substep, leg order
  StanceMask stance{false, false, false, false};
  int qp_status = 0;
  int qp_iterations = 0;
  double qp_stationarity = 0.0;
  double qp_feasibility = 0.0;
  double qp_solve_time = 0.0;
  bool degraded = false;
  bool torque_saturated = false;

  bool operator==(const LogRow&) const = default;
};

struct RunLog {
  std::vector<LogRow> rows;
  bool aborted = false;
  std::string abort_reason;
  long plant_steps = 0;
  long control_ticks = 0;
  std::vector<long> phase_plant_steps;  // plant steps spent in each gait phase
};

namespace detail {

inline int qp_status_code(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return 0;
    case QpStatus::MaxIterations: return 1;
    case QpStatus::Infeasible: return 2;
  }
  return 3;
}

inline Vec3 clamp_to_workspace(const Vec3& rel, const LegGeometry& g) {
  const double outer = g.l1 + g.l2 - 1e-3;
  const double inner = std::abs(g.l1 - g.l2) + 1e-3;
  const double d = rel.norm();
  if (d > outer) return rel * (outer / d);
  if (d < inner) return d > 0.0 ? Vec3(rel * (inner / d)) : Vec3(0.0, 0.0, -inner);
  return rel;
}

inline ReferenceGenerator::Command command_at(const std::vector<CommandSegment>& segs, double t) {
  ReferenceGenerator::Command cmd;
  for (const auto& s : segs)
    if (s.start <= t + 1e-12) cmd = {s.forward, s.lateral, s.yaw_rate};
  return cmd;
}

}  // namespace detail

/// Samples the training set described by `cfg.sysid` and fits the lifted model.
inline KoopmanModel identify_model(const ExperimentConfig& cfg, SnapshotDataset* dataset_out = nullptr) {
  const auto& s = cfg.sysid;
  const unsigned threads = s.threads == 0 ? detail::default_threads() : s.threads;
  SnapshotDataset data =
      generate_dataset(s.rollouts, s.horizon, s.dt, uniform_state_sampler(s.sampling),
                       uniform_control_sampler(s.sampling, cfg.params), cfg.params, cfg.seed, threads);
  KoopmanModel model = edmd_fit(data, s.dict_order, s.regularization);
  if (dataset_out) *dataset_out = std::move(data);
  return model;
}

/// Fresh test rollouts (seed offset from the training seed) over `cfg.sysid.test_horizon`.
inline FitReport evaluate_identified(const ExperimentConfig& cfg, const KoopmanModel& model) {
  const auto& s = cfg.sysid;
  const unsigned threads = s.threads == 0 ? detail::default_threads() : s.threads;
  return evaluate_fit(model, s.test_rollouts, s.test_horizon, cfg.params, uniform_state_sampler(s.sampling),
                      uniform_control_sampler(s.sampling, cfg.params), cfg.seed + 0x9e3779b97f4a7c15ULL, threads);
}

inline int substeps_per_tick(const ExperimentConfig& cfg) {
  const double ratio = cfg.control_period / cfg.plant_dt;
  const long n = std::lround(ratio);
  if (n < 1 || std::abs(ratio - static_cast<double>(n)) > 1e-9) throw ConfigError("control period must be a multiple of plant dt");
  return static_cast<int>(n);
}

/// Runs the configured closed loop. Plant failures (divergence, a stance
/// foot leaving the leg workspace, singular orientation) end the run early
/// with `aborted` set and the partial log kept.
inline RunLog run_experiment(const ExperimentConfig& cfg, const KoopmanModel& model) {
  cfg.validate();
  model.validate();
  const int substeps = substeps_per_tick(cfg);
  const long ticks = std::lround(cfg.duration / cfg.control_period);
  const LegGeometry& legs = cfg.legs;
  const double g_mag = cfg.params.gravity.norm();

  MpcConfig mpc_cfg = cfg.mpc;
  mpc_cfg.dt = model.dt;
  mpc_cfg.warm_shift_steps = std::max(1, static_cast<int>(std::lround(cfg.control_period / model.dt)));
  MpcController controller(model, mpc_cfg);
  TrotScheduler fsm(cfg.gait.phase_duration);

  RigidBodyState x;
  x.p = Vec3(0.0, 0.0, cfg.nominal_height);
  ReferenceGenerator refgen(x, cfg.nominal_height);

  PerLeg<Vec3> foot_world, swing_start, swing_end;
  PerLeg<SwingLegFixture> fixtures;
  StanceMask planted{true, true, true, true};
  {
    const Mat3 r = rotation_from_euler(x.theta);
    for (int leg = 0; leg < kNumLegs; ++leg) {
      Vec3 f = x.p + r * legs.hip_offsets[leg];
      f.z() = 0.0;
      foot_world[leg] = swing_start[leg] = swing_end[leg] = f;
      fixtures[leg].state.q = leg_ik(r.transpose() * (f - x.p) - legs.hip_offsets[leg], legs);
    }
  }

  EstimatorState est;
  est.sigma_a = cfg.estimator.sigma_a;
  est.sigma_v = cfg.estimator.sigma_v;
  est.v = x.v;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise_a(0.0, cfg.estimator.sensor_noise ? cfg.estimator.sigma_a : 0.0);
  std::normal_distribution<double> noise_v(0.0, cfg.estimator.sensor_noise ? cfg.estimator.sigma_v : 0.0);
  auto noise3 = [&](std::normal_distribution<double>& d) { return Vec3(d(rng), d(rng), d(rng)); };

  std::vector<bool> jump_done(cfg.disturbances.size(), false);
  RunLog log;
  log.rows.reserve(static_cast<std::size_t>(ticks));
  long current_phase = -1;

  auto abort = [&](const std::string& why) {
    log.aborted = true;
    log.abort_reason = why;
  };

  for (long k = 0; k < ticks && !log.aborted; ++k) {
    const double t = static_cast<double>(k) * cfg.control_period;
    const auto cmd = detail::command_at(cfg.commands, t);
    const Mat3 rot = rotation_from_euler(x.theta);

    // ---- sense + estimate
    Vec3 v_hat = x.v;
    if (cfg.estimator.enabled) {
      std::vector<LegOdometry> odo;
      for (int leg = 0; leg < kNumLegs; ++leg) {
        if (!planted[leg]) continue;
        LegOdometry o;
        o.foot = rot.transpose() * (foot_world[leg] - x.p);
        try {
          o.J = leg_jacobian(leg_ik(o.foot - legs.hip_offsets[leg], legs), legs);
        } catch (const WorkspaceError&) {
          continue;
        }
        const Vec3 foot_rate = -x.omega.cross(o.foot) - rot.transpose() * x.v;
        o.qd = o.J.lu().solve(foot_rate + noise3(noise_v));
        odo.push_back(o);
      }
      est = ekf_update(est, odo, rot, x.omega);
      v_hat = est.v;
    }

    // ---- gait
    const GaitState gait = fsm.update(t);
    if (gait.phase_index != current_phase) {
      current_phase = gait.phase_index;
      log.phase_plant_steps.push_back(0);
      for (int leg = 0; leg < kNumLegs; ++leg) {
        if (gait.stance[leg] && !planted[leg]) {
          foot_world[leg] = swing_end[leg];
          foot_world[leg].z() = 0.0;
        }
        if (!gait.stance[leg]) swing_start[leg] = foot_world[leg];
        planted[leg] = gait.stance[leg];
      }
    }

    // ---- MPC
    if (cfg.anchor_reference_xy) refgen.anchor_xy(x.p);
    const auto horizon = refgen.horizon(cmd, mpc_cfg.horizon, model.dt);
    RigidBodyState x_ctrl = x;
    x_ctrl.v = v_hat;
    MpcResult sol;
    try {
      sol = controller.solve(x_ctrl, horizon, hold_schedule(gait.stance, mpc_cfg.horizon));
    } catch (const Error& e) {
      abort(std::string("MPC failed: ") + e.what());
      break;
    }

    // ---- torque map
    LogRow row;
    row.t = t;
    row.state = x.to_vector();
    row.v_est = v_hat;
    row.reference = refgen.current(cmd);
    row.stance = gait.stance;
    row.qp_status = detail::qp_status_code(sol.status);
    row.qp_iterations = sol.iterations;
    row.qp_stationarity = sol.stationarity_residual;
    row.qp_feasibility = sol.feasibility_residual;
    row.qp_solve_time = sol.solve_time;
    row.degraded = sol.degraded;

    PerLeg<Vec3> q_des, qd_des;
    for (int leg = 0; leg < kNumLegs; ++leg) {
      row.forces.segment<3>(3 * leg) = sol.forces[leg];
      if (gait.stance[leg]) continue;
      const Vec3& hip = legs.hip_offsets[leg];
      const double s = fsm.swing_phase(leg);
      if (!gait.frozen[leg]) {
        const Vec3 hip_world = x.p + rot * hip;
        swing_end[leg] = raibert_target(hip_world, Vec3(x.v.x(), x.v.y(), 0.0), refgen.world_velocity(cmd),
                                        (1.0 - gait.phase[leg]) * cfg.gait.phase_duration,
                                        cfg.gait.phase_duration, cfg.gait.raibert_gain);
      }
      const auto sw = swing_trajectory(swing_start[leg], swing_end[leg], cfg.gait.swing_height, s,
                                       gait.frozen[leg] ? 0.0 : 1.0 / cfg.gait.phase_duration);
      const Vec3 rel = detail::clamp_to_workspace(rot.transpose() * (sw.position - x.p) - hip, legs);
      q_des[leg] = leg_ik(rel, legs);
      const Vec3 rel_rate = rot.transpose() * (sw.velocity - x.v) - x.omega.cross(rel + hip);
      qd_des[leg] = leg_jacobian(q_des[leg], legs).lu().solve(rel_rate);
      if (!qd_des[leg].allFinite()) qd_des[leg].setZero();
    }

    // ---- plant substeps
    for (int sub = 0; sub < substeps; ++sub) {
      const double ts = t + sub * cfg.plant_dt;
      const Mat3 r = rotation_from_euler(x.theta);
      // The plan is executed step by step until the next replanning tick.
      const int plan_step = cfg.follow_plan ? std::min(sub, mpc_cfg.horizon - 1) : 0;
      ControlInput u;
      u.stance = gait.stance;
      bool failed = false;
      for (int leg = 0; leg < kNumLegs; ++leg) {
        const Vec3 foot_body = r.transpose() * (foot_world[leg] - x.p);
        u.foot_offsets[leg] = foot_body;
        if (!gait.stance[leg]) continue;
        const Vec3 f_cmd = sol.U.segment<3>(plan_step * kControlDim + 3 * leg);
        Vec3 q;
        try {
          q = leg_ik(foot_body - legs.hip_offsets[leg], legs);
        } catch (const WorkspaceError& e) {
          abort(std::string("stance foot ") + kLegNames[leg] + " out of reach: " + e.what());
          failed = true;
          break;
        }
        const Mat3 jac = leg_jacobian(q, legs);
        const auto tc = stance_torques(jac, -f_cmd, legs.torque_limit);
        if (sub == 0) row.torques.segment<3>(3 * leg) = tc.tau;
        row.torque_saturated = row.torque_saturated || tc.saturated;
        u.forces[leg] = tc.saturated ? Vec3(-jac.transpose().lu().solve(tc.tau)) : f_cmd;
        fixtures[leg].state.q = q;
        fixtures[leg].state.qd = jac.lu().solve(-x.omega.cross(foot_body) - r.transpose() * x.v);
      }
      if (failed) break;
      for (std::size_t i = 0; i < cfg.disturbances.size(); ++i) {
        const auto& d = cfg.disturbances[i];
        if (d.kind == Disturbance::Kind::Impulse) {
          if (ts + 1e-12 >= d.start && ts + 1e-12 < d.start + d.duration)
            u.external.push_back({r.transpose() * d.force_world, d.offset_body});
        } else if (!jump_done[i] && ts + 1e-12 >= d.start) {
          jump_done[i] = true;
          x.v += d.dv_world;
          x.theta += d.dtheta;
          x.omega += d.domega_body;
        }
      }
      RigidBodyState next;
      try {
        next = rk4_step(x, u, cfg.plant_dt, cfg.params);
        check_divergence(next);
      } catch (const Error& e) {
        abort(std::string("plant failed: ") + e.what());
        break;
      }
      if (cfg.estimator.enabled) {
        const Vec3 specific = r.transpose() * ((next.v - x.v) / cfg.plant_dt + Vec3(0.0, 0.0, g_mag));
        est = ekf_predict(est, specific + noise3(noise_a), r, cfg.plant_dt, Vec3(0.0, 0.0, -g_mag));
      }
      for (int leg = 0; leg < kNumLegs; ++leg) {
        if (gait.stance[leg]) continue;
        const auto tc = swing_torques(fixtures[leg].state.q, fixtures[leg].state.qd, q_des[leg], qd_des[leg],
                                      cfg.gait.swing_kp, cfg.gait.swing_kd, legs.torque_limit);
        if (sub == 0) row.torques.segment<3>(3 * leg) = tc.tau;
        row.torque_saturated = row.torque_saturated || tc.saturated;
        fixtures[leg].step(tc.tau, cfg.plant_dt);
      }
      x = next;
      ++log.plant_steps;
      ++log.phase_plant_steps.back();
    }
    if (log.aborted) break;
    log.rows.push_back(row);
    ++log.control_ticks;
    refgen.advance(cmd, cfg.control_period);
  }
  return log;
}

}  // namespace kmpc
