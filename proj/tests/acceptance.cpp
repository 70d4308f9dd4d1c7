// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Closed-loop criteria load the same configs/*.json the CLI ships with.

#include "kmpc/config.hpp"
#include "kmpc/harness.hpp"
#include "kmpc/run_log.hpp"

#include "oracles.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>

#ifndef KMPC_CONFIG_DIR
#error "KMPC_CONFIG_DIR must point at the configs directory"
#endif

using namespace kmpc;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ExperimentConfig shipped(const char* name) { return load_config(std::string(KMPC_CONFIG_DIR) + "/" + name); }

VecX gaussian(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  VecX v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

KoopmanModel perturbed_identity_model(std::mt19937_64& rng) {
  const int n = lift_dim(1);
  KoopmanModel m;
  m.dict_order = 1;
  m.A = MatX::Identity(n, n) + 0.05 * gaussian(rng, n * n).reshaped(n, n);
  m.B = 0.1 * gaussian(rng, n * kControlDim).reshaped(n, kControlDim);
  m.C_x = state_selection(1);
  return m;
}

// ---------------------------------------------------------------------------

Outcome fit_accuracy() {
  const ExperimentConfig cfg = shipped("fit-eval.json");
  const auto t0 = std::chrono::steady_clock::now();
  const KoopmanModel model = identify_model(cfg);
  const FitReport rep = evaluate_identified(cfg, model);
  const double elapsed = seconds_since(t0);
  const double worst = rep.max_abs.maxCoeff();
  const bool pass = worst <= cfg.thresholds.fit_max_error && elapsed < cfg.thresholds.fit_runtime;
  return {pass, fmt("max abs error %.3e over %zu tests x %.3f s (target 1e-3, limit %.0e); pos %.2e ori %.2e "
                    "vel %.2e omega %.2e; %.2f s",
                    worst, rep.num_tests, rep.horizon, cfg.thresholds.fit_max_error, rep.group_max_abs(0),
                    rep.group_max_abs(1), rep.group_max_abs(2), rep.group_max_abs(3), elapsed)};
}

// Minimum-norm least squares residual through a truncated SVD.
double svd_residual(const MatX& z, const MatX& target) {
  Eigen::BDCSVD<MatX> svd(z.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VecX s = svd.singularValues();
  const double cutoff = s(0) * 1e-13 * static_cast<double>(std::max(z.rows(), z.cols()));
  VecX inv(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) inv(i) = s(i) > cutoff ? 1.0 / s(i) : 0.0;
  const MatX kt = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose() * target.transpose();
  return (target - kt.transpose() * z).squaredNorm();
}

Outcome edmd_vs_svd() {
  const ModelParams params;
  const SamplingRanges r;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto d = generate_dataset(20, 0.1, 0.001, uniform_state_sampler(r), uniform_control_sampler(r, params),
                                    params, 500 + seed);
    const auto model = edmd_fit(d, kDefaultDictOrder, 0.0);
    const int n = lift_dim(kDefaultDictOrder);
    MatX z(n + kControlDim, d.size());
    z.topRows(n) = lift_columns(d.X, kDefaultDictOrder);
    z.bottomRows(kControlDim) = d.U;
    const double ref = svd_residual(z, lift_columns(d.Y, kDefaultDictOrder));
    worst = std::max(worst, std::abs(model.training_residual - ref) / ref);
  }
  return {worst <= 1e-8, fmt("worst relative residual gap %.2e over 10 datasets (limit 1e-8)", worst)};
}

Outcome condensation() {
  std::mt19937_64 rng(41);
  std::uniform_int_distribution<int> horizon(1, 10);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = perturbed_identity_model(rng);
    const int k = horizon(rng);
    const auto cm = condense(m, k);
    const VecX z0 = gaussian(rng, m.A.rows());
    const VecX u = gaussian(rng, kControlDim * k);
    const VecX stacked = cm.A_qp * z0 + cm.B_qp * u;
    VecX z = z0;
    for (int i = 0; i < k; ++i) {
      z = m.A * z + m.B * u.segment<kControlDim>(i * kControlDim);
      worst = std::max(worst, inf_norm(stacked.segment<kStateDim>(i * kStateDim) - m.C_x * z));
    }
  }
  return {worst < 1e-10, fmt("worst stacked vs recursive gap %.2e over 100 cases (limit 1e-10)", worst)};
}

Outcome cost_gradient() {
  std::mt19937_64 rng(43);
  std::uniform_int_distribution<int> horizon(1, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    MpcConfig cfg;
    cfg.horizon = horizon(rng);
    cfg.q_diag = gaussian(rng, kStateDim).cwiseAbs();
    cfg.r_diag = gaussian(rng, kControlDim).cwiseAbs().array() + 0.01;
    const auto cm = condense(perturbed_identity_model(rng), cfg);
    const VecX z0 = gaussian(rng, cm.A_qp.cols());
    const VecX xr = gaussian(rng, cm.A_qp.rows());
    const VecX u = gaussian(rng, cm.B_qp.cols());
    const auto cost = build_cost(cm, z0, xr);
    const VecX analytic = cost.H * u + cost.P;
    const VecX fd = oracle::fd_gradient([&](const VecX& v) { return tracking_cost(cm, z0, xr, v); }, u);
    worst = std::max(worst, (fd - analytic).norm() / analytic.norm());
  }
  return {worst < 1e-6, fmt("worst relative gradient error %.2e over 20 instances (limit 1e-6)", worst)};
}

QpProblem random_qp(std::mt19937_64& rng, int d, int q) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const MatX m = gaussian(rng, d * d).reshaped(d, d);
  const MatX h = m.transpose() * m + 0.1 * MatX::Identity(d, d);
  const VecX p = gaussian(rng, d, 5.0), x0 = gaussian(rng, d);
  const MatX c = gaussian(rng, q * d).reshaped(q, d);
  const VecX cx = c * x0;
  VecX lo(q), hi(q);
  for (int i = 0; i < q; ++i) {
    const double kind = u(rng);
    lo(i) = kind < 0.3 ? -kInf : cx(i) - u(rng);
    hi(i) = kind >= 0.3 && kind < 0.5 ? kInf : cx(i) + u(rng);
  }
  return QpProblem::make(h, p, c, lo, hi);
}

Outcome qp_vs_oracle() {
  std::mt19937_64 rng(47);
  std::uniform_int_distribution<int> dd(2, 24);
  double worst_obj = 0.0, worst_kkt = 0.0;
  int failures = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int d = dd(rng);
    const int q = std::uniform_int_distribution<int>(0, 2 * d)(rng);
    const auto prob = random_qp(rng, d, q);
    const auto sol = solve_qp(prob);
    if (!sol.optimal()) {
      ++failures;
      continue;
    }
    const auto k = oracle::kkt(prob.H, prob.P, prob.C, prob.c_lo, prob.c_hi, sol.U, sol.multipliers);
    worst_kkt = std::max({worst_kkt, k.stationarity, k.feasibility, k.complementarity, k.sign});
    const auto ref = oracle::dual_projected_gradient(prob.H, prob.P, prob.C, prob.c_lo, prob.c_hi);
    worst_obj = std::max(worst_obj, std::abs(prob.objective(sol.U) - ref.objective) /
                                        std::max(1.0, std::abs(ref.objective)));
  }
  const bool pass = failures == 0 && worst_obj <= 1e-6 && worst_kkt <= 1e-6;
  return {pass, fmt("50 QPs: worst objective gap %.2e, worst KKT residual %.2e, non-optimal %d (limits 1e-6)",
                    worst_obj, worst_kkt, failures)};
}

Outcome mpc_solve_time(const KoopmanModel& model) {
  ExperimentConfig cfg = shipped("track-velocity.json");
  cfg.mpc.horizon = 6;
  cfg.duration = 4.0;
  const RunLog log = run_experiment(cfg, model);
  const RunMetrics m = compute_metrics(log.rows, cfg, log.aborted, log.abort_reason);
  const double ms = 1e3 * m.median_solve_time;
  return {!log.aborted && ms <= 10.0,
          fmt("median k=6 solve %.3f ms over %zu ticks (target 3 ms, limit 10 ms), max %.3f ms", ms, m.samples,
              1e3 * m.max_solve_time)};
}

struct ScenarioRun {
  RunMetrics metrics;
  std::vector<Check> checks;
  double elapsed = 0.0;
};

ScenarioRun run_scenario(const char* file) {
  const ExperimentConfig cfg = shipped(file);
  const auto t0 = std::chrono::steady_clock::now();
  const KoopmanModel model = identify_model(cfg);
  const RunLog log = run_experiment(cfg, model);
  ScenarioRun r;
  r.elapsed = seconds_since(t0);
  r.metrics = compute_metrics(log.rows, cfg, log.aborted, log.abort_reason);
  r.checks = evaluate_checks(cfg, r.metrics);
  return r;
}

std::string failed_checks(const std::vector<Check>& checks) {
  std::string s;
  for (const auto& c : checks)
    if (!c.pass) s += " [" + c.name + " failed]";
  return s;
}

Outcome velocity_tracking() {
  const auto r = run_scenario("track-velocity.json");
  const bool pass = all_pass(r.checks) && r.elapsed < 120.0;
  const auto& v = r.metrics.velocity;
  return {pass, fmt("pooled velocity RMSE %.4f (x %.4f y %.4f z %.4f, limit 0.05); %.2f s wall%s", v.pooled,
                    v.per_axis[0], v.per_axis[1], v.per_axis[2], r.elapsed, failed_checks(r.checks).c_str())};
}

Outcome yaw_tracking() {
  const auto r = run_scenario("track-turn.json");
  return {all_pass(r.checks), fmt("yaw-rate RMSE %.4f rad/s (limit 0.15); %.2f s wall%s", r.metrics.yaw_rate.pooled,
                                  r.elapsed, failed_checks(r.checks).c_str())};
}

Outcome push_recovery() {
  const auto r = run_scenario("push-recovery.json");
  const auto& m = r.metrics;
  return {all_pass(r.checks),
          fmt("peak forward deviation %.3f m/s (0.4 +/- 0.1), peak pitch %.2f deg (>= 5), recovery %.3f s (<= 2), "
              "min height %.3f m%s",
              m.peak_velocity_deviation, m.peak_pitch_deviation_deg, m.recovery_time, m.min_height,
              failed_checks(r.checks).c_str())};
}

// Noiseless sensors synthesized from the plant with all four feet planted.
double ekf_zero_noise_error(bool& psd) {
  const ModelParams params;
  const LegGeometry g;
  RigidBodyState x;
  x.p = Vec3(0, 0, kNominalHeight);
  x.v = Vec3(0.2, -0.1, 0.0);
  x.omega = Vec3(0.1, -0.2, 0.3);
  PerLeg<Vec3> feet;
  for (int leg = 0; leg < kNumLegs; ++leg) feet[leg] = Vec3(g.hip_offsets[leg].x(), g.hip_offsets[leg].y(), 0.0);
  EstimatorState est;
  est.sigma_a = 0.0;
  est.sigma_v = 0.0;
  double worst = 0.0;
  psd = true;
  for (int k = 0; k < 300; ++k) {
    const Mat3 r = rotation_from_euler(x.theta);
    if (k % 5 == 0) {
      std::vector<LegOdometry> legs;
      for (int leg = 0; leg < kNumLegs; ++leg) {
        LegOdometry o;
        o.foot = r.transpose() * (feet[leg] - x.p);
        o.J = leg_jacobian(leg_ik(o.foot - g.hip_offsets[leg], g), g);
        o.qd = o.J.lu().solve(Vec3(-x.omega.cross(o.foot) - r.transpose() * x.v));
        legs.push_back(o);
      }
      est = ekf_update(est, legs, r, x.omega);
    }
    if (k % 5 == 0) worst = std::max(worst, (est.v - x.v).norm());
    ControlInput u;
    for (int leg = 0; leg < kNumLegs; ++leg) {
      u.foot_offsets[leg] = r.transpose() * (feet[leg] - x.p);
      u.forces[leg] = Vec3(0.2, -0.1, params.mass * 9.81 / 4 + 0.3 * leg);
    }
    const auto next = rk4_step(x, u, 0.001, params);
    est = ekf_predict(est, r.transpose() * ((next.v - x.v) / 0.001 - world_gravity()), r, 0.001);
    x = next;
    worst = std::max(worst, (est.v - x.v).norm());
    const auto eig = Eigen::SelfAdjointEigenSolver<Mat3>(est.P).eigenvalues();
    psd = psd && (est.P - est.P.transpose()).cwiseAbs().maxCoeff() <= 1e-15 && eig.minCoeff() >= 0.0;
  }
  return worst;
}

Outcome property_suites() {
  const LegGeometry g;
  std::mt19937_64 rng(53);
  std::uniform_real_distribution<double> roll(-0.6, 0.6), pitch(-1.2, 1.2), knee(-2.6, -0.1), any(-3.0, 3.0);
  double fk_ik = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Vec3 target = leg_fk(Vec3(roll(rng), pitch(rng), knee(rng)), g);
    fk_ik = std::max(fk_ik, (leg_fk(leg_ik(target, g), g) - target).norm());
  }
  double jac = 0.0;
  for (int i = 0; i < 500; ++i) {
    const Vec3 q(any(rng), any(rng), any(rng));
    const MatX fd = oracle::fd_jacobian([&](const VecX& v) -> VecX { return leg_fk(Vec3(v), g); }, q);
    jac = std::max(jac, (leg_jacobian(q, g) - fd).cwiseAbs().maxCoeff());
  }

  ModelParams free_body;
  free_body.gravity.setZero();
  double drift_h = 0.0, drift_e = 0.0;
  std::uniform_real_distribution<double> ang(-0.3, 0.3), rate(-1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    RigidBodyState x;
    x.theta = Vec3(ang(rng), ang(rng), ang(rng));
    x.omega = Vec3(rate(rng), rate(rng), rate(rng));
    auto momentum = [&](const RigidBodyState& s) {
      return (rotation_from_euler(s.theta) * free_body.inertia * s.omega).eval();
    };
    auto energy = [&](const RigidBodyState& s) { return 0.5 * s.omega.dot(free_body.inertia * s.omega); };
    const Vec3 h0 = momentum(x);
    const double e0 = energy(x);
    for (int k = 0; k < 1000; ++k) {
      x = rk4_step(x, ControlInput{}, 0.001, free_body);
      drift_h = std::max(drift_h, (momentum(x) - h0).norm() / h0.norm());
      drift_e = std::max(drift_e, std::abs(energy(x) - e0) / e0);
    }
  }

  bool psd = false;
  const double ekf = ekf_zero_noise_error(psd);
  const bool pass = fk_ik < 1e-9 && jac < 1e-6 && drift_h < 1e-6 && drift_e < 1e-6 && ekf < 1e-9 && psd;
  return {pass, fmt("FK(IK) %.1e (<1e-9), Jacobian vs FD %.1e (<1e-6), momentum drift %.1e, energy drift %.1e "
                    "(<1e-6), zero-noise EKF %.1e (<1e-9), covariance PSD %s",
                    fk_ik, jac, drift_h, drift_e, ekf, psd ? "yes" : "no")};
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  const KoopmanModel model = identify_model(shipped("track-velocity.json"));

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"fit_accuracy", fit_accuracy},
      {"edmd_matches_svd", edmd_vs_svd},
      {"condensation_exact", condensation},
      {"cost_gradient", cost_gradient},
      {"qp_matches_oracle", qp_vs_oracle},
      {"mpc_solve_time", [&] { return mpc_solve_time(model); }},
      {"velocity_tracking", velocity_tracking},
      {"yaw_rate_tracking", yaw_tracking},
      {"push_recovery", push_recovery},
      {"property_suites", property_suites},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %2zu %-20s %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed in %.1f s\n", criteria.size() - failed, criteria.size(), seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
