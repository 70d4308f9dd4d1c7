#pragma once

// Lifted linear model of the rigid-body dynamics identified by EDMD.
//
// The observable dictionary of order p is
//   Pi(x) = [1, p, Theta, pdot, Omega, vec(R W), vec(R W^2), ..., vec(R W^p)]
// with W = hat(Omega) and vec() stacking columns, giving 13 + 9p entries.
// The model advances the lift linearly: Pi+ = A Pi + B u.

#include "kmpc/common.hpp"
#include "kmpc/srb_dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <random>
#include <thread>
#include <vector>

namespace kmpc {

/// Observable vector produced by lift(); entry 0 is the constant 1 and
/// entries 1..12 are the raw state.
using LiftedState = VecX;

inline constexpr int kDefaultDictOrder = 4;
inline constexpr double kDefaultRidge = 1e-12;

inline constexpr int lift_dim(int order) { return 13 + 9 * order; }

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return m;
}

inline LiftedState lift(const RigidBodyState& x, int order) {
  if (order < 1) throw Error("dictionary order must be >= 1");
  LiftedState out(lift_dim(order));
  out(0) = 1.0;
  out.segment<kStateDim>(1) = x.to_vector();
  const Mat3 rot = rotation_from_euler(x.theta);
  const Mat3 w = hat(x.omega);
  Mat3 power = Mat3::Identity();
  for (int k = 0; k < order; ++k) {
    power = power * w;
    const Mat3 term = rot * power;
    // column-major storage gives the column-stacking vectorization directly
    out.segment<9>(13 + 9 * k) = Eigen::Map<const Eigen::Matrix<double, 9, 1>>(term.data());
  }
  return out;
}

/// Selection matrix C_x with C_x * lift(x) = x.
inline MatX state_selection(int order) {
  MatX c = MatX::Zero(kStateDim, lift_dim(order));
  c.block(0, 1, kStateDim, kStateDim).setIdentity();
  return c;
}

struct KoopmanModel {
  MatX A;
  MatX B;
  MatX C_x;
  int dict_order = kDefaultDictOrder;
  double dt = 0.001;
  double training_residual = 0.0;  // squared Frobenius residual on the training set
  std::size_t training_samples = 0;

  int lift_size() const { return static_cast<int>(A.rows()); }
  int control_size() const { return static_cast<int>(B.cols()); }

  void validate() const {
    const auto n = A.rows();
    require_dims(A.cols() == n, "A must be square");
    require_dims(B.rows() == n, "B rows must match A");
    require_dims(C_x.cols() == n && C_x.rows() == kStateDim, "C_x must be 12 x N");
    require_dims(n == lift_dim(dict_order), "lift size must equal 13 + 9p");
  }
};

inline LiftedState predict(const KoopmanModel& model, const LiftedState& lifted, const VecX& u) {
  require_dims(lifted.size() == model.A.cols(), "lifted state size");
  require_dims(u.size() == model.B.cols(), "control size");
  return model.A * lifted + model.B * u;
}

inline Vec12 extract_state(const KoopmanModel& model, const LiftedState& lifted) {
  require_dims(lifted.size() == model.C_x.cols(), "lifted state size");
  return model.C_x * lifted;
}

// ---------------------------------------------------------------------------
// Training data

struct SnapshotDataset {
  MatX X;  // 12 x M states
  MatX Y;  // 12 x M successors
  MatX U;  // m x M controls
  double dt = 0.001;

  Eigen::Index size() const { return X.cols(); }

  void validate() const {
    require_dims(X.rows() == kStateDim && Y.rows() == kStateDim, "snapshot rows must be 12");
    require_dims(X.cols() == Y.cols() && X.cols() == U.cols(), "snapshot column counts must agree");
  }
};

/// Uniform sampling envelope for training/test rollouts.
struct SamplingRanges {
  Vec3 nominal_position{0.0, 0.0, kNominalHeight};
  double position = 0.5;          // +- m around nominal
  double orientation = 0.05;      // +- rad, all three angles
  double velocity = 0.5;          // +- m/s
  double angular_velocity = 0.2;  // +- rad/s
  double vertical_force = 0.05;   // +- fraction of m|g| around the m|g|/4 hover share
  double tangential_force = 0.02; // +- fraction of m|g|
  PerLeg<Vec3> lever_arms = nominal_foot_offsets();
};

using StateSampler = std::function<RigidBodyState(std::mt19937_64&)>;
using ControlSampler = std::function<ControlInput(std::mt19937_64&)>;

inline StateSampler uniform_state_sampler(const SamplingRanges& r) {
  return [r](std::mt19937_64& rng) {
    auto sym = [&rng](double half) { return std::uniform_real_distribution<double>(-half, half)(rng); };
    RigidBodyState x;
    for (int i = 0; i < 3; ++i) x.p(i) = r.nominal_position(i) + sym(r.position);
    for (int i = 0; i < 3; ++i) x.theta(i) = sym(r.orientation);
    for (int i = 0; i < 3; ++i) x.v(i) = sym(r.velocity);
    for (int i = 0; i < 3; ++i) x.omega(i) = sym(r.angular_velocity);
    return x;
  };
}

inline ControlSampler uniform_control_sampler(const SamplingRanges& r, const ModelParams& params) {
  const double weight = params.mass * params.gravity.norm();
  return [r, weight](std::mt19937_64& rng) {
    auto sym = [&rng](double half) { return std::uniform_real_distribution<double>(-half, half)(rng); };
    ControlInput u;
    u.foot_offsets = r.lever_arms;
    for (int leg = 0; leg < kNumLegs; ++leg) {
      u.forces[leg].x() = sym(r.tangential_force) * weight;
      u.forces[leg].y() = sym(r.tangential_force) * weight;
      u.forces[leg].z() = weight / kNumLegs + sym(r.vertical_force) * weight;
    }
    return u;
  };
}

struct RolloutSample {
  std::vector<RigidBodyState> states;  // steps + 1
  std::vector<ControlInput> controls;  // steps
};

namespace detail {

inline int step_count(double horizon, double dt) {
  if (!(dt > 0.0) || !(horizon > 0.0)) throw Error("horizon and dt must be positive");
  const double ratio = horizon / dt;
  const long steps = std::lround(ratio);
  if (steps < 1 || std::abs(ratio - static_cast<double>(steps)) > 1e-9 * std::max(1.0, ratio))
    throw Error("horizon / dt must be a positive integer");
  return static_cast<int>(steps);
}

inline std::mt19937_64 rollout_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline RolloutSample sample_rollout(int steps, double dt, const StateSampler& states,
                                    const ControlSampler& controls, const ModelParams& params,
                                    std::mt19937_64& rng) {
  RolloutSample s;
  const RigidBodyState x0 = states(rng);
  x0.validate();
  s.controls.reserve(steps);
  for (int k = 0; k < steps; ++k) s.controls.push_back(controls(rng));
  s.states = rollout(x0, s.controls, dt, params);
  return s;
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

}  // namespace detail

/// Random rollouts from sampled initial states with a control resampled every
/// dt. Rollout i draws from its own RNG stream, so the result does not depend
/// on the thread count.
inline SnapshotDataset generate_dataset(std::size_t num_rollouts, double horizon, double dt,
                                        const StateSampler& state_sampler,
                                        const ControlSampler& control_sampler, const ModelParams& params,
                                        std::uint64_t seed, unsigned threads = detail::default_threads()) {
  if (num_rollouts == 0) throw Error("need at least one rollout");
  const int steps = detail::step_count(horizon, dt);
  std::vector<RolloutSample> samples(num_rollouts);
  detail::parallel_for(num_rollouts, threads, [&](std::size_t i) {
    auto rng = detail::rollout_rng(seed, i);
    samples[i] = detail::sample_rollout(steps, dt, state_sampler, control_sampler, params, rng);
  });

  const Eigen::Index total = static_cast<Eigen::Index>(num_rollouts) * steps;
  SnapshotDataset data;
  data.dt = dt;
  data.X.resize(kStateDim, total);
  data.Y.resize(kStateDim, total);
  data.U.resize(kControlDim, total);
  Eigen::Index col = 0;
  for (const auto& s : samples) {
    for (int k = 0; k < steps; ++k, ++col) {
      data.X.col(col) = s.states[k].to_vector();
      data.Y.col(col) = s.states[k + 1].to_vector();
      data.U.col(col) = s.controls[k].force_vector();
    }
  }
  return data;
}

inline MatX lift_columns(const MatX& states, int order) {
  MatX out(lift_dim(order), states.cols());
  for (Eigen::Index j = 0; j < states.cols(); ++j)
    out.col(j) = lift(RigidBodyState::from_vector(states.col(j)), order);
  return out;
}

/// Stacked regressor [Pi(X); U] used by the fit.
inline MatX edmd_regressors(const SnapshotDataset& data, int order) {
  MatX z(lift_dim(order) + data.U.rows(), data.size());
  z.topRows(lift_dim(order)) = lift_columns(data.X, order);
  z.bottomRows(data.U.rows()) = data.U;
  return z;
}

struct EdmdSolution {
  MatX K;                 // N x (N + m)
  double residual = 0.0;  // ||Pi(Y) - K [Pi(X); U]||_F^2
};

/// Least-squares Koopman fit K = [A, B] = G1 G2^-1 with
/// G1 = (1/M) sum Pi(y) z^T, G2 = (1/M) sum z z^T, z = [Pi(x); u],
/// for an arbitrary dictionary already applied to the snapshots.
///
/// The Gram matrix is Jacobi-scaled before factorization: the dictionary mixes
/// O(1e-4) high-order terms with O(10) forces, and the unscaled G2 loses most
/// of its digits. `regularization` is a ridge on the scaled Gram (whose
/// diagonal is all ones).
inline EdmdSolution edmd_solve(const MatX& lifted, const MatX& lifted_next, const MatX& controls,
                               double regularization = kDefaultRidge) {
  require_dims(lifted.cols() == lifted_next.cols() && lifted.cols() == controls.cols(), "snapshot counts");
  require_dims(lifted.rows() == lifted_next.rows(), "lifted snapshot rows");
  if (!(regularization >= 0.0)) throw Error("regularization must be nonnegative");
  const auto n_lift = lifted.rows();
  const auto n_reg = n_lift + controls.rows();
  const auto samples = lifted.cols();
  if (regularization == 0.0 && samples < n_reg)
    throw RankDeficiencyError("EDMD needs at least N + m = " + std::to_string(n_reg) + " snapshots, got " +
                              std::to_string(samples));
  if (samples == 0) throw RankDeficiencyError("EDMD needs at least one snapshot");

  MatX z(n_reg, samples);
  z.topRows(n_lift) = lifted;
  z.bottomRows(controls.rows()) = controls;
  const double inv_m = 1.0 / static_cast<double>(samples);
  MatX g2 = MatX::Zero(n_reg, n_reg);
  g2.selfadjointView<Eigen::Lower>().rankUpdate(z, inv_m);
  g2 = g2.selfadjointView<Eigen::Lower>();
  const MatX g1 = inv_m * lifted_next * z.transpose();

  VecX scale(n_reg);
  for (Eigen::Index j = 0; j < n_reg; ++j) scale(j) = g2(j, j) > 0.0 ? 1.0 / std::sqrt(g2(j, j)) : 1.0;
  MatX g2s = scale.asDiagonal() * g2 * scale.asDiagonal();
  const MatX g1s = g1 * scale.asDiagonal();

  if (regularization == 0.0) {
    Eigen::SelfAdjointEigenSolver<MatX> eig(g2s, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(lo > 0.0) || hi / lo > 1e12)
      throw RankDeficiencyError("EDMD Gram matrix is rank deficient (condition " + std::to_string(hi / lo) + ")");
  } else {
    g2s.diagonal().array() += regularization;
  }

  Eigen::LLT<MatX> llt(g2s);
  if (llt.info() != Eigen::Success) throw RankDeficiencyError("EDMD Gram matrix is not positive definite");
  // K_s G2s = G1s  <=>  G2s K_s^T = G1s^T
  EdmdSolution sol;
  sol.K = llt.solve(g1s.transpose()).transpose() * scale.asDiagonal();
  sol.residual = (lifted_next - sol.K * z).squaredNorm();
  return sol;
}

inline KoopmanModel edmd_fit(const SnapshotDataset& data, int order, double regularization = kDefaultRidge) {
  data.validate();
  if (order < 1) throw Error("dictionary order must be >= 1");
  const int n_lift = lift_dim(order);
  const auto sol = edmd_solve(lift_columns(data.X, order), lift_columns(data.Y, order), data.U, regularization);

  KoopmanModel model;
  model.A = sol.K.leftCols(n_lift);
  model.B = sol.K.rightCols(data.U.rows());
  model.C_x = state_selection(order);
  model.dict_order = order;
  model.dt = data.dt;
  model.training_residual = sol.residual;
  model.training_samples = static_cast<std::size_t>(data.size());
  return model;
}

// ---------------------------------------------------------------------------
// Fit evaluation

struct FitReport {
  double horizon = 0.0;
  double dt = 0.0;
  std::size_t num_tests = 0;
  double training_residual = 0.0;
  MatX mean;      // (steps + 1) x 12, signed error predicted - true
  MatX variance;  // (steps + 1) x 12, population variance over tests
  Vec12 max_abs = Vec12::Zero();

  /// Groups: 0 position, 1 orientation, 2 linear velocity, 3 angular velocity.
  double group_max_abs(int group) const { return max_abs.segment<3>(3 * group).maxCoeff(); }
  /// Largest |mean| + standard deviation over time for a group (the band plotted per group).
  double group_band(int group) const {
    return (mean.middleCols<3>(3 * group).cwiseAbs() + variance.middleCols<3>(3 * group).cwiseSqrt()).maxCoeff();
  }
  Eigen::Index length() const { return mean.rows(); }
};

inline constexpr std::array<const char*, 4> kStateGroupNames = {"position", "orientation", "linear_velocity",
                                                                "angular_velocity"};

/// Paired plant / lifted-model rollouts from shared initial states and controls.
inline FitReport evaluate_fit(const KoopmanModel& model, std::size_t num_tests, double horizon,
                              const ModelParams& params, const StateSampler& state_sampler,
                              const ControlSampler& control_sampler, std::uint64_t seed,
                              unsigned threads = detail::default_threads()) {
  model.validate();
  if (num_tests == 0) throw Error("need at least one test rollout");
  const int steps = detail::step_count(horizon, model.dt);
  std::vector<MatX> errors(num_tests);
  detail::parallel_for(num_tests, threads, [&](std::size_t i) {
    auto rng = detail::rollout_rng(seed, i);
    const auto s = detail::sample_rollout(steps, model.dt, state_sampler, control_sampler, params, rng);
    MatX e(steps + 1, kStateDim);
    LiftedState z = lift(s.states[0], model.dict_order);
    e.row(0) = (extract_state(model, z) - s.states[0].to_vector()).transpose();
    for (int k = 0; k < steps; ++k) {
      z = predict(model, z, s.controls[k].force_vector());
      e.row(k + 1) = (extract_state(model, z) - s.states[k + 1].to_vector()).transpose();
    }
    errors[i] = std::move(e);
  });

  FitReport report;
  report.horizon = horizon;
  report.dt = model.dt;
  report.num_tests = num_tests;
  report.training_residual = model.training_residual;
  report.mean = MatX::Zero(steps + 1, kStateDim);
  report.variance = MatX::Zero(steps + 1, kStateDim);
  for (const auto& e : errors) {
    report.mean += e;
    for (int c = 0; c < kStateDim; ++c) report.max_abs(c) = std::max(report.max_abs(c), e.col(c).cwiseAbs().maxCoeff());
  }
  report.mean /= static_cast<double>(num_tests);
  for (const auto& e : errors) report.variance += (e - report.mean).cwiseAbs2();
  report.variance /= static_cast<double>(num_tests);
  return report;
}

}  // namespace kmpc
