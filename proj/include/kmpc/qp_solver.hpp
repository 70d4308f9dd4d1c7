#pragma once

/**
 * @file
 * @brief Dense strictly convex QP solver.
 *
 * Solves
 * \f[
 *   \min_U \tfrac12 U^T H U + P U \quad \text{s.t.} \quad c_{lo} \le C U \le c_{hi}
 * \f]
 * with the Goldfarb-Idnani dual active-set method. The dual method starts at
 * the unconstrained minimizer and adds violated constraints one at a time, so
 * no feasible starting point is needed and the result is exact up to
 * round-off once the active set is identified.
 *
 * Internally the cost is normalized to unit mean Hessian diagonal, constraint
 * rows are normalized to unit length, and a small diagonal shift keeps the
 * factorization well defined for semidefinite H. A final refinement pass
 * removes the shift from the reported solution.
 *
 * Multipliers follow the sign convention H U + P^T + C^T lambda = 0 with
 * lambda_i > 0 on an active upper bound and lambda_i < 0 on an active lower
 * bound.
 */

#include "kmpc/common.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace kmpc {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct QpProblem {
  MatX H;
  VecX P;  // linear term, stored as a column
  MatX C;
  VecX c_lo;
  VecX c_hi;

  /// Checks dimensions and symmetrizes H.
  static QpProblem make(MatX h, VecX p, MatX c, VecX lo, VecX hi) {
    QpProblem q{std::move(h), std::move(p), std::move(c), std::move(lo), std::move(hi)};
    q.validate();
    q.H = 0.5 * (q.H + q.H.transpose()).eval();
    return q;
  }

  Eigen::Index num_vars() const { return H.rows(); }
  Eigen::Index num_constraints() const { return C.rows(); }

  void validate() const {
    const auto d = H.rows();
    require_dims(H.cols() == d, "H must be square");
    require_dims(P.size() == d, "P length must match H");
    require_dims(C.rows() == 0 || C.cols() == d, "C columns must match H");
    require_dims(c_lo.size() == C.rows() && c_hi.size() == C.rows(), "bounds must match C rows");
    if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, H.cwiseAbs().maxCoeff()))
      throw Error("QP Hessian is not symmetric");
    if (!H.allFinite() || !P.allFinite() || !C.allFinite()) throw Error("QP data has non-finite entries");
    if (c_lo.hasNaN() || c_hi.hasNaN()) throw Error("QP bounds contain NaN");
  }

  double objective(const VecX& u) const { return 0.5 * u.dot(H * u) + P.dot(u); }
};

enum class QpStatus { Optimal, MaxIterations, Infeasible };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::MaxIterations: return "max-iterations";
    case QpStatus::Infeasible: return "infeasible";
  }
  return "unknown";
}

enum class BoundSide { Lower, Upper, Equality };

struct ActiveConstraint {
  int row = 0;
  BoundSide side = BoundSide::Lower;
  bool operator==(const ActiveConstraint&) const = default;
};

struct QpIterate {
  double objective = 0.0;
  double max_violation = 0.0;
  int active = 0;
};

struct QpSettings {
  double tol = 1e-6;
  int max_iter = 4000;
  /// shift = shift_factor * (1 + trace(H)/d), applied to the normalized Hessian
  double shift_factor = 1e-8;
  bool record_trace = false;
};

struct QpSolution {
  VecX U;
  VecX multipliers;
  QpStatus status = QpStatus::MaxIterations;
  double stationarity_residual = kInf;
  double feasibility_residual = kInf;
  double complementarity_residual = kInf;
  int iterations = 0;
  double solve_time = 0.0;
  std::vector<ActiveConstraint> active_set;
  std::vector<QpIterate> trace;

  bool optimal() const { return status == QpStatus::Optimal; }
};

inline MatX regularize(const MatX& h, double shift) {
  return h + shift * MatX::Identity(h.rows(), h.cols());
}

/// Residuals measured on the original (unscaled) problem.
struct KktResiduals {
  double stationarity = 0.0;
  double feasibility = 0.0;
  double complementarity = 0.0;
};

inline KktResiduals kkt_residuals(const QpProblem& prob, const VecX& u, const VecX& lambda) {
  KktResiduals r;
  VecX grad = prob.H * u + prob.P;
  if (prob.C.rows() > 0) grad += prob.C.transpose() * lambda;
  r.stationarity = inf_norm(grad);
  if (prob.C.rows() == 0) return r;
  const VecX cu = prob.C * u;
  for (Eigen::Index i = 0; i < cu.size(); ++i) {
    if (std::isfinite(prob.c_lo(i))) r.feasibility = std::max(r.feasibility, prob.c_lo(i) - cu(i));
    if (std::isfinite(prob.c_hi(i))) r.feasibility = std::max(r.feasibility, cu(i) - prob.c_hi(i));
    const double l = lambda(i);
    if (l == 0.0) continue;
    const double slack = l > 0.0 ? prob.c_hi(i) - cu(i) : cu(i) - prob.c_lo(i);
    r.complementarity = std::max(r.complementarity, std::isfinite(slack) ? std::abs(l * slack) : kInf);
  }
  return r;
}

/**
 * Reusable solver: the Hessian factorization is cached across solves that
 * share H, which is the common case in receding-horizon control where only
 * the linear term and the bounds change each tick.
 */
class QpSolver {
 public:
  QpSolver() = default;
  explicit QpSolver(QpSettings settings) : settings_(settings) {}

  const QpSettings& settings() const { return settings_; }
  void set_settings(const QpSettings& s) {
    settings_ = s;
    hessian_.resize(0, 0);
  }

  QpSolution solve(const QpProblem& prob, const std::vector<ActiveConstraint>* warm_start = nullptr) {
    const auto start = std::chrono::steady_clock::now();
    prob.validate();
    if (!(settings_.tol > 0.0)) throw Error("QP tolerance must be positive");
    prepare_hessian(prob.H);
    QpSolution sol = run(prob, warm_start);
    sol.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return sol;
  }

 private:
  struct Constraint {
    VecX n;  // unit normal, n^T x >= b
    double b = 0.0;
    int row = 0;
    double sign = 1.0;      // +1 lower/equality side, -1 upper side
    double row_norm = 1.0;  // ||C_row||
    bool equality = false;
  };

  // ---- Hessian cache -------------------------------------------------------

  void prepare_hessian(const MatX& h) {
    if (hessian_.rows() == h.rows() && hessian_.cols() == h.cols() && hessian_ == h) return;
    hessian_ = h;
    const auto d = h.rows();
    const double tr = h.trace();
    cost_scale_ = (tr > 0.0 && std::isfinite(tr)) ? static_cast<double>(d) / tr : 1.0;
    g_ = cost_scale_ * h;
    g_exact_ = g_;
    g_.diagonal().array() += settings_.shift_factor * (1.0 + g_.trace() / std::max<double>(1.0, d));
    Eigen::LLT<MatX> llt(g_);
    if (llt.info() != Eigen::Success) throw Error("QP Hessian is not positive semidefinite");
    const MatX l = llt.matrixL();
    // J0 = L^{-T}
    j0_ = l.transpose().triangularView<Eigen::Upper>().solve(MatX::Identity(d, d));
    llt_ = std::move(llt);
  }

  // ---- factorization updates (orthogonal reflections on J and R) -----------

  bool add_constraint(VecX& dvec, int iq) {
    const auto n = j_.rows();
    for (Eigen::Index j = n - 1; j >= iq + 1; --j) {
      double cc = dvec(j - 1), ss = dvec(j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      dvec(j) = 0.0;
      cc /= h;
      ss /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        dvec(j - 1) = -h;
      } else {
        dvec(j - 1) = h;
      }
      for (Eigen::Index k = 0; k < n; ++k) {
        const double t1 = j_(k, j - 1), t2 = j_(k, j);
        j_(k, j - 1) = cc * t1 + ss * t2;
        j_(k, j) = ss * t1 - cc * t2;
      }
    }
    r_.col(iq).head(iq + 1) = dvec.head(iq + 1);
    const double diag = std::abs(dvec(iq));
    if (diag <= std::numeric_limits<double>::epsilon() * std::max(1.0, r_norm_)) return false;
    r_norm_ = std::max(r_norm_, diag);
    return true;
  }

  /// Removes active position l; remaining entries shift down.
  void delete_constraint(int l, int& iq, std::vector<int>& active, VecX& u) {
    const auto n = j_.rows();
    for (int i = l; i < iq - 1; ++i) {
      active[i] = active[i + 1];
      u(i) = u(i + 1);
      r_.col(i) = r_.col(i + 1);
    }
    if (u.size() > iq) u(iq - 1) = u(iq);
    r_.col(iq - 1).setZero();
    active.pop_back();
    --iq;
    for (int j = l; j < iq; ++j) {
      double cc = r_(j, j), ss = r_(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      r_(j + 1, j) = 0.0;
      if (cc < 0.0) {
        r_(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        r_(j, j) = h;
      }
      for (int k = j + 1; k < iq; ++k) {
        const double t1 = r_(j, k), t2 = r_(j + 1, k);
        r_(j, k) = cc * t1 + ss * t2;
        r_(j + 1, k) = ss * t1 - cc * t2;
      }
      for (Eigen::Index k = 0; k < n; ++k) {
        const double t1 = j_(k, j), t2 = j_(k, j + 1);
        j_(k, j) = cc * t1 + ss * t2;
        j_(k, j + 1) = ss * t1 - cc * t2;
      }
    }
  }

  VecX solve_r(const VecX& rhs, int iq) const {
    return r_.topLeftCorner(iq, iq).triangularView<Eigen::Upper>().solve(rhs.head(iq));
  }

  /// Optimum on the manifold of the current active set, from the unconstrained minimizer.
  void active_set_point(const std::vector<Constraint>& cons, const std::vector<int>& active, int iq,
                        const VecX& x_unc, VecX& x, VecX& u) const {
    VecX rhs(iq);
    for (int i = 0; i < iq; ++i) rhs(i) = cons[active[i]].b - cons[active[i]].n.dot(x_unc);
    const VecX alpha = r_.topLeftCorner(iq, iq).transpose().triangularView<Eigen::Lower>().solve(rhs);
    x = x_unc + j_.leftCols(iq) * alpha;
    u = solve_r(alpha, iq);
  }

  // ---- main algorithm ------------------------------------------------------

  QpSolution run(const QpProblem& prob, const std::vector<ActiveConstraint>* warm) {
    const auto d = prob.num_vars();
    const auto q = prob.num_constraints();
    QpSolution sol;
    sol.multipliers = VecX::Zero(q);

    std::vector<Constraint> cons;
    std::vector<int> eq_ids;
    std::vector<int> lower_id(q, -1), upper_id(q, -1);
    for (Eigen::Index i = 0; i < q; ++i) {
      const double lo = prob.c_lo(i), hi = prob.c_hi(i);
      if (std::isfinite(lo) && std::isfinite(hi) && lo > hi + settings_.tol * (1.0 + std::abs(lo))) {
        sol.status = QpStatus::Infeasible;
        sol.U = VecX::Zero(d);
        finish(prob, sol);
        return sol;
      }
      const double norm = prob.C.row(i).norm();
      if (norm == 0.0) {
        const bool ok = (!std::isfinite(lo) || lo <= settings_.tol) && (!std::isfinite(hi) || hi >= -settings_.tol);
        if (!ok) {
          sol.status = QpStatus::Infeasible;
          sol.U = VecX::Zero(d);
          finish(prob, sol);
          return sol;
        }
        continue;
      }
      const VecX unit = prob.C.row(i).transpose() / norm;
      const bool is_eq = std::isfinite(lo) && std::isfinite(hi) && std::abs(hi - lo) <= 1e-12 * (1.0 + std::abs(lo));
      if (is_eq) {
        eq_ids.push_back(static_cast<int>(cons.size()));
        lower_id[i] = static_cast<int>(cons.size());
        cons.push_back({unit, 0.5 * (lo + hi) / norm, static_cast<int>(i), 1.0, norm, true});
        continue;
      }
      if (std::isfinite(lo)) {
        lower_id[i] = static_cast<int>(cons.size());
        cons.push_back({unit, lo / norm, static_cast<int>(i), 1.0, norm, false});
      }
      if (std::isfinite(hi)) {
        upper_id[i] = static_cast<int>(cons.size());
        cons.push_back({-unit, -hi / norm, static_cast<int>(i), -1.0, norm, false});
      }
    }

    const VecX a = cost_scale_ * prob.P;
    const VecX x_unc = -llt_.solve(a);
    VecX x = x_unc;
    j_ = j0_;
    r_ = MatX::Zero(d, d);
    r_norm_ = 1.0;
    int iq = 0;
    std::vector<int> active;
    VecX u(0);
    std::vector<char> in_active(cons.size(), 0);
    int iterations = 0;

    auto record = [&](const VecX& xv) {
      if (!settings_.record_trace) return;
      QpIterate it;
      it.objective = prob.objective(xv);
      for (const auto& c : cons) it.max_violation = std::max(it.max_violation, c.row_norm * (c.b - c.n.dot(xv)));
      it.active = iq;
      sol.trace.push_back(it);
    };

    auto try_add_passive = [&](int id) {
      if (in_active[id] || iq >= d) return;
      VecX dv = j_.transpose() * cons[id].n;
      if (!add_constraint(dv, iq)) {
        r_.col(iq).setZero();
        return;
      }
      active.push_back(id);
      in_active[id] = 1;
      ++iq;
    };

    // Equalities and warm-start constraints enter without dual steps; the
    // point and multipliers are then recomputed for the whole set.
    for (int id : eq_ids) try_add_passive(id);
    const int n_eq = iq;
    if (n_eq < static_cast<int>(eq_ids.size())) {
      // Dependent equalities are fine if consistent; checked via feasibility at the end.
    }
    if (warm != nullptr) {
      for (const auto& w : *warm) {
        if (w.row < 0 || w.row >= q || w.side == BoundSide::Equality) continue;
        const int id = w.side == BoundSide::Lower ? lower_id[w.row] : upper_id[w.row];
        if (id >= 0 && !cons[id].equality) try_add_passive(id);
      }
    }
    if (iq > 0) {
      active_set_point(cons, active, iq, x_unc, x, u);
      // Dropping negative inequality multipliers restores dual feasibility.
      while (true) {
        int worst = -1;
        double most_negative = 0.0;
        for (int i = n_eq; i < iq; ++i)
          if (u(i) < most_negative) {
            most_negative = u(i);
            worst = i;
          }
        if (worst < 0) break;
        ++iterations;
        in_active[active[worst]] = 0;
        delete_constraint(worst, iq, active, u);
        u.conservativeResize(iq);
        if (iq > 0) {
          active_set_point(cons, active, iq, x_unc, x, u);
        } else {
          x = x_unc;
          u.resize(0);
        }
      }
    }
    record(x);

    const double eps_z = std::numeric_limits<double>::epsilon();
    bool done = false;
    while (!done) {
      if (iterations >= settings_.max_iter) {
        sol.status = QpStatus::MaxIterations;
        break;
      }
      // most violated inactive constraint
      int p = -1;
      double worst = 0.0;
      for (std::size_t k = 0; k < cons.size(); ++k) {
        if (in_active[k]) continue;
        const double s = cons[k].n.dot(x) - cons[k].b;
        const double thresh = 1e-11 * (1.0 + std::abs(cons[k].b));
        if (s < -thresh && s < worst) {
          worst = s;
          p = static_cast<int>(k);
        }
      }
      if (p < 0) {
        sol.status = QpStatus::Optimal;
        break;
      }
      ++iterations;

      VecX u_plus(iq + 1);
      u_plus.head(iq) = u;
      u_plus(iq) = 0.0;
      double s_p = cons[p].n.dot(x) - cons[p].b;
      bool added = false;
      while (!added) {
        VecX dv = j_.transpose() * cons[p].n;
        const VecX z = j_.rightCols(d - iq) * dv.tail(d - iq);
        const VecX r = iq > 0 ? solve_r(dv, iq) : VecX(0);

        double t1 = kInf;
        int l = -1;
        for (int k = n_eq; k < iq; ++k) {
          if (r(k) > 0.0) {
            const double ratio = u_plus(k) / r(k);
            if (ratio < t1) {
              t1 = ratio;
              l = k;
            }
          }
        }
        const double zn = z.dot(cons[p].n);
        const double t2 = (z.squaredNorm() > eps_z && zn > 0.0) ? -s_p / zn : kInf;
        const double t = std::min(t1, t2);
        if (!std::isfinite(t)) {
          sol.status = QpStatus::Infeasible;
          done = true;
          break;
        }
        if (!std::isfinite(t2)) {
          // dual step only
          u_plus.head(iq) -= t * r;
          u_plus(iq) += t;
          in_active[active[l]] = 0;
          delete_constraint(l, iq, active, u_plus);
          u_plus.conservativeResize(iq + 1);
          ++iterations;
          if (iterations >= settings_.max_iter) break;
          continue;
        }
        x += t * z;
        u_plus.head(iq) -= t * r;
        u_plus(iq) += t;
        if (t == t2) {
          if (!add_constraint(dv, iq)) {
            // numerically dependent: treat the (now satisfied) constraint as inactive
            r_.col(iq).setZero();
            u = u_plus.head(iq);
            added = true;
            break;
          }
          active.push_back(p);
          in_active[p] = 1;
          ++iq;
          u = u_plus;
          added = true;
        } else {
          in_active[active[l]] = 0;
          delete_constraint(l, iq, active, u_plus);
          u_plus.conservativeResize(iq + 1);
          s_p = cons[p].n.dot(x) - cons[p].b;
          ++iterations;
          if (iterations >= settings_.max_iter) break;
        }
      }
      record(x);
      if (!added && !done && iterations >= settings_.max_iter) {
        sol.status = QpStatus::MaxIterations;
        break;
      }
    }

    if (sol.status == QpStatus::Optimal) refine(cons, active, iq, a, x, u, n_eq);
    sol.iterations = iterations;
    sol.U = x;
    for (int i = 0; i < iq; ++i) {
      const auto& c = cons[active[i]];
      sol.multipliers(c.row) += -u(i) * c.sign / (c.row_norm * cost_scale_);
      sol.active_set.push_back(
          {c.row, c.equality ? BoundSide::Equality : (c.sign > 0 ? BoundSide::Lower : BoundSide::Upper)});
    }
    finish(prob, sol);
    return sol;
  }

  /// Iterative refinement against the unshifted Hessian on the final active set.
  void refine(const std::vector<Constraint>& cons, const std::vector<int>& active, int iq, const VecX& a, VecX& x,
              VecX& u, int n_eq) const {
    MatX n(x.size(), iq);
    VecX b(iq);
    for (int i = 0; i < iq; ++i) {
      n.col(i) = cons[active[i]].n;
      b(i) = cons[active[i]].b;
    }
    auto residual = [&](const VecX& xv, const VecX& uv, VecX& rx, VecX& rc) {
      rx = g_exact_ * xv + a - n * uv;
      rc = b - n.transpose() * xv;
      return std::max(inf_norm(rx), inf_norm(rc));
    };
    VecX rx, rc;
    double best = residual(x, u, rx, rc);
    for (int it = 0; it < 3; ++it) {
      const VecX alpha = r_.topLeftCorner(iq, iq).transpose().triangularView<Eigen::Lower>().solve(rc);
      const VecX beta = -j_.rightCols(x.size() - iq).transpose() * rx;
      const VecX dx = j_.leftCols(iq) * alpha + j_.rightCols(x.size() - iq) * beta;
      const VecX du = solve_r(alpha + j_.leftCols(iq).transpose() * rx, iq);
      const VecX x_new = x + dx;
      const VecX u_new = u + du;
      if (iq > n_eq && (u_new.tail(iq - n_eq).array() < 0.0).any()) break;
      bool feasible = true;
      for (std::size_t k = 0; k < cons.size() && feasible; ++k)
        feasible = cons[k].n.dot(x_new) - cons[k].b >= -1e-9 * (1.0 + std::abs(cons[k].b));
      if (!feasible) break;
      VecX rx_new, rc_new;
      const double res = residual(x_new, u_new, rx_new, rc_new);
      if (!(res < best)) break;
      x = x_new;
      u = u_new;
      rx = rx_new;
      rc = rc_new;
      best = res;
    }
  }

  void finish(const QpProblem& prob, QpSolution& sol) const {
    const auto r = kkt_residuals(prob, sol.U, sol.multipliers);
    sol.stationarity_residual = r.stationarity;
    sol.feasibility_residual = r.feasibility;
    sol.complementarity_residual = r.complementarity;
    if (sol.status == QpStatus::Optimal) {
      const double p_norm = inf_norm(prob.P);
      const bool certified = r.stationarity <= settings_.tol * (1.0 + p_norm) && r.feasibility <= settings_.tol &&
                             r.complementarity <= settings_.tol;
      if (!certified) sol.status = r.feasibility > settings_.tol ? QpStatus::Infeasible : QpStatus::MaxIterations;
    }
  }

  QpSettings settings_;
  MatX hessian_;
  double cost_scale_ = 1.0;
  MatX g_;
  MatX g_exact_;
  Eigen::LLT<MatX> llt_;
  MatX j0_;
  MatX j_;
  MatX r_;
  double r_norm_ = 1.0;
};

inline QpSolution solve_qp(const QpProblem& prob, const QpSettings& settings = {},
                           const std::vector<ActiveConstraint>* warm_start = nullptr) {
  QpSolver solver(settings);
  return solver.solve(prob, warm_start);
}

inline QpSolution solve_qp(const QpProblem& prob, double tol, int max_iter) {
  QpSettings s;
  s.tol = tol;
  s.max_iter = max_iter;
  return solve_qp(prob, s);
}

}  // namespace kmpc
