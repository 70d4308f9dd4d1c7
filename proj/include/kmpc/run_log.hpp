#pragma once

// Run metrics, threshold checks and log files (run.csv + metrics.json).

#include "kmpc/harness.hpp"
#include "kmpc/serialization.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace kmpc {

struct RmseResult {
  std::vector<double> per_axis;
  double pooled = 0.0;
  std::size_t count = 0;
};

/// Rows are samples, columns are axes. Pooled RMSE averages the squared error
/// over all axes and samples.
inline RmseResult compute_rmse(const MatX& series, const MatX& reference) {
  if (series.rows() != reference.rows() || series.cols() != reference.cols())
    throw DimensionError("RMSE series and reference differ in shape (" + std::to_string(series.rows()) + "x" +
                         std::to_string(series.cols()) + " vs " + std::to_string(reference.rows()) + "x" +
                         std::to_string(reference.cols()) + ")");
  RmseResult r;
  r.count = static_cast<std::size_t>(series.rows());
  r.per_axis.assign(static_cast<std::size_t>(series.cols()), 0.0);
  if (series.rows() == 0) return r;
  const MatX sq = (series - reference).cwiseAbs2();
  for (Eigen::Index c = 0; c < sq.cols(); ++c) r.per_axis[c] = std::sqrt(sq.col(c).mean());
  r.pooled = std::sqrt(sq.mean());
  return r;
}

struct RunMetrics {
  std::size_t samples = 0;
  bool aborted = false;
  std::string abort_reason;
  RmseResult velocity;          // world linear velocity vs reference
  RmseResult angular_velocity;  // world angular velocity vs reference
  RmseResult yaw_rate;          // world z angular rate vs commanded
  RmseResult estimator;         // estimated vs true linear velocity
  double min_height = 0.0;
  double mean_speed = 0.0;
  double max_abs_torque = 0.0;
  std::size_t degraded_ticks = 0;
  std::size_t saturated_ticks = 0;
  double median_solve_time = 0.0;
  double max_solve_time = 0.0;

  bool has_disturbance = false;
  double disturbance_start = 0.0;
  double disturbance_end = 0.0;
  double peak_velocity_deviation = 0.0;  // forward (heading frame), m/s
  double peak_pitch_deviation_deg = 0.0;
  double peak_roll_deviation_deg = 0.0;
  double recovery_time = std::numeric_limits<double>::quiet_NaN();  // NaN: not recovered
};

struct Check {
  std::string name;
  double value = 0.0;
  std::string relation;  // "<=", ">=", "<", "|x-t|<="
  double limit = 0.0;
  bool pass = false;
};

namespace detail {

inline double wrap_angle(double a) { return std::remainder(a, 2.0 * M_PI); }

inline Vec3 world_rate(const Vec12& x) { return rotation_from_euler(x.segment<3>(3)) * x.segment<3>(9); }

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

inline bool in_band(const LogRow& r, double vel_band, double angle_band) {
  if (((r.state.segment<3>(6) - r.reference.segment<3>(6)).array().abs() > vel_band).any()) return false;
  if (std::abs(wrap_angle(r.state(3))) > angle_band || std::abs(wrap_angle(r.state(4))) > angle_band) return false;
  return std::abs(wrap_angle(r.state(5) - r.reference(5))) <= angle_band;
}

}  // namespace detail

inline RunMetrics compute_metrics(const std::vector<LogRow>& rows, const ExperimentConfig& cfg, bool aborted = false,
                                  const std::string& abort_reason = {}) {
  RunMetrics m;
  m.samples = rows.size();
  m.aborted = aborted;
  m.abort_reason = abort_reason;
  const auto n = static_cast<Eigen::Index>(rows.size());
  MatX v(n, 3), v_ref(n, 3), w(n, 3), w_ref(n, 3), yaw(n, 1), yaw_ref(n, 1), v_est(n, 3);
  std::vector<double> solve_times;
  solve_times.reserve(rows.size());
  m.min_height = rows.empty() ? 0.0 : std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    const LogRow& r = rows[static_cast<std::size_t>(i)];
    v.row(i) = r.state.segment<3>(6).transpose();
    v_ref.row(i) = r.reference.segment<3>(6).transpose();
    w.row(i) = detail::world_rate(r.state).transpose();
    w_ref.row(i) = r.reference.segment<3>(9).transpose();
    yaw(i, 0) = w(i, 2);
    yaw_ref(i, 0) = w_ref(i, 2);
    v_est.row(i) = r.v_est.transpose();
    m.min_height = std::min(m.min_height, r.state(2));
    m.mean_speed += r.state.segment<3>(6).norm();
    m.max_abs_torque = std::max(m.max_abs_torque, r.torques.cwiseAbs().maxCoeff());
    m.degraded_ticks += r.degraded ? 1 : 0;
    m.saturated_ticks += r.torque_saturated ? 1 : 0;
    solve_times.push_back(r.qp_solve_time);
    m.max_solve_time = std::max(m.max_solve_time, r.qp_solve_time);
  }
  if (n > 0) m.mean_speed /= static_cast<double>(n);
  m.velocity = compute_rmse(v, v_ref);
  m.angular_velocity = compute_rmse(w, w_ref);
  m.yaw_rate = compute_rmse(yaw, yaw_ref);
  m.estimator = compute_rmse(v_est, v);
  m.median_solve_time = detail::median(solve_times);

  if (!cfg.disturbances.empty()) {
    m.has_disturbance = true;
    m.disturbance_start = cfg.disturbances.front().start;
    m.disturbance_end = cfg.disturbances.front().end();
    for (const auto& d : cfg.disturbances) {
      m.disturbance_start = std::min(m.disturbance_start, d.start);
      m.disturbance_end = std::max(m.disturbance_end, d.end());
    }
    const double vel_band = cfg.thresholds.velocity_band;
    const double angle_band = cfg.thresholds.angle_band_deg * M_PI / 180.0;
    double last_out = -1.0;  // time of the last out-of-band tick after the disturbance
    bool any_after = false;
    for (const auto& r : rows) {
      if (r.t + 1e-12 < m.disturbance_start) continue;
      const Vec3 dv = r.state.segment<3>(6) - r.reference.segment<3>(6);
      const double heading = r.reference(5);
      const double fwd = std::cos(heading) * dv.x() + std::sin(heading) * dv.y();
      m.peak_velocity_deviation = std::max(m.peak_velocity_deviation, std::abs(fwd));
      m.peak_pitch_deviation_deg = std::max(m.peak_pitch_deviation_deg, std::abs(r.state(4)) * 180.0 / M_PI);
      m.peak_roll_deviation_deg = std::max(m.peak_roll_deviation_deg, std::abs(r.state(3)) * 180.0 / M_PI);
      if (r.t + 1e-12 < m.disturbance_end) continue;
      any_after = true;
      if (!detail::in_band(r, vel_band, angle_band)) last_out = r.t;
    }
    if (any_after && !aborted && !rows.empty() && last_out < rows.back().t) {
      const double t_in = last_out < 0.0 ? rows.front().t : last_out + cfg.control_period;
      m.recovery_time = std::max(0.0, t_in - m.disturbance_end);
    }
  }
  return m;
}

inline std::vector<Check> evaluate_checks(const ExperimentConfig& cfg, const RunMetrics& m) {
  std::vector<Check> out;
  const auto& t = cfg.thresholds;
  auto le = [&](const char* name, double v, double lim) { out.push_back({name, v, "<=", lim, v <= lim}); };
  auto ge = [&](const char* name, double v, double lim) { out.push_back({name, v, ">=", lim, v >= lim}); };

  out.push_back({"completed", m.aborted ? 0.0 : 1.0, ">=", 1.0, !m.aborted && m.samples > 0});
  ge("min_height", m.min_height, t.min_height_fraction * cfg.nominal_height);
  le("max_abs_torque", m.max_abs_torque, cfg.legs.torque_limit);
  if (cfg.scenario == "track-velocity") le("velocity_rmse_pooled", m.velocity.pooled, t.velocity_rmse);
  if (cfg.scenario == "track-turn") le("yaw_rate_rmse", m.yaw_rate.pooled, t.yaw_rate_rmse);
  if (t.max_mean_speed >= 0.0)
    out.push_back({"mean_speed", m.mean_speed, "<", t.max_mean_speed, m.mean_speed < t.max_mean_speed});
  if (cfg.scenario == "push-recovery" || cfg.scenario == "slip-recovery") {
    const double rec = std::isnan(m.recovery_time) ? std::numeric_limits<double>::infinity() : m.recovery_time;
    le("recovery_time", rec, t.recovery_time);
    if (t.push_velocity_deviation >= 0.0) {
      const double err = std::abs(m.peak_velocity_deviation - t.push_velocity_deviation);
      out.push_back({"peak_velocity_deviation", m.peak_velocity_deviation, "|x-t|<=", t.push_velocity_deviation,
                     err <= t.push_velocity_tolerance});
    }
    if (t.min_pitch_deviation_deg >= 0.0)
      ge("peak_pitch_deviation_deg", m.peak_pitch_deviation_deg, t.min_pitch_deviation_deg);
  }
  return out;
}

inline bool all_pass(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

// ---------------------------------------------------------------------------
// CSV

inline std::vector<std::string> run_log_columns() {
  static const char* axes[] = {"x", "y", "z"};
  std::vector<std::string> c{"t"};
  for (const char* a : {"px", "py", "pz", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz"}) c.push_back(a);
  for (const char* a : axes) c.push_back(std::string("vhat_") + a);
  for (const char* a : {"px", "py", "pz", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz"})
    c.push_back(std::string("ref_") + a);
  for (const char* leg : kLegNames)
    for (const char* a : axes) c.push_back(std::string("f_") + leg + "_" + a);
  for (const char* leg : kLegNames)
    for (int q = 0; q < 3; ++q) c.push_back(std::string("tau_") + leg + "_q" + std::to_string(q));
  for (const char* leg : kLegNames) c.push_back(std::string("stance_") + leg);
  for (const char* a : {"qp_status", "qp_iterations", "qp_stationarity", "qp_feasibility", "qp_solve_time",
                        "degraded", "torque_saturated"})
    c.push_back(a);
  return c;
}

inline std::vector<double> flatten_row(const LogRow& r) {
  std::vector<double> v{r.t};
  v.reserve(63);
  for (int i = 0; i < 12; ++i) v.push_back(r.state(i));
  for (int i = 0; i < 3; ++i) v.push_back(r.v_est(i));
  for (int i = 0; i < 12; ++i) v.push_back(r.reference(i));
  for (int i = 0; i < 12; ++i) v.push_back(r.forces(i));
  for (int i = 0; i < 12; ++i) v.push_back(r.torques(i));
  for (int i = 0; i < kNumLegs; ++i) v.push_back(r.stance[i] ? 1.0 : 0.0);
  v.push_back(r.qp_status);
  v.push_back(r.qp_iterations);
  v.push_back(r.qp_stationarity);
  v.push_back(r.qp_feasibility);
  v.push_back(r.qp_solve_time);
  v.push_back(r.degraded ? 1.0 : 0.0);
  v.push_back(r.torque_saturated ? 1.0 : 0.0);
  return v;
}

inline LogRow unflatten_row(const std::vector<double>& v) {
  require_dims(v.size() == run_log_columns().size(), "CSV row width");
  LogRow r;
  std::size_t k = 0;
  r.t = v[k++];
  for (int i = 0; i < 12; ++i) r.state(i) = v[k++];
  for (int i = 0; i < 3; ++i) r.v_est(i) = v[k++];
  for (int i = 0; i < 12; ++i) r.reference(i) = v[k++];
  for (int i = 0; i < 12; ++i) r.forces(i) = v[k++];
  for (int i = 0; i < 12; ++i) r.torques(i) = v[k++];
  for (int i = 0; i < kNumLegs; ++i) r.stance[i] = v[k++] != 0.0;
  r.qp_status = static_cast<int>(v[k++]);
  r.qp_iterations = static_cast<int>(v[k++]);
  r.qp_stationarity = v[k++];
  r.qp_feasibility = v[k++];
  r.qp_solve_time = v[k++];
  r.degraded = v[k++] != 0.0;
  r.torque_saturated = v[k++] != 0.0;
  return r;
}

inline void write_run_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  const auto cols = run_log_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  char buf[32];
  for (const auto& r : rows) {
    const auto v = flatten_row(r);
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", v[i]);
      out << (i ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw Error("write failed for " + path.string());
}

inline std::vector<LogRow> read_run_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(path.string() + " is empty");
  const auto cols = run_log_columns();
  std::string expected;
  for (std::size_t i = 0; i < cols.size(); ++i) expected += (i ? "," : "") + cols[i];
  if (line != expected) throw Error(path.string() + ": unexpected CSV header");
  std::vector<LogRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double x = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0')
        throw Error(path.string() + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
      v.push_back(x);
    }
    if (v.size() != cols.size())
      throw Error(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(cols.size()) +
                  " columns, got " + std::to_string(v.size()));
    rows.push_back(unflatten_row(v));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// metrics.json

namespace detail {

inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json rmse_json(const RmseResult& r, std::initializer_list<const char*> axes) {
  Json j = {{"pooled", r.pooled}, {"count", r.count}};
  std::size_t i = 0;
  for (const char* a : axes) j[a] = i < r.per_axis.size() ? r.per_axis[i++] : 0.0;
  return j;
}

inline RmseResult rmse_from_json(const Json& j, std::initializer_list<const char*> axes) {
  RmseResult r;
  r.pooled = j.at("pooled").get<double>();
  r.count = j.at("count").get<std::size_t>();
  for (const char* a : axes) r.per_axis.push_back(j.at(a).get<double>());
  return r;
}

inline double double_or_nan(const Json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

inline constexpr const char* kMetricsFormat = "kmpc.run_metrics";

inline Json metrics_to_json(const RunMetrics& m, const std::vector<Check>& checks, const std::string& scenario,
                            std::uint64_t seed) {
  Json jc = Json::array();
  for (const auto& c : checks)
    jc.push_back({{"name", c.name},
                  {"value", detail::number_or_null(c.value)},
                  {"relation", c.relation},
                  {"limit", c.limit},
                  {"pass", c.pass}});
  return {{"format", kMetricsFormat},
          {"version", kFormatVersion},
          {"scenario", scenario},
          {"seed", seed},
          {"count", m.samples},
          {"aborted", m.aborted},
          {"abort_reason", m.abort_reason},
          {"velocity_rmse", detail::rmse_json(m.velocity, {"x", "y", "z"})},
          {"angular_velocity_rmse", detail::rmse_json(m.angular_velocity, {"x", "y", "z"})},
          {"yaw_rate_rmse", detail::rmse_json(m.yaw_rate, {"z"})},
          {"estimator_velocity_rmse", detail::rmse_json(m.estimator, {"x", "y", "z"})},
          {"min_height", m.min_height},
          {"mean_speed", m.mean_speed},
          {"max_abs_torque", m.max_abs_torque},
          {"degraded_ticks", m.degraded_ticks},
          {"saturated_ticks", m.saturated_ticks},
          {"median_solve_time", m.median_solve_time},
          {"max_solve_time", m.max_solve_time},
          {"disturbance",
           {{"present", m.has_disturbance},
            {"start", m.disturbance_start},
            {"end", m.disturbance_end},
            {"peak_velocity_deviation", m.peak_velocity_deviation},
            {"peak_pitch_deviation_deg", m.peak_pitch_deviation_deg},
            {"peak_roll_deviation_deg", m.peak_roll_deviation_deg},
            {"recovery_time", detail::number_or_null(m.recovery_time)}}},
          {"checks", jc},
          {"pass", all_pass(checks)}};
}

inline RunMetrics metrics_from_json(const Json& j) {
  detail::check_format(j, kMetricsFormat);
  RunMetrics m;
  m.samples = j.at("count").get<std::size_t>();
  m.aborted = j.at("aborted").get<bool>();
  m.abort_reason = j.at("abort_reason").get<std::string>();
  m.velocity = detail::rmse_from_json(j.at("velocity_rmse"), {"x", "y", "z"});
  m.angular_velocity = detail::rmse_from_json(j.at("angular_velocity_rmse"), {"x", "y", "z"});
  m.yaw_rate = detail::rmse_from_json(j.at("yaw_rate_rmse"), {"z"});
  m.estimator = detail::rmse_from_json(j.at("estimator_velocity_rmse"), {"x", "y", "z"});
  m.min_height = j.at("min_height").get<double>();
  m.mean_speed = j.at("mean_speed").get<double>();
  m.max_abs_torque = j.at("max_abs_torque").get<double>();
  m.degraded_ticks = j.at("degraded_ticks").get<std::size_t>();
  m.saturated_ticks = j.at("saturated_ticks").get<std::size_t>();
  m.median_solve_time = j.at("median_solve_time").get<double>();
  m.max_solve_time = j.at("max_solve_time").get<double>();
  const Json& d = j.at("disturbance");
  m.has_disturbance = d.at("present").get<bool>();
  m.disturbance_start = d.at("start").get<double>();
  m.disturbance_end = d.at("end").get<double>();
  m.peak_velocity_deviation = d.at("peak_velocity_deviation").get<double>();
  m.peak_pitch_deviation_deg = d.at("peak_pitch_deviation_deg").get<double>();
  m.peak_roll_deviation_deg = d.at("peak_roll_deviation_deg").get<double>();
  m.recovery_time = detail::double_or_nan(d.at("recovery_time"));
  return m;
}

struct LogPaths {
  std::filesystem::path csv;
  std::filesystem::path metrics;
};

inline LogPaths log_paths(const std::filesystem::path& dir) { return {dir / "run.csv", dir / "metrics.json"}; }

/// Writes run.csv and metrics.json into `dir`; returns the metrics written.
inline RunMetrics emit_logs(const RunLog& log, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const auto paths = log_paths(dir);
  const RunMetrics m = compute_metrics(log.rows, cfg, log.aborted, log.abort_reason);
  write_run_csv(paths.csv, log.rows);
  write_json_file(paths.metrics, metrics_to_json(m, evaluate_checks(cfg, m), cfg.scenario, cfg.seed), 2);
  return m;
}

}  // namespace kmpc
