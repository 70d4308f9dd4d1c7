// Batch CLI: sysid, fit-eval, simulate, metrics.
// Exit codes: 0 all thresholds pass, 1 a threshold failed, 2 usage/config/IO error.

#include "kmpc/config.hpp"
#include "kmpc/harness.hpp"
#include "kmpc/run_log.hpp"
#include "kmpc/serialization.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace kmpc;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string model;
  bool save_dataset = false;
  bool dump_qp = false;
  bool quiet = false;
};

/// Loads the config JSON and folds the command-line overrides into it, so the
/// copy written next to the logs reproduces the run.
Json resolved_config(const Options& o, const char* default_scenario) {
  Json j = o.config.empty() ? Json::object() : read_json_file(o.config);
  if (!j.is_object()) throw ConfigError("config root must be an object");
  if (!j.contains("scenario")) j["scenario"] = default_scenario;
  if (o.seed) j["seed"] = *o.seed;
  if (!o.out_dir.empty()) j["out_dir"] = o.out_dir;
  if (!o.model.empty()) j["model_path"] = o.model;
  return j;
}

int report(const std::vector<Check>& checks, bool quiet) {
  if (!quiet)
    for (const auto& c : checks)
      std::printf("%s %-26s %.6g %s %.6g\n", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.value, c.relation.c_str(),
                  c.limit);
  return all_pass(checks) ? 0 : 1;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

KoopmanModel obtain_model(const ExperimentConfig& cfg, bool quiet) {
  if (!cfg.model_path.empty()) return load_model(cfg.model_path);
  const auto t0 = std::chrono::steady_clock::now();
  KoopmanModel m = identify_model(cfg);
  if (!quiet) std::printf("fitted model in-process (%.2f s, N = %d)\n", seconds_since(t0), m.lift_size());
  return m;
}

int cmd_sysid(const Options& o) {
  const Json j = resolved_config(o, "sysid");
  const ExperimentConfig cfg = config_from_json(j);
  const fs::path dir = cfg.out_dir;
  const auto t0 = std::chrono::steady_clock::now();
  SnapshotDataset data;
  const KoopmanModel model = identify_model(cfg, &data);
  const double elapsed = seconds_since(t0);
  save_model(dir / "model.json", model);
  if (o.save_dataset) save_dataset(dir / "dataset.json", data);
  write_json_file(dir / "config.json", j, 2);

  std::vector<Check> checks;
  checks.push_back({"training_residual_finite", model.training_residual, "<", kInf,
                    std::isfinite(model.training_residual)});
  checks.push_back({"runtime_s", elapsed, "<=", cfg.thresholds.fit_runtime, elapsed <= cfg.thresholds.fit_runtime});
  write_json_file(dir / "sysid.json",
                  {{"samples", data.size()},
                   {"lift_dim", model.lift_size()},
                   {"training_residual", model.training_residual},
                   {"runtime_s", elapsed}},
                  2);
  if (!o.quiet) std::printf("model written to %s\n", (dir / "model.json").c_str());
  return report(checks, o.quiet);
}

int cmd_fit_eval(const Options& o) {
  const Json j = resolved_config(o, "fit-eval");
  const ExperimentConfig cfg = config_from_json(j);
  const fs::path dir = cfg.out_dir;
  const auto t0 = std::chrono::steady_clock::now();
  const KoopmanModel model = obtain_model(cfg, o.quiet);
  const FitReport rep = evaluate_identified(cfg, model);
  const double elapsed = seconds_since(t0);
  write_json_file(dir / "config.json", j, 2);

  Json groups = Json::object();
  for (int g = 0; g < 4; ++g)
    groups[kStateGroupNames[g]] = {{"max_abs", rep.group_max_abs(g)}, {"band", rep.group_band(g)}};
  Json max_abs = Json::array();
  for (int i = 0; i < kStateDim; ++i) max_abs.push_back(rep.max_abs(i));
  write_json_file(dir / "fit_report.json",
                  {{"num_tests", rep.num_tests},
                   {"horizon", rep.horizon},
                   {"dt", rep.dt},
                   {"training_residual", rep.training_residual},
                   {"max_abs", max_abs},
                   {"groups", groups},
                   {"runtime_s", elapsed}},
                  2);
  // per-step mean and standard deviation of the prediction error
  std::ofstream csv(dir / "fit_error.csv");
  if (!csv) throw Error("cannot write " + (dir / "fit_error.csv").string());
  csv << "t";
  for (const char* kind : {"mean", "std"})
    for (int i = 0; i < kStateDim; ++i) csv << ',' << kind << '_' << i;
  csv << '\n';
  char buf[32];
  for (Eigen::Index k = 0; k < rep.length(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(k) * rep.dt);
    csv << buf;
    for (int i = 0; i < kStateDim; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", rep.mean(k, i));
      csv << ',' << buf;
    }
    for (int i = 0; i < kStateDim; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", std::sqrt(rep.variance(k, i)));
      csv << ',' << buf;
    }
    csv << '\n';
  }

  std::vector<Check> checks;
  const double worst = rep.max_abs.maxCoeff();
  checks.push_back({"max_abs_error", worst, "<=", cfg.thresholds.fit_max_error, worst <= cfg.thresholds.fit_max_error});
  checks.push_back({"runtime_s", elapsed, "<=", cfg.thresholds.fit_runtime, elapsed <= cfg.thresholds.fit_runtime});
  if (!o.quiet)
    for (int g = 0; g < 4; ++g) std::printf("  %-18s max %.3e\n", kStateGroupNames[g], rep.group_max_abs(g));
  return report(checks, o.quiet);
}

int cmd_simulate(const Options& o) {
  const Json j = resolved_config(o, "track-velocity");
  const ExperimentConfig cfg = config_from_json(j);
  if (!cfg.closed_loop()) throw ConfigError("scenario '" + cfg.scenario + "' is not a closed-loop scenario");
  const fs::path dir = cfg.out_dir;
  const KoopmanModel model = obtain_model(cfg, o.quiet);
  if (o.dump_qp) {
    RigidBodyState x0;
    x0.p = Vec3(0.0, 0.0, cfg.nominal_height);
    MpcConfig mc = cfg.mpc;
    mc.dt = model.dt;
    MpcController ctrl(model, mc);
    ReferenceGenerator ref(x0, cfg.nominal_height);
    const auto qp = ctrl.problem(x0, ref.horizon({}, mc.horizon, model.dt), hold_schedule(kPairA, mc.horizon));
    write_json_file(dir / "qp_tick0.json", qp_to_json(qp));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const RunLog log = run_experiment(cfg, model);
  const double elapsed = seconds_since(t0);
  write_json_file(dir / "config.json", j, 2);
  const RunMetrics m = emit_logs(log, cfg, dir);
  if (!o.quiet) {
    std::printf("%s: %zu ticks in %.2f s%s%s\n", cfg.scenario.c_str(), log.rows.size(), elapsed,
                log.aborted ? ", aborted: " : "", log.abort_reason.c_str());
    std::printf("  velocity RMSE pooled %.4f (x %.4f y %.4f z %.4f), yaw-rate RMSE %.4f\n", m.velocity.pooled,
                m.velocity.per_axis[0], m.velocity.per_axis[1], m.velocity.per_axis[2], m.yaw_rate.pooled);
    std::printf("  median QP solve %.3f ms, degraded ticks %zu\n", 1e3 * m.median_solve_time, m.degraded_ticks);
  }
  return report(evaluate_checks(cfg, m), o.quiet);
}

bool close(double a, double b) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  return std::abs(a - b) <= 1e-12 * (1.0 + std::abs(b));
}

int cmd_metrics(const Options& o) {
  if (o.out_dir.empty()) throw ConfigError("metrics needs --out-dir pointing at a simulate output directory");
  const fs::path dir = o.out_dir;
  const fs::path cfg_path = o.config.empty() ? dir / "config.json" : fs::path(o.config);
  Json j = read_json_file(cfg_path);
  j["out_dir"] = o.out_dir;
  j.erase("model_path");
  const ExperimentConfig cfg = config_from_json(j);
  const auto paths = log_paths(dir);
  const auto rows = read_run_csv(paths.csv);
  const RunMetrics stored = metrics_from_json(read_json_file(paths.metrics));
  const RunMetrics m = compute_metrics(rows, cfg, stored.aborted, stored.abort_reason);

  const bool consistent = m.samples == stored.samples && close(m.velocity.pooled, stored.velocity.pooled) &&
                          close(m.yaw_rate.pooled, stored.yaw_rate.pooled) &&
                          close(m.angular_velocity.pooled, stored.angular_velocity.pooled) &&
                          close(m.min_height, stored.min_height) && close(m.recovery_time, stored.recovery_time);
  auto checks = evaluate_checks(cfg, m);
  checks.push_back({"csv_matches_metrics_json", consistent ? 1.0 : 0.0, ">=", 1.0, consistent});
  return report(checks, o.quiet);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifted-model MPC experiments for a trotting quadruped"};
  app.require_subcommand(1);
  Options o;
  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out-dir", o.out_dir, "output directory (overrides the config)");
    sub->add_flag("-q,--quiet", o.quiet, "suppress the per-check report");
  };
  auto* sysid = app.add_subcommand("sysid", "sample rollouts and fit the lifted model");
  common(sysid);
  sysid->add_flag("--save-dataset", o.save_dataset, "also write dataset.json");
  auto* fit = app.add_subcommand("fit-eval", "evaluate multi-step prediction error on fresh rollouts");
  common(fit);
  fit->add_option("--model", o.model, "model JSON (fitted in-process when omitted)")->check(CLI::ExistingFile);
  auto* sim = app.add_subcommand("simulate", "run a closed-loop scenario and write run.csv + metrics.json");
  common(sim);
  sim->add_option("--model", o.model, "model JSON (fitted in-process when omitted)")->check(CLI::ExistingFile);
  sim->add_flag("--dump-qp", o.dump_qp, "write the first MPC QP to qp_tick0.json");
  auto* met = app.add_subcommand("metrics", "recompute metrics from a run directory and check thresholds");
  common(met);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*sysid) return cmd_sysid(o);
    if (*fit) return cmd_fit_eval(o);
    if (*sim) return cmd_simulate(o);
    return cmd_metrics(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
