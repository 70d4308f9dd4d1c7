#pragma once

// Experiment configuration and its JSON schema. Every section is optional;
// omitted keys keep their defaults and unknown keys are rejected.

#include "kmpc/gait.hpp"
#include "kmpc/koopman.hpp"
#include "kmpc/leg_kinematics.hpp"
#include "kmpc/lmpc.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

namespace kmpc {

inline constexpr std::array<const char*, 7> kScenarios = {"sysid",          "fit-eval",      "track-velocity",
                                                          "track-turn",     "push-recovery", "slip-recovery",
                                                          "trot-in-place"};

struct CommandSegment {
  double start = 0.0;  // s; active until the next segment starts
  double forward = 0.0;
  double lateral = 0.0;
  double yaw_rate = 0.0;
};

struct Disturbance {
  enum class Kind { Impulse, StateJump };
  Kind kind = Kind::Impulse;
  double start = 0.0;
  double duration = 0.0;            // impulse only
  Vec3 force_world = Vec3::Zero();  // impulse, N
  Vec3 offset_body = Vec3::Zero();  // impulse application point relative to the CoM
  Vec3 dv_world = Vec3::Zero();     // state jump
  Vec3 dtheta = Vec3::Zero();
  Vec3 domega_body = Vec3::Zero();

  double end() const { return kind == Kind::Impulse ? start + duration : start; }
};

struct EstimatorConfig {
  bool enabled = true;       // false feeds the true velocity to the controller
  bool sensor_noise = true;  // accelerometer and joint-rate noise
  double sigma_a = 0.1;
  double sigma_v = 0.05;
};

struct SysidConfig {
  std::size_t rollouts = 100;
  double horizon = 0.1;
  double dt = 0.001;
  int dict_order = kDefaultDictOrder;
  double regularization = kDefaultRidge;
  std::size_t test_rollouts = 50;
  double test_horizon = 0.05;
  unsigned threads = 0;  // 0 = hardware concurrency
  SamplingRanges sampling;
};

struct Thresholds {
  double velocity_rmse = 0.05;
  double yaw_rate_rmse = 0.15;
  double recovery_time = 2.0;
  double velocity_band = 0.05;
  double angle_band_deg = 1.0;
  double min_height_fraction = 0.5;
  double max_mean_speed = -1.0;           // < 0 disables
  double push_velocity_deviation = -1.0;  // expected peak forward deviation, < 0 disables
  double push_velocity_tolerance = 0.1;
  double min_pitch_deviation_deg = -1.0;  // < 0 disables
  double fit_max_error = 2e-3;
  double fit_runtime = 30.0;
};

struct ExperimentConfig {
  std::string scenario = "track-velocity";
  std::uint64_t seed = 1;
  double duration = 10.0;
  double control_period = 0.005;
  double plant_dt = 0.001;
  double nominal_height = kNominalHeight;
  bool anchor_reference_xy = true;  // re-centre the reference x-y on the measured position each tick
  bool follow_plan = true;          // apply planned steps 0..n-1 over a tick's substeps (false: hold step 0)
  std::string model_path;           // empty: fit a model in-process from `sysid`
  std::string out_dir = "out";

  ModelParams params;
  MpcConfig mpc;
  GaitConfig gait;
  LegGeometry legs;
  EstimatorConfig estimator;
  SysidConfig sysid;
  std::vector<CommandSegment> commands;
  std::vector<Disturbance> disturbances;
  Thresholds thresholds;

  bool closed_loop() const { return scenario != "sysid" && scenario != "fit-eval"; }

  void validate() const {
    if (std::find_if(kScenarios.begin(), kScenarios.end(), [&](const char* s) { return scenario == s; }) ==
        kScenarios.end())
      throw ConfigError("unknown scenario '" + scenario + "'");
    if (!(duration > 0.0)) throw ConfigError("duration must be positive");
    if (!(control_period > 0.0) || !(plant_dt > 0.0)) throw ConfigError("time steps must be positive");
    const double ratio = control_period / plant_dt;
    if (std::abs(ratio - std::round(ratio)) > 1e-9) throw ConfigError("control period must be a multiple of plant dt");
    if (!(nominal_height > 0.0)) throw ConfigError("nominal height must be positive");
    params.validate();
    mpc.validate();
    gait.validate();
    legs.validate();
    if (!(estimator.sigma_a >= 0.0) || !(estimator.sigma_v >= 0.0))
      throw ConfigError("estimator noise levels must be nonnegative");
    if (sysid.rollouts == 0 || sysid.test_rollouts == 0) throw ConfigError("rollout counts must be positive");
    if (!(sysid.horizon > 0.0) || !(sysid.test_horizon > 0.0) || !(sysid.dt > 0.0))
      throw ConfigError("sysid horizons and dt must be positive");
    if (sysid.dict_order < 1) throw ConfigError("dictionary order must be >= 1");
    if (!(sysid.regularization >= 0.0)) throw ConfigError("regularization must be nonnegative");
    for (std::size_t i = 0; i < commands.size(); ++i) {
      if (!(commands[i].start >= 0.0)) throw ConfigError("command segment start must be nonnegative");
      if (i > 0 && !(commands[i].start > commands[i - 1].start))
        throw ConfigError("command segments must have increasing start times");
    }
    for (const auto& d : disturbances) {
      if (!(d.start >= 0.0)) throw ConfigError("disturbance start must be nonnegative");
      if (d.kind == Disturbance::Kind::Impulse && !(d.duration > 0.0))
        throw ConfigError("impulse duration must be positive");
    }
    if (!model_path.empty() && !std::filesystem::exists(model_path))
      throw ConfigError("model file " + model_path + " does not exist");
  }
};

namespace detail {

using Json = nlohmann::json;

inline void check_keys(const Json& j, const char* section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string("config section '") + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(std::string("unknown key '") + key + "' in config section '" + section + "'");
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void read_vec(const Json& j, const char* key, Eigen::Ref<VecX> out) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (v.is_number()) {
    out.setConstant(v.get<double>());
    return;
  }
  if (!v.is_array() || static_cast<Eigen::Index>(v.size()) != out.size())
    throw ConfigError(std::string("config key '") + key + "' must be a number or an array of " +
                      std::to_string(out.size()));
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) = v[static_cast<std::size_t>(i)].get<double>();
}

inline void read_vec3(const Json& j, const char* key, Vec3& out) {
  VecX tmp = out;
  read_vec(j, key, tmp);
  out = tmp;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::read_vec;
  using detail::read_vec3;
  ExperimentConfig c;
  detail::check_keys(j, "root",
                     {"scenario", "seed", "duration", "control_period", "plant_dt", "nominal_height",
                      "anchor_reference_xy", "follow_plan", "model_path", "out_dir", "plant", "mpc", "gait", "legs", "estimator",
                      "sysid", "commands", "disturbances", "thresholds"});
  read(j, "scenario", c.scenario);
  read(j, "seed", c.seed);
  read(j, "duration", c.duration);
  read(j, "control_period", c.control_period);
  read(j, "plant_dt", c.plant_dt);
  read(j, "nominal_height", c.nominal_height);
  read(j, "anchor_reference_xy", c.anchor_reference_xy);
  read(j, "follow_plan", c.follow_plan);
  read(j, "model_path", c.model_path);
  read(j, "out_dir", c.out_dir);

  if (j.contains("plant")) {
    const auto& s = j.at("plant");
    detail::check_keys(s, "plant", {"mass", "inertia", "gravity"});
    read(s, "mass", c.params.mass);
    Vec3 inertia = c.params.inertia.diagonal();
    read_vec3(s, "inertia", inertia);
    c.params.inertia = inertia.asDiagonal();
    double g = c.params.gravity.norm();
    read(s, "gravity", g);
    c.params.gravity = Vec3(0.0, 0.0, g);
  }
  if (j.contains("mpc")) {
    const auto& s = j.at("mpc");
    detail::check_keys(s, "mpc",
                       {"horizon", "q", "r", "f_min", "f_max", "mu", "friction_pyramid", "heading_frame",
                        "warm_start", "qp_tol", "qp_max_iter"});
    read(s, "horizon", c.mpc.horizon);
    read_vec(s, "q", c.mpc.q_diag);
    read_vec(s, "r", c.mpc.r_diag);
    read_vec3(s, "f_min", c.mpc.f_min);
    read_vec3(s, "f_max", c.mpc.f_max);
    read(s, "mu", c.mpc.mu);
    read(s, "friction_pyramid", c.mpc.friction_pyramid);
    read(s, "heading_frame", c.mpc.heading_frame);
    read(s, "warm_start", c.mpc.warm_start);
    read(s, "qp_tol", c.mpc.qp.tol);
    read(s, "qp_max_iter", c.mpc.qp.max_iter);
  }
  if (j.contains("gait")) {
    const auto& s = j.at("gait");
    detail::check_keys(s, "gait", {"phase_duration", "swing_height", "raibert_gain", "swing_kp", "swing_kd"});
    read(s, "phase_duration", c.gait.phase_duration);
    read(s, "swing_height", c.gait.swing_height);
    read(s, "raibert_gain", c.gait.raibert_gain);
    read_vec3(s, "swing_kp", c.gait.swing_kp);
    read_vec3(s, "swing_kd", c.gait.swing_kd);
  }
  if (j.contains("legs")) {
    const auto& s = j.at("legs");
    detail::check_keys(s, "legs", {"l1", "l2", "torque_limit"});
    read(s, "l1", c.legs.l1);
    read(s, "l2", c.legs.l2);
    read(s, "torque_limit", c.legs.torque_limit);
  }
  if (j.contains("estimator")) {
    const auto& s = j.at("estimator");
    detail::check_keys(s, "estimator", {"enabled", "sensor_noise", "sigma_a", "sigma_v"});
    read(s, "enabled", c.estimator.enabled);
    read(s, "sensor_noise", c.estimator.sensor_noise);
    read(s, "sigma_a", c.estimator.sigma_a);
    read(s, "sigma_v", c.estimator.sigma_v);
  }
  if (j.contains("sysid")) {
    const auto& s = j.at("sysid");
    detail::check_keys(s, "sysid",
                       {"rollouts", "horizon", "dt", "dict_order", "regularization", "test_rollouts",
                        "test_horizon", "threads", "sampling"});
    read(s, "rollouts", c.sysid.rollouts);
    read(s, "horizon", c.sysid.horizon);
    read(s, "dt", c.sysid.dt);
    read(s, "dict_order", c.sysid.dict_order);
    read(s, "regularization", c.sysid.regularization);
    read(s, "test_rollouts", c.sysid.test_rollouts);
    read(s, "test_horizon", c.sysid.test_horizon);
    read(s, "threads", c.sysid.threads);
    if (s.contains("sampling")) {
      const auto& r = s.at("sampling");
      detail::check_keys(r, "sysid.sampling",
                         {"position", "orientation", "velocity", "angular_velocity", "vertical_force",
                          "tangential_force"});
      read(r, "position", c.sysid.sampling.position);
      read(r, "orientation", c.sysid.sampling.orientation);
      read(r, "velocity", c.sysid.sampling.velocity);
      read(r, "angular_velocity", c.sysid.sampling.angular_velocity);
      read(r, "vertical_force", c.sysid.sampling.vertical_force);
      read(r, "tangential_force", c.sysid.sampling.tangential_force);
    }
  }
  if (j.contains("commands")) {
    if (!j.at("commands").is_array()) throw ConfigError("'commands' must be an array");
    for (const auto& s : j.at("commands")) {
      detail::check_keys(s, "commands[]", {"start", "forward", "lateral", "yaw_rate"});
      CommandSegment seg;
      read(s, "start", seg.start);
      read(s, "forward", seg.forward);
      read(s, "lateral", seg.lateral);
      read(s, "yaw_rate", seg.yaw_rate);
      c.commands.push_back(seg);
    }
  }
  if (j.contains("disturbances")) {
    if (!j.at("disturbances").is_array()) throw ConfigError("'disturbances' must be an array");
    for (const auto& s : j.at("disturbances")) {
      Disturbance d;
      std::string type = "impulse";
      if (s.is_object()) read(s, "type", type);
      if (type == "impulse") {
        detail::check_keys(s, "disturbances[]", {"type", "start", "duration", "force", "offset"});
        read_vec3(s, "force", d.force_world);
        read_vec3(s, "offset", d.offset_body);
        read(s, "duration", d.duration);
      } else if (type == "state_jump") {
        detail::check_keys(s, "disturbances[]", {"type", "start", "dv", "dtheta", "domega"});
        d.kind = Disturbance::Kind::StateJump;
        read_vec3(s, "dv", d.dv_world);
        read_vec3(s, "dtheta", d.dtheta);
        read_vec3(s, "domega", d.domega_body);
      } else {
        throw ConfigError("unknown disturbance type '" + type + "'");
      }
      read(s, "start", d.start);
      c.disturbances.push_back(d);
    }
  }
  if (j.contains("thresholds")) {
    const auto& s = j.at("thresholds");
    detail::check_keys(s, "thresholds",
                       {"velocity_rmse", "yaw_rate_rmse", "recovery_time", "velocity_band", "angle_band_deg",
                        "min_height_fraction", "max_mean_speed", "push_velocity_deviation",
                        "push_velocity_tolerance", "min_pitch_deviation_deg", "fit_max_error", "fit_runtime"});
    auto& t = c.thresholds;
    read(s, "velocity_rmse", t.velocity_rmse);
    read(s, "yaw_rate_rmse", t.yaw_rate_rmse);
    read(s, "recovery_time", t.recovery_time);
    read(s, "velocity_band", t.velocity_band);
    read(s, "angle_band_deg", t.angle_band_deg);
    read(s, "min_height_fraction", t.min_height_fraction);
    read(s, "max_mean_speed", t.max_mean_speed);
    read(s, "push_velocity_deviation", t.push_velocity_deviation);
    read(s, "push_velocity_tolerance", t.push_velocity_tolerance);
    read(s, "min_pitch_deviation_deg", t.min_pitch_deviation_deg);
    read(s, "fit_max_error", t.fit_max_error);
    read(s, "fit_runtime", t.fit_runtime);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace kmpc
