#pragma once

// Trot scheduling and swing-foot references.

#include "kmpc/common.hpp"

#include <algorithm>
#include <cmath>

namespace kmpc {

struct GaitConfig {
  double phase_duration = 0.2;  // s per stance/swing half-cycle
  double swing_height = 0.06;   // m apex above the higher endpoint
  double raibert_gain = 0.03;   // s
  Vec3 swing_kp = Vec3::Constant(20.0);
  Vec3 swing_kd = Vec3::Constant(0.5);

  void validate() const {
    if (!(phase_duration > 0.0)) throw ConfigError("gait phase duration must be positive");
    if (!(swing_height >= 0.0)) throw ConfigError("swing height must be nonnegative");
    if ((swing_kp.array() < 0.0).any() || (swing_kd.array() < 0.0).any())
      throw ConfigError("swing gains must be nonnegative");
  }
};

/// Pair A = {FR, RL} stands during even phases, pair B = {FL, RR} during odd ones.
inline constexpr StanceMask kPairA = {true, false, false, true};
inline constexpr StanceMask kPairB = {false, true, true, false};

struct GaitState {
  StanceMask stance = kPairA;
  PerLeg<double> phase{0.0, 0.0, 0.0, 0.0};  // fraction of the current half-cycle
  long phase_index = 0;
  PerLeg<bool> frozen{false, false, false, false};  // swing target held after early contact
  PerLeg<double> frozen_phase{0.0, 0.0, 0.0, 0.0};
  bool phase_changed = false;
};

class TrotScheduler {
 public:
  explicit TrotScheduler(double phase_duration = 0.2) : period_(phase_duration) {
    if (!(phase_duration > 0.0)) throw ConfigError("gait phase duration must be positive");
  }

  double phase_duration() const { return period_; }

  /// Advances the FSM to time t. `contact` flags a foot touching the ground;
  /// for a swing leg mid-phase this freezes its swing target.
  const GaitState& update(double t, const PerLeg<bool>& contact) {
    if (!(t >= 0.0)) throw Error("gait time must be nonnegative");
    const double cycles = t / period_ + 1e-9;
    const long index = static_cast<long>(std::floor(cycles));
    double frac = t / period_ - static_cast<double>(index);
    frac = std::clamp(frac, 0.0, 1.0);
    state_.phase_changed = !started_ || index != state_.phase_index;
    if (state_.phase_changed) {
      state_.frozen = {false, false, false, false};
      state_.frozen_phase = {0.0, 0.0, 0.0, 0.0};
    }
    started_ = true;
    state_.phase_index = index;
    state_.stance = (index % 2 == 0) ? kPairA : kPairB;
    for (int leg = 0; leg < kNumLegs; ++leg) {
      state_.phase[leg] = frac;
      if (!state_.stance[leg] && contact[leg] && !state_.frozen[leg]) {
        state_.frozen[leg] = true;
        state_.frozen_phase[leg] = frac;
      }
    }
    return state_;
  }

  const GaitState& update(double t) { return update(t, {false, false, false, false}); }

  const GaitState& state() const { return state_; }

  /// Phase fraction used for a swing leg's reference (held once frozen).
  double swing_phase(int leg) const { return state_.frozen[leg] ? state_.frozen_phase[leg] : state_.phase[leg]; }

 private:
  double period_;
  GaitState state_;
  bool started_ = false;
};

struct SwingReference {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
};

/// Cycloid in x-y, raised-cosine bump in z. `phase_rate` converts d/ds to d/dt.
inline SwingReference swing_trajectory(const Vec3& start, const Vec3& end, double height, double s,
                                       double phase_rate = 1.0) {
  if (!(s >= 0.0 && s <= 1.0)) throw Error("swing phase must lie in [0, 1]");
  constexpr double two_pi = 2.0 * M_PI;
  const double sigma = s - std::sin(two_pi * s) / two_pi;
  const double dsigma = 1.0 - std::cos(two_pi * s);
  const double bump = 0.5 * (1.0 - std::cos(two_pi * s));
  const double dbump = M_PI * std::sin(two_pi * s);
  const double lift = std::max(start.z(), end.z()) + height - 0.5 * (start.z() + end.z());

  SwingReference ref;
  ref.position = start + (end - start) * sigma;
  ref.position.z() += lift * bump;
  ref.velocity = (end - start) * dsigma;
  ref.velocity.z() += lift * dbump;
  ref.velocity *= phase_rate;
  return ref;
}

/// Touchdown point on flat ground: hip position predicted at touchdown plus
/// the half-stance velocity offset and a velocity-error correction.
inline Vec3 raibert_target(const Vec3& hip_world, const Vec3& velocity, const Vec3& velocity_des,
                           double time_to_touchdown, double stance_duration, double gain) {
  Vec3 target = hip_world + velocity * time_to_touchdown + 0.5 * stance_duration * velocity +
                gain * (velocity - velocity_des);
  target.z() = 0.0;
  return target;
}

}  // namespace kmpc
