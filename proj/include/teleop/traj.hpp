#pragma once

// Jerk-limited online trajectory generation.
//
// A profile moves one axis from (q, v, a) to rest at a target position with at
// most seven constant-jerk segments: a velocity change to a cruise velocity
// (reached with zero acceleration), an optional cruise, and a stop. The cruise
// velocity is found by bisection on the monotone travel-distance function.

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace teleop {

struct Limits {
  double v_max = 2.0;
  double a_max = 10.0;
  double j_max = 1000.0;
};

struct AxisState {
  double q = 0.0;
  double v = 0.0;
  double a = 0.0;
};

class AxisProfile {
 public:
  struct Segment {
    double duration = 0.0;
    double jerk = 0.0;
  };

  AxisProfile() = default;

  /// Plans from `start` to rest at `target`. Throws Error(kInfeasible) if the
  /// start velocity or acceleration exceeds the limits by more than 1e-9.
  static AxisProfile plan(const AxisState& start, double target, const Limits& limits);

  double duration() const { return duration_; }
  const std::vector<Segment>& segments() const { return segments_; }
  const AxisState& start() const { return start_; }
  double target() const { return target_; }
  /// Peak |v| reached between the two velocity-change phases.
  double cruise_velocity() const { return cruise_v_; }

  /// Analytic state at time t (clamped to [0, duration]). At and after the
  /// end the state is exactly (target, 0, 0).
  AxisState at(double t) const;

 private:
  AxisState start_;
  double target_ = 0.0;
  double cruise_v_ = 0.0;
  double duration_ = 0.0;
  std::vector<Segment> segments_;
  std::vector<AxisState> knots_;  // state at the start of each segment
  std::vector<double> knot_t_;
};

/// Rest-to-rest duration for a move that reaches the velocity plateau:
/// |dq|/v + v/a + a/j. Valid only when |dq| is large enough for a plateau.
double plateau_duration(double dq, const Limits& limits);

/// Multi-joint state as sampled by the control loop.
struct TrajectoryState {
  std::int64_t tick = 0;
  double t = 0.0;  // seconds, tick * dt
  Eigen::VectorXd q;
  Eigen::VectorXd v;
  Eigen::VectorXd a;
};

struct BridgeConfig {
  std::int64_t tick_us = 1000;
  std::int64_t timeout_us = 500000;
  std::vector<Limits> limits;          // one per joint
  Eigen::VectorXd lower, upper;        // optional position box for targets
};

/// Bridges timestamped position targets onto a fixed-rate control clock.
/// A target stamped at T microseconds takes effect at tick ceil(T / tick_us);
/// the new plan starts from the state sampled at that tick, so q, v and a are
/// continuous across re-plans.
class OnlineBridge {
 public:
  OnlineBridge(BridgeConfig cfg, const Eigen::VectorXd& q0);

  /// Queues a target. Timestamps must not decrease (Error(kNonMonotoneTime)).
  void command(std::int64_t t_us, const Eigen::VectorXd& target);

  /// Applies due targets, emits the state for the current tick, then advances.
  TrajectoryState tick();

  std::int64_t next_tick() const { return tick_; }
  std::int64_t now_us() const { return tick_ * cfg_.tick_us; }
  /// True once no target has arrived for more than timeout_us.
  bool timed_out() const { return timed_out_; }
  const Eigen::VectorXd& target() const { return target_; }
  std::uint64_t replans() const { return replans_; }
  int dof() const { return static_cast<int>(profiles_.size()); }

 private:
  TrajectoryState sample(std::int64_t tick) const;

  BridgeConfig cfg_;
  std::vector<AxisProfile> profiles_;
  std::int64_t plan_tick_ = 0;
  std::int64_t tick_ = 0;
  std::int64_t last_command_tick_ = 0;
  std::int64_t last_stamp_us_ = -1;
  bool timed_out_ = false;
  std::uint64_t replans_ = 0;
  Eigen::VectorXd target_;
  std::vector<std::pair<std::int64_t, Eigen::VectorXd>> pending_;  // (apply tick, target)
};

}  // namespace teleop
