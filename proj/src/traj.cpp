#include "teleop/traj.hpp"

#include <algorithm>
#include <cmath>

#include "teleop/error.hpp"

namespace teleop {

namespace {

constexpr double kLimitSlack = 1e-9;

AxisState advance(const AxisState& s, double jerk, double t) {
  return {s.q + s.v * t + s.a * t * t / 2.0 + jerk * t * t * t / 6.0, s.v + s.a * t + jerk * t * t / 2.0,
          s.a + jerk * t};
}

struct Phase {
  std::array<AxisProfile::Segment, 3> seg{};
  double displacement = 0.0;
  double duration = 0.0;
};

// Shortest constant-jerk sequence taking (v0, a0) to (v1, 0).
Phase velocity_change(double v0, double a0, double v1, const Limits& lim) {
  const double j = lim.j_max, amax = lim.a_max;
  const double dv = v1 - v0;
  // Velocity gained by ramping a0 straight to zero decides the direction.
  const double sign = dv >= a0 * std::abs(a0) / (2.0 * j) ? 1.0 : -1.0;
  const double a0s = sign * a0, dvs = sign * dv;
  double peak = std::sqrt(std::max(0.0, (2.0 * j * dvs + a0s * a0s) / 2.0));
  double hold = 0.0;
  if (peak > amax) {
    peak = amax;
    hold = std::max(0.0, (dvs - (2.0 * amax * amax - a0s * a0s) / (2.0 * j)) / amax);
  }
  Phase ph;
  ph.seg[0] = {std::max(0.0, (peak - a0s) / j), sign * j};
  ph.seg[1] = {hold, 0.0};
  ph.seg[2] = {peak / j, -sign * j};
  AxisState s{0.0, v0, a0};
  for (const auto& sg : ph.seg) {
    s = advance(s, sg.jerk, sg.duration);
    ph.duration += sg.duration;
  }
  ph.displacement = s.q;
  return ph;
}

double travel(double v0, double a0, double cruise, const Limits& lim) {
  return velocity_change(v0, a0, cruise, lim).displacement + velocity_change(cruise, 0.0, 0.0, lim).displacement;
}

}  // namespace

AxisProfile AxisProfile::plan(const AxisState& start, double target, const Limits& lim) {
  if (!(lim.v_max > 0 && lim.a_max > 0 && lim.j_max > 0))
    throw Error(ErrorCode::kInfeasible, "trajectory limits must be positive");
  if (!std::isfinite(start.q) || !std::isfinite(start.v) || !std::isfinite(start.a) || !std::isfinite(target))
    throw Error(ErrorCode::kInfeasible, "non-finite trajectory input");
  if (std::abs(start.v) > lim.v_max + kLimitSlack || std::abs(start.a) > lim.a_max + kLimitSlack)
    throw Error(ErrorCode::kInfeasible, "initial state exceeds velocity or acceleration limit");

  AxisProfile p;
  p.start_ = start;
  p.target_ = target;
  const double dist = target - start.q;
  if (dist == 0.0 && start.v == 0.0 && start.a == 0.0) return p;

  double cruise_v = 0.0, cruise_t = 0.0;
  const double d_hi = travel(start.v, start.a, lim.v_max, lim);
  const double d_lo = travel(start.v, start.a, -lim.v_max, lim);
  if (dist >= d_hi) {
    cruise_v = lim.v_max;
    cruise_t = (dist - d_hi) / lim.v_max;
  } else if (dist <= d_lo) {
    cruise_v = -lim.v_max;
    cruise_t = (d_lo - dist) / lim.v_max;
  } else {
    double lo = -lim.v_max, hi = lim.v_max;
    while (hi - lo > 1e-12) {
      const double mid = 0.5 * (lo + hi);
      if (travel(start.v, start.a, mid, lim) < dist) lo = mid; else hi = mid;
    }
    cruise_v = 0.5 * (lo + hi);
  }
  p.cruise_v_ = cruise_v;

  const Phase accel = velocity_change(start.v, start.a, cruise_v, lim);
  const Phase stop = velocity_change(cruise_v, 0.0, 0.0, lim);
  std::vector<Segment> all(accel.seg.begin(), accel.seg.end());
  all.push_back({cruise_t, 0.0});
  all.insert(all.end(), stop.seg.begin(), stop.seg.end());

  AxisState s = start;
  double t = 0.0;
  for (const Segment& sg : all) {
    if (sg.duration <= 0.0) continue;
    p.segments_.push_back(sg);
    p.knots_.push_back(s);
    p.knot_t_.push_back(t);
    s = advance(s, sg.jerk, sg.duration);
    t += sg.duration;
  }
  p.duration_ = t;
  return p;
}

AxisState AxisProfile::at(double t) const {
  if (t >= duration_) return {target_, 0.0, 0.0};
  if (t <= 0.0) return start_;
  std::size_t k = 0;
  while (k + 1 < knot_t_.size() && knot_t_[k + 1] <= t) ++k;
  return advance(knots_[k], segments_[k].jerk, t - knot_t_[k]);
}

double plateau_duration(double dq, const Limits& lim) {
  return std::abs(dq) / lim.v_max + lim.v_max / lim.a_max + lim.a_max / lim.j_max;
}

OnlineBridge::OnlineBridge(BridgeConfig cfg, const Eigen::VectorXd& q0) : cfg_(std::move(cfg)), target_(q0) {
  if (cfg_.tick_us <= 0) throw Error(ErrorCode::kSchema, "tick period must be positive");
  if (static_cast<int>(cfg_.limits.size()) != q0.size())
    throw Error(ErrorCode::kSchema, "need one set of trajectory limits per joint");
  for (int i = 0; i < q0.size(); ++i) profiles_.push_back(AxisProfile::plan({q0[i], 0.0, 0.0}, q0[i], cfg_.limits[i]));
}

void OnlineBridge::command(std::int64_t t_us, const Eigen::VectorXd& target) {
  if (target.size() != dof()) throw Error(ErrorCode::kSchema, "target has wrong joint count");
  if (t_us < last_stamp_us_) throw Error(ErrorCode::kNonMonotoneTime, "command timestamps must not decrease");
  last_stamp_us_ = t_us;
  const std::int64_t due = t_us <= 0 ? 0 : (t_us + cfg_.tick_us - 1) / cfg_.tick_us;
  pending_.emplace_back(std::max(due, tick_), target);
}

TrajectoryState OnlineBridge::sample(std::int64_t tick) const {
  TrajectoryState s;
  s.tick = tick;
  s.t = static_cast<double>(tick * cfg_.tick_us) * 1e-6;
  const double local = static_cast<double>((tick - plan_tick_) * cfg_.tick_us) * 1e-6;
  s.q.resize(dof());
  s.v.resize(dof());
  s.a.resize(dof());
  for (int i = 0; i < dof(); ++i) {
    const AxisState a = profiles_[i].at(local);
    s.q[i] = a.q;
    s.v[i] = a.v;
    s.a[i] = a.a;
  }
  return s;
}

TrajectoryState OnlineBridge::tick() {
  auto due_end = std::find_if(pending_.begin(), pending_.end(), [&](const auto& p) { return p.first > tick_; });
  if (due_end != pending_.begin()) {
    // Only the newest due target matters; older ones would be replaced at once.
    Eigen::VectorXd goal = std::prev(due_end)->second;
    pending_.erase(pending_.begin(), due_end);
    if (cfg_.lower.size() == goal.size() && cfg_.upper.size() == goal.size())
      goal = goal.cwiseMax(cfg_.lower).cwiseMin(cfg_.upper);
    const TrajectoryState now = sample(tick_);
    for (int i = 0; i < dof(); ++i) {
      const Limits& lim = cfg_.limits[i];
      const AxisState from{now.q[i], std::clamp(now.v[i], -lim.v_max, lim.v_max),
                           std::clamp(now.a[i], -lim.a_max, lim.a_max)};
      profiles_[i] = AxisProfile::plan(from, goal[i], lim);
    }
    target_ = goal;
    plan_tick_ = tick_;
    last_command_tick_ = tick_;
    ++replans_;
  }
  TrajectoryState out = sample(tick_);
  timed_out_ = (tick_ - last_command_tick_) * cfg_.tick_us > cfg_.timeout_us;
  ++tick_;
  return out;
}

}  // namespace teleop
