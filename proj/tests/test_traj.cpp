#include <doctest.h>

#include <cmath>
#include <random>

#include "teleop/error.hpp"
#include "teleop/traj.hpp"

using namespace teleop;

namespace {

const Limits kLim{2.0, 10.0, 1000.0};

// A random state from which a limit-respecting stop exists: |a| <= a_max and
// the velocity reached by ramping a to zero stays within +-v_max.
AxisState feasible_state(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  AxisState s;
  s.q = u(rng);
  s.a = kLim.a_max * u(rng);
  const double drift = s.a * std::abs(s.a) / (2 * kLim.j_max);
  const double lo = std::max(-kLim.v_max, -kLim.v_max - drift);
  const double hi = std::min(kLim.v_max, kLim.v_max - drift);
  s.v = lo + (hi - lo) * 0.5 * (u(rng) + 1.0);
  return s;
}

// Integrates the profile's jerk schedule with 1 us explicit Euler steps.
AxisState euler(const AxisProfile& p) {
  AxisState s = p.start();
  const double dt = 1e-6;
  for (const auto& seg : p.segments()) {
    const long steps = std::lround(seg.duration / dt);
    const double h = steps > 0 ? seg.duration / steps : 0.0;
    for (long k = 0; k < steps; ++k) {
      s.q += s.v * h + 0.5 * s.a * h * h;
      s.v += s.a * h;
      s.a += seg.jerk * h;
    }
  }
  return s;
}

BridgeConfig bridge_config(int dof) {
  BridgeConfig cfg;
  cfg.limits.assign(dof, kLim);
  return cfg;
}

}  // namespace

TEST_CASE("at rest on target gives an empty profile") {
  const auto p = AxisProfile::plan({0.4, 0.0, 0.0}, 0.4, kLim);
  CHECK(p.duration() == 0.0);
  CHECK(p.segments().empty());
  CHECK(p.at(0.0).q == 0.4);
  CHECK(p.at(1.0).v == 0.0);
}

TEST_CASE("plateau move matches the closed-form duration") {
  for (double dq : {3.0, -2.5, 0.8, 10.0}) {
    const auto p = AxisProfile::plan({1.0, 0.0, 0.0}, 1.0 + dq, kLim);
    const double expected = plateau_duration(dq, kLim);
    CHECK(std::abs(p.duration() - expected) <= 1e-3);
    CHECK(std::abs(p.duration() - expected) <= 1e-9);
    CHECK(p.segments().size() == 7);
    CHECK(std::abs(p.cruise_velocity()) == doctest::Approx(kLim.v_max));
    CHECK(std::abs(p.at(p.duration() / 2).v) == doctest::Approx(kLim.v_max).epsilon(1e-12));
  }
}

TEST_CASE("short symmetric move peaks at the oracle velocity at its midpoint") {
  // No acceleration or velocity plateau: four jerk phases of length tj with
  // dq = 2 j tj^3 and peak velocity j tj^2.
  const double dq = 1e-3;
  const double tj = std::cbrt(dq / (2 * kLim.j_max));
  const auto p = AxisProfile::plan({0.0, 0.0, 0.0}, dq, kLim);
  CHECK(p.duration() == doctest::Approx(4 * tj).epsilon(1e-9));
  CHECK(p.at(2 * tj).v == doctest::Approx(kLim.j_max * tj * tj).epsilon(1e-9));
  CHECK(p.at(2 * tj).q == doctest::Approx(dq / 2).epsilon(1e-9));
}

TEST_CASE("profile endpoints") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int t = 0; t < 200; ++t) {
    const AxisState s = feasible_state(rng);
    const double target = u(rng);
    const auto p = AxisProfile::plan(s, target, kLim);
    const AxisState a = p.at(0.0);
    CHECK(a.q == s.q);
    CHECK(a.v == s.v);
    CHECK(a.a == s.a);
    const AxisState e = p.at(p.duration());
    CHECK(e.q == target);
    CHECK(e.v == 0.0);
    CHECK(e.a == 0.0);
  }
}

TEST_CASE("fine Euler integration lands on the target") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  for (int t = 0; t < 150; ++t) {
    const AxisState s = feasible_state(rng);
    const double target = s.q + u(rng);
    const auto p = AxisProfile::plan(s, target, kLim);
    CHECK(p.segments().size() <= 7);
    const AxisState e = euler(p);
    CHECK(std::abs(e.q - target) <= 1e-5);
    CHECK(std::abs(e.v) <= 1e-4);
    CHECK(std::abs(e.a) <= 1e-3);
  }
}

TEST_CASE("sampled profiles respect limits and are self-consistent") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  const double dt = 1e-3;
  for (int t = 0; t < 300; ++t) {
    const AxisState s = feasible_state(rng);
    const auto p = AxisProfile::plan(s, s.q + u(rng), kLim);
    AxisState prev = p.at(0.0);
    for (double tt = dt; tt <= p.duration() + dt; tt += dt) {
      const AxisState cur = p.at(tt);
      CHECK(std::abs(cur.v) <= kLim.v_max + 1e-9);
      CHECK(std::abs(cur.a) <= kLim.a_max + 1e-9);
      CHECK(std::abs(cur.a - prev.a) <= kLim.j_max * dt + 1e-9);
      CHECK(std::abs((cur.q - prev.q) - prev.v * dt) <= kLim.a_max * dt * dt);
      prev = cur;
    }
  }
}

TEST_CASE("infeasible initial state is reported") {
  CHECK_THROWS_AS(AxisProfile::plan({0, 2.5, 0}, 1.0, kLim), Error);
  CHECK_THROWS_AS(AxisProfile::plan({0, 0, 11}, 1.0, kLim), Error);
  CHECK_NOTHROW(AxisProfile::plan({0, 2.0 + 5e-10, 0}, 1.0, kLim));
  CHECK_THROWS_AS(AxisProfile::plan({0, 0, 0}, NAN, kLim), Error);
}

TEST_CASE("30 Hz commands land on 1 kHz ticks") {
  OnlineBridge b(bridge_config(2), Eigen::VectorXd::Zero(2));
  std::vector<std::int64_t> apply_ticks;
  std::uint64_t seen = 0;
  int n_cmd = 0;
  for (std::int64_t k = 0; k < 3000; ++k) {
    // Command n is stamped n/30 s; queue it as soon as its stamp is reached.
    while (n_cmd < 90 && n_cmd * 1000000LL / 30 <= k * 1000) {
      b.command(n_cmd * 1000000LL / 30, Eigen::VectorXd::Constant(2, 0.01 * n_cmd));
      ++n_cmd;
    }
    const auto s = b.tick();
    CHECK(s.tick == k);
    if (b.replans() != seen) {
      seen = b.replans();
      apply_ticks.push_back(k);
    }
  }
  CHECK(b.next_tick() == 3000);
  REQUIRE(apply_ticks.size() == 90);
  for (std::size_t i = 1; i < apply_ticks.size(); ++i) {
    const auto gap = apply_ticks[i] - apply_ticks[i - 1];
    CHECK((gap == 33 || gap == 34));
  }
  for (std::size_t i = 3; i < apply_ticks.size(); i += 3) CHECK(apply_ticks[i] - apply_ticks[i - 3] == 100);
  CHECK(apply_ticks[1] == 34);
  CHECK(apply_ticks[2] == 67);
  CHECK(apply_ticks[3] == 100);
}

TEST_CASE("bridge holds, flags timeouts and rejects time going backwards") {
  OnlineBridge b(bridge_config(1), Eigen::VectorXd::Zero(1));
  b.command(0, Eigen::VectorXd::Constant(1, 0.5));
  for (int k = 0; k <= 500; ++k) {
    b.tick();
    CHECK_FALSE(b.timed_out());
  }
  const auto s = b.tick();
  CHECK(b.timed_out());
  CHECK(s.q[0] == 0.5);
  b.command(502000, Eigen::VectorXd::Constant(1, 0.0));
  b.tick();
  CHECK_FALSE(b.timed_out());
  CHECK_THROWS_AS(b.command(100, Eigen::VectorXd::Constant(1, 0.0)), Error);
  CHECK_THROWS_AS(b.command(600000, Eigen::VectorXd::Zero(3)), Error);
}

TEST_CASE("bridge clamps targets into the configured box") {
  auto cfg = bridge_config(1);
  cfg.lower = Eigen::VectorXd::Constant(1, -0.2);
  cfg.upper = Eigen::VectorXd::Constant(1, 0.2);
  OnlineBridge b(cfg, Eigen::VectorXd::Zero(1));
  b.command(0, Eigen::VectorXd::Constant(1, 5.0));
  TrajectoryState s;
  for (int k = 0; k < 2000; ++k) s = b.tick();
  CHECK(s.q[0] == 0.2);
}

TEST_CASE("fixed target converges within the optimal time plus one tick") {
  OnlineBridge b(bridge_config(1), Eigen::VectorXd::Zero(1));
  b.command(0, Eigen::VectorXd::Constant(1, 1.5));
  const double optimal = plateau_duration(1.5, kLim);
  std::int64_t reached = -1;
  for (int k = 0; k < 3000 && reached < 0; ++k) {
    const auto s = b.tick();
    if (s.q[0] == 1.5 && s.v[0] == 0.0 && s.a[0] == 0.0) reached = s.tick;
  }
  REQUIRE(reached >= 0);
  CHECK(reached * 1e-3 <= optimal + 1e-3);
  CHECK(reached * 1e-3 >= optimal - 1e-3);
}

TEST_CASE("fuzzed re-targeting never violates limits and is repeatable") {
  const int dof = 3;
  auto run = [&](std::vector<Eigen::VectorXd>* log) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::uniform_int_distribution<int> gap(1, 60);
    OnlineBridge b(bridge_config(dof), Eigen::VectorXd::Zero(dof));
    TrajectoryState prev = b.tick();
    int violations = 0;
    for (int ev = 0; ev < 10000; ++ev) {
      Eigen::VectorXd target(dof);
      for (int i = 0; i < dof; ++i) target[i] = u(rng);
      b.command(b.now_us(), target);
      const int n = gap(rng);
      for (int k = 0; k < n; ++k) {
        const auto s = b.tick();
        for (int i = 0; i < dof; ++i) {
          if (std::abs(s.v[i]) > kLim.v_max + 1e-9) ++violations;
          if (std::abs(s.a[i]) > kLim.a_max + 1e-9) ++violations;
          if (std::abs(s.a[i] - prev.a[i]) > kLim.j_max * 1e-3 + 1e-9) ++violations;
          if (std::abs((s.q[i] - prev.q[i]) - prev.v[i] * 1e-3) > kLim.a_max * 1e-6) ++violations;
        }
        if (log) log->push_back(s.q);
        prev = s;
      }
    }
    return violations;
  };
  std::vector<Eigen::VectorXd> a, b;
  CHECK(run(&a) == 0);
  run(&b);
  REQUIRE(a.size() == b.size());
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i] == b[i];
  CHECK(same);
}
