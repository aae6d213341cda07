#include <doctest.h>

#include <cmath>
#include <random>

#include "teleop/error.hpp"
#include "teleop/hand_retarget.hpp"

using namespace teleop;

namespace {

const std::string kFixtures = TELEOP_FIXTURE_DIR;

const KinematicModel& hand() {
  static const KinematicModel m = KinematicModel::load(kFixtures + "/hand12_generic.model");
  return m;
}

JointVector random_q(const KinematicModel& m, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  JointVector q(m.dof());
  for (int i = 0; i < m.dof(); ++i) q[i] = m.lower()[i] + u(rng) * (m.upper()[i] - m.lower()[i]);
  return q;
}

// The robot hand posing as the tracked hand: landmark frames lm0..lm20 at q.
HandFrame robot_as_human(const KinematicModel& m, const JointVector& q) {
  const ChainState st = m.evaluate(q);
  HandFrame f;
  for (int i = 0; i < kLandmarkCount; ++i) f.landmarks[i] = st.position("lm" + std::to_string(i));
  return f;
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return Quat{n(rng), n(rng), n(rng), n(rng)}.normalized().matrix();
}

RetargetConfig self_consistent_config() {
  RetargetConfig cfg;
  cfg.d_proj = 0.0;
  cfg.d_esc = 0.0;
  cfg.pinky_scaling = false;
  cfg.lambda = 0.0;
  return cfg;
}

std::vector<RefVectorSpec> random_refs(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.12, 0.12);
  std::uniform_int_distribution<int> w(0, 2);
  auto refs = default_reference_layout();
  const double weights[] = {400.0, 200.0, 1.0};
  for (auto& r : refs) {
    r.reference = Vec3(u(rng), u(rng), u(rng));
    r.weight = weights[w(rng)];
  }
  return refs;
}

}  // namespace

TEST_CASE("huber definition") {
  CHECK(huber(0.0, 0.02) == 0.0);
  CHECK(huber(0.02, 0.02) == doctest::Approx(0.02 * 0.02 / 2).epsilon(1e-15));
  CHECK(0.02 * (0.02 - 0.01) == doctest::Approx(huber(0.02, 0.02)).epsilon(1e-15));
  CHECK(huber(0.1, 0.02) == doctest::Approx(0.0018).epsilon(1e-14));
  CHECK(huber(0.01, 0.02) == doctest::Approx(0.00005).epsilon(1e-14));
}

TEST_CASE("ema filter") {
  JointVector one = JointVector::Ones(3), zero = JointVector::Zero(3);
  CHECK(ema_filter(one, zero, 0.6)[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(ema_filter(one, one, 0.6) == one);
  CHECK(ema_filter(one, zero, 1.0) == one);
  JointVector s = zero;
  const double expected[] = {0.6, 0.84, 0.936, 0.9744, 0.98976};
  for (double e : expected) {
    s = ema_filter(one, s, 0.6);
    CHECK(std::abs(s[0] - e) <= 1e-12);
  }
  CHECK_THROWS_AS(ema_filter(one, JointVector::Zero(2), 0.5), Error);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 2), a(0.01, 1.0);
  for (int t = 0; t < 200; ++t) {
    JointVector x(4), y(4);
    for (int i = 0; i < 4; ++i) x[i] = u(rng), y[i] = u(rng);
    const JointVector z = ema_filter(x, y, a(rng));
    for (int i = 0; i < 4; ++i) {
      CHECK(z[i] >= std::min(x[i], y[i]) - 1e-15);
      CHECK(z[i] <= std::max(x[i], y[i]) + 1e-15);
    }
  }
}

TEST_CASE("normalize_frame against an explicit change of basis") {
  const auto& m = hand();
  std::mt19937_64 rng(4);
  for (int t = 0; t < 30; ++t) {
    const HandFrame canon = robot_as_human(m, random_q(m, rng));
    // The hand model's base is already the canonical frame.
    const HandFrame again = normalize_frame(canon);
    for (int i = 0; i < kLandmarkCount; ++i) CHECK((again.landmarks[i] - canon.landmarks[i]).norm() <= 1e-12);

    const Mat3 r = random_rotation(rng);
    const Vec3 offset(0.3, -0.2, 1.1);
    HandFrame moved = canon;
    for (auto& p : moved.landmarks) p = r * p + offset;
    const HandFrame back = normalize_frame(moved);
    for (int i = 0; i < kLandmarkCount; ++i) CHECK((back.landmarks[i] - canon.landmarks[i]).norm() <= 1e-9);

    // Dense oracle: build the basis matrix from the raw points directly.
    const Vec3 a = moved.landmarks[9] - moved.landmarks[0];
    const Vec3 b = moved.landmarks[5] - moved.landmarks[0];
    Mat3 basis;
    basis.row(0) = a.normalized().transpose();
    basis.row(2) = b.cross(a).normalized().transpose();
    basis.row(1) = basis.row(2).cross(basis.row(0));
    RetargetConfig cfg;
    cfg.hand_scale = 1.3;
    const HandFrame scaled = normalize_frame(moved, cfg);
    for (int i = 0; i < kLandmarkCount; ++i) {
      const Vec3 expected = 1.3 * basis * (moved.landmarks[i] - moved.landmarks[0]);
      CHECK((scaled.landmarks[i] - expected).norm() <= 1e-12);
    }
  }
}

TEST_CASE("normalize_frame rejects degenerate and invalid frames") {
  HandFrame f;
  for (int i = 0; i < kLandmarkCount; ++i) f.landmarks[i] = Vec3(0.01 * i, 0, 0);
  CHECK_THROWS_WITH_AS(normalize_frame(f), doctest::Contains("parallel"), Error);
  try {
    normalize_frame(f);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerate);
  }
  f.landmarks[3] = Vec3(0.5, 0, 0);
  CHECK_THROWS_AS(normalize_frame(f), Error);
  f.landmarks[3] = Vec3(NAN, 0, 0);
  CHECK_THROWS_AS(normalize_frame(f), Error);
}

TEST_CASE("reference branches and weights") {
  RetargetConfig cfg;
  HandFrame f;
  for (int i = 0; i < kLandmarkCount; ++i) f.landmarks[i] = Vec3(0.05, 0.01 * i, 0.0);
  f.landmarks[0] = Vec3::Zero();
  // Thumb tip 5 mm from index tip; index tip 0.15 m from the wrist.
  f.landmarks[landmark::kIndexTip] = Vec3(0.15, 0.0, 0.0);
  f.landmarks[landmark::kThumbTip] = Vec3(0.15, 0.005, 0.0);
  // Keep the other tips well apart from each other.
  f.landmarks[landmark::kMiddleTip] = Vec3(0.16, 0.06, 0.0);
  f.landmarks[landmark::kRingTip] = Vec3(0.15, 0.12, 0.0);
  f.landmarks[landmark::kPinkyTip] = Vec3(0.012, 0.016, 0.0);  // 2 cm from the wrist
  cfg.pinky_scaling = false;
  const auto refs = build_references(f, default_reference_layout(), cfg);
  REQUIRE(refs.size() == 15);
  auto find = [&](int a, int b) {
    for (const auto& r : refs)
      if (r.human_from == a && r.human_to == b) return r;
    FAIL("missing reference");
    return RefVectorSpec{};
  };
  const auto thumb_index = find(landmark::kThumbTip, landmark::kIndexTip);
  CHECK(thumb_index.state == RefState::kProjected);
  CHECK(thumb_index.weight == 400.0);
  CHECK(thumb_index.reference.norm() == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK((thumb_index.reference.normalized() - Vec3(0, -1, 0)).norm() < 1e-12);

  const auto wrist_index = find(landmark::kWrist, landmark::kIndexTip);
  CHECK(wrist_index.state == RefState::kFree);
  CHECK(wrist_index.weight == 1.0);
  CHECK((wrist_index.reference - Vec3(0.15, 0, 0)).norm() == 0.0);

  const auto wrist_pinky = find(landmark::kWrist, landmark::kPinkyTip);
  CHECK(wrist_pinky.state == RefState::kProjected);
  CHECK(wrist_pinky.weight == 200.0);
  CHECK(wrist_pinky.reference.norm() == doctest::Approx(3e-2).epsilon(1e-12));

  const auto middle_ring = find(landmark::kMiddleTip, landmark::kRingTip);
  CHECK(middle_ring.state == RefState::kFree);
  CHECK(middle_ring.weight == 1.0);

  cfg.scale = 1.5;
  const auto scaled = build_references(f, default_reference_layout(), cfg);
  for (const auto& r : scaled)
    if (r.human_from == landmark::kWrist && r.human_to == landmark::kIndexTip)
      CHECK((r.reference - Vec3(0.225, 0, 0)).norm() < 1e-15);
}

TEST_CASE("reference state machine keeps the previous spec at the boundary") {
  RetargetConfig cfg;
  cfg.pinky_scaling = false;
  HandFrame f;
  for (int i = 0; i < kLandmarkCount; ++i) f.landmarks[i] = Vec3(0.1, 0.04 * (i % 5), 0.01 * i);
  f.landmarks[0] = Vec3::Zero();
  f.landmarks[landmark::kThumbTip] = Vec3(0.1, 0.0, 0.0);
  f.landmarks[landmark::kIndexTip] = Vec3(0.1, 0.01, 0.0);
  auto refs = build_references(f, default_reference_layout(), cfg);
  const RefVectorSpec before = refs[5];  // thumb -> index
  REQUIRE(before.human_from == landmark::kThumbTip);
  REQUIRE(before.human_to == landmark::kIndexTip);
  REQUIRE(before.state == RefState::kProjected);

  f.landmarks[landmark::kIndexTip] = Vec3(0.1, 0.03, 0.0);  // exactly d_proj = d_esc
  refs = build_references(f, refs, cfg);
  CHECK(refs[5].state == before.state);
  CHECK(refs[5].weight == before.weight);
  CHECK(refs[5].reference == before.reference);

  // Hysteresis band: with d_proj < d_esc a spec changes state only on crossing.
  cfg.d_proj = 0.02;
  cfg.d_esc = 0.04;
  const double path[] = {0.01, 0.025, 0.035, 0.045, 0.03, 0.021, 0.019, 0.039};
  const RefState expected[] = {RefState::kProjected, RefState::kProjected, RefState::kProjected, RefState::kFree,
                               RefState::kFree,      RefState::kFree,      RefState::kProjected, RefState::kProjected};
  refs = default_reference_layout();
  for (int k = 0; k < 8; ++k) {
    f.landmarks[landmark::kIndexTip] = Vec3(0.1, path[k], 0.0);
    refs = build_references(f, refs, cfg);
    CHECK(refs[5].state == expected[k]);
  }
}

TEST_CASE("pinky gamma endpoints, midpoint and monotonicity") {
  RetargetConfig cfg;
  HandFrame f;
  auto set_pinky = [&](double bend) {
    // Three 2 cm segments, each joint bent by `bend`.
    Vec3 p(0.08, 0.04, 0.0);
    double heading = 0.0;
    f.landmarks[17] = p;
    for (int i = 18; i <= 20; ++i) {
      p += 0.02 * Vec3(std::cos(heading), 0.0, -std::sin(heading));
      f.landmarks[i] = p;
      heading += bend;
    }
  };
  set_pinky(0.0);
  CHECK(pinky_extension_ratio(f) == doctest::Approx(1.0));
  CHECK(pinky_gamma(f, cfg) == 2.2);
  set_pinky(2.0);
  CHECK(pinky_extension_ratio(f) < 0.3);
  CHECK(pinky_gamma(f, cfg) == 1.2);
  double last = 0.0;
  for (double bend = 2.0; bend >= 0.0; bend -= 0.05) {
    set_pinky(bend);
    const double g = pinky_gamma(f, cfg);
    CHECK(g >= last);
    CHECK(g >= 1.2);
    CHECK(g <= 2.2);
    last = g;
  }
  // Midpoint ratio (0.3 + 0.95) / 2 = 0.625: straight segments folded so the chord is 0.625 of the path.
  f.landmarks[17] = Vec3::Zero();
  f.landmarks[18] = Vec3(0.02, 0, 0);
  f.landmarks[19] = Vec3(0.04, 0, 0);
  const double chord = 0.625 * 0.06;
  // Last segment of length 0.02 ending at distance `chord` from the MCP.
  const double cosb = (chord * chord - 0.04 * 0.04 - 0.02 * 0.02) / (2 * 0.04 * 0.02);
  f.landmarks[20] = Vec3(0.04 + 0.02 * cosb, 0.02 * std::sqrt(1 - cosb * cosb), 0);
  CHECK(pinky_extension_ratio(f) == doctest::Approx(0.625).epsilon(1e-12));
  CHECK(pinky_gamma(f, cfg) == doctest::Approx(1.7).epsilon(1e-12));
}

TEST_CASE("pinky gamma scales only the wrist-to-pinky reference") {
  const auto& m = hand();
  RetargetConfig cfg;
  cfg.d_proj = cfg.d_esc = 0.0;
  const HandFrame f = robot_as_human(m, JointVector::Zero(m.dof()));
  const double gamma = pinky_gamma(f, cfg);
  const auto scaled = build_references(f, default_reference_layout(), cfg);
  cfg.pinky_scaling = false;
  const auto plain = build_references(f, default_reference_layout(), cfg);
  for (std::size_t i = 0; i < plain.size(); ++i) {
    const bool wrist_pinky = plain[i].kind == RefKind::kWristFinger && plain[i].human_to == landmark::kPinkyTip;
    if (wrist_pinky)
      CHECK((scaled[i].reference - gamma * plain[i].reference).norm() < 1e-15);
    else
      CHECK(scaled[i].reference == plain[i].reference);
  }
}

TEST_CASE("objective gradient matches central differences") {
  const auto& m = hand();
  std::mt19937_64 rng(5);
  RetargetConfig cfg;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const JointVector q = random_q(m, rng);
    const JointVector q_prev = random_q(m, rng);
    const auto refs = random_refs(rng);
    const auto ev = retarget_objective(m, q, q_prev, refs, cfg);
    for (int i = 0; i < m.dof(); ++i) {
      const double h = 1e-6;
      JointVector a = q, b = q;
      a[i] += h;
      b[i] -= h;
      const double fd = (retarget_objective(m, a, q_prev, refs, cfg).value -
                         retarget_objective(m, b, q_prev, refs, cfg).value) / (2 * h);
      worst = std::max(worst, std::abs(fd - ev.gradient[i]));
    }
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("objective value matches a longhand sum") {
  const auto& m = hand();
  std::mt19937_64 rng(6);
  RetargetConfig cfg;
  for (int t = 0; t < 20; ++t) {
    const JointVector q = random_q(m, rng), q_prev = random_q(m, rng);
    const auto refs = random_refs(rng);
    double expected = 0.0;
    for (const auto& r : refs) {
      const Vec3 v = fk(m, q, r.robot_to).p - fk(m, q, r.robot_from).p;
      const double d = (v - r.reference).norm();
      expected += r.weight * (d <= cfg.huber_delta ? 0.5 * d * d : cfg.huber_delta * (d - 0.5 * cfg.huber_delta));
    }
    expected += cfg.lambda * (q - q_prev).squaredNorm();
    CHECK(retarget_objective(m, q, q_prev, refs, cfg).value == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("solve is a fixed point at a self-consistent target") {
  const auto& m = hand();
  std::mt19937_64 rng(7);
  RetargetConfig cfg = self_consistent_config();
  cfg.lambda = 1e-2;
  for (int t = 0; t < 20; ++t) {
    const JointVector q = random_q(m, rng);
    const auto refs = build_references(normalize_frame(robot_as_human(m, q)), default_reference_layout(), cfg);
    const auto res = solve(m, q, refs, cfg);
    CHECK(res.status == SolveStatus::kConverged);
    CHECK((res.q - q).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("solve recovers self-consistent targets from random warm starts") {
  const auto& m = hand();
  std::mt19937_64 rng(8);
  const RetargetConfig cfg = self_consistent_config();
  int recovered = 0;
  for (int t = 0; t < 50; ++t) {
    const JointVector q_star = random_q(m, rng, 0.05, 0.95);
    const auto refs = build_references(normalize_frame(robot_as_human(m, q_star)), default_reference_layout(), cfg);
    const auto res = solve(m, random_q(m, rng), refs, cfg);
    CHECK(m.within_limits(res.q));
    CHECK(res.iterations <= 200);
    if ((res.q - q_star).cwiseAbs().maxCoeff() <= 1e-3) ++recovered;
  }
  MESSAGE("recovered " << recovered << "/50");
  CHECK(recovered >= 48);
}

TEST_CASE("a dominant temporal weight pins the previous command") {
  const auto& m = hand();
  std::mt19937_64 rng(9);
  RetargetConfig cfg = self_consistent_config();
  cfg.lambda = 1e6;
  for (int t = 0; t < 10; ++t) {
    const JointVector q_prev = random_q(m, rng);
    const auto refs = build_references(normalize_frame(robot_as_human(m, random_q(m, rng))),
                                       default_reference_layout(), cfg);
    const auto res = solve(m, q_prev, refs, cfg);
    CHECK((res.q - q_prev).cwiseAbs().maxCoeff() <= 1e-4);
  }
}

TEST_CASE("solve output respects limits under unreachable references") {
  const auto& m = hand();
  std::mt19937_64 rng(10);
  RetargetConfig cfg;
  for (int t = 0; t < 30; ++t) {
    auto refs = random_refs(rng);
    for (auto& r : refs) r.reference *= 3.0;
    const auto res = solve(m, random_q(m, rng), refs, cfg);
    CHECK(m.within_limits(res.q));
    CHECK(res.iterations <= cfg.max_iterations);
    const Eigen::VectorXd all = m.expand(res.q);
    int ring_pip = -1, ring_dip = -1;
    for (int i = 0; i < static_cast<int>(m.joints().size()); ++i) {
      if (m.joints()[i].name == "ring_pip") ring_pip = i;
      if (m.joints()[i].name == "ring_dip") ring_dip = i;
    }
    REQUIRE(ring_pip >= 0);
    CHECK(all[ring_dip] == doctest::Approx(0.8 * all[ring_pip]));
  }
}

TEST_CASE("session smooths, warm-starts and is deterministic") {
  const auto& m = hand();
  std::mt19937_64 rng(11);
  std::vector<HandFrame> stream;
  JointVector q = m.mid_range();
  for (int k = 0; k < 15; ++k) {
    q = m.clamp(q + 0.05 * (random_q(m, rng) - m.mid_range()));
    HandFrame f = robot_as_human(m, q);
    const Mat3 r = random_rotation(rng);
    for (auto& p : f.landmarks) p = r * p;
    f.t = k / 30.0;
    stream.push_back(f);
  }
  RetargetSession a(m, RetargetConfig{}), b(m, RetargetConfig{});
  JointVector prev_out;
  for (std::size_t k = 0; k < stream.size(); ++k) {
    const JointVector out_a = a.step(stream[k]);
    const JointVector out_b = b.step(stream[k]);
    CHECK(out_a == out_b);
    CHECK(m.within_limits(out_a));
    if (k == 0) {
      CHECK(out_a == a.last_result().q);
    } else {
      CHECK((out_a - ema_filter(a.last_result().q, prev_out, 0.6)).cwiseAbs().maxCoeff() == 0.0);
    }
    prev_out = out_a;
  }
  a.reset();
  CHECK(a.step(stream[0]) == RetargetSession(m, RetargetConfig{}).step(stream[0]));
}

TEST_CASE("config validation") {
  RetargetConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.d_proj = 0.05;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.ema_alpha = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.gamma_lo = 3.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
