#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "support/synth.hpp"
#include "teleop/error.hpp"
#include "teleop/pipeline.hpp"

using namespace teleop;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = TELEOP_FIXTURE_DIR;

SessionConfig base_config() {
  SessionConfig c;
  c.arm_model = kFixtures + "/arm7_generic.model";
  c.hand_model = kFixtures + "/hand12_generic.model";
  c.robot_model = kFixtures + "/arm7_hand12.model";
  return c;
}

// Hand retargeting whose optimum is the hand pose that produced the landmarks.
SessionConfig self_consistent_config() {
  SessionConfig c = base_config();
  c.retarget.d_proj = 0.0;
  c.retarget.d_esc = 0.0;
  c.retarget.pinky_scaling = false;
  c.retarget.lambda = 0.0;
  return c;
}

const KinematicModel& robot() {
  static const KinematicModel m = KinematicModel::load(kFixtures + "/arm7_hand12.model");
  return m;
}

io::ServerConfig det_server() {
  io::ServerConfig cfg;
  cfg.port = 0;
  cfg.deterministic = true;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("teleop_test_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class VectorSource : public FrameSource {
 public:
  explicit VectorSource(std::vector<formats::TrackingRecord> recs) : recs_(std::move(recs)) {}
  std::optional<formats::TrackingRecord> next() override {
    if (i_ >= recs_.size()) return std::nullopt;
    return recs_[i_++];
  }

 private:
  std::vector<formats::TrackingRecord> recs_;
  std::size_t i_ = 0;
};

struct Run {
  RunReport report;
  std::vector<CommandRecord> log;
};

Run run_against_server(const SessionConfig& cfg, FrameSource& source, std::optional<fs::path> record = {}) {
  io::RobotServer server(robot(), det_server());
  server.start();
  TeleopEngine engine(cfg);
  ClientLink link("127.0.0.1", server.port(), true);
  Run run;
  RunOptions opts;
  opts.record_dir = std::move(record);
  opts.command_log = &run.log;
  run.report = run_teleop(engine, source, link, opts);
  return run;
}

bool bit_equal(const JointVector& a, const JointVector& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST_CASE("session-v1 parsing is strict") {
  const auto c = SessionConfig::load(kFixtures + "/session.json");
  CHECK(c.arm_model == fs::path(kFixtures) / "arm7_generic.model");
  CHECK(c.task == "fixture-replay");
  CHECK(c.retarget.ema_alpha == 0.6);
  CHECK(c.frame_map.r == FrameMap::vr_default().r);

  std::ifstream in(kFixtures + "/session.json");
  const auto doc = formats::json::parse(in);
  auto expect_schema = [&](formats::json j, const std::string& part) {
    try {
      SessionConfig::from_json(j, kFixtures);
      FAIL("accepted: " << j.dump());
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kSchema);
      CHECK(std::string(e.what()).find(part) != std::string::npos);
    }
  };
  auto j = doc;
  j["retarget"]["etta_finger"] = 1.0;
  expect_schema(j, "etta_finger");
  j = doc;
  j["arm_model"] = "no_such.model";
  expect_schema(j, "no_such.model");
  j = doc;
  j["format"] = "session-v2";
  expect_schema(j, "format");
  j = doc;
  j["frame_map"] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 2}};
  CHECK_THROWS_AS(SessionConfig::from_json(j, kFixtures), Error);
  j = doc;
  j["frame_map"] = {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}};
  CHECK((SessionConfig::from_json(j, kFixtures).frame_map.r * Vec3(1, 0, 0)).isApprox(Vec3(0, 1, 0)));
}

TEST_CASE("a static hand produces constant actions at the initial configuration") {
  const SessionConfig cfg = self_consistent_config();
  TeleopEngine engine(cfg);
  const JointVector q0 = robot().mid_range();
  engine.start(q0);
  const auto rec = synth::hand_record(engine.hand(), q0.tail(engine.hand_dof()), synth::operator_wrist(), 0.0);
  JointVector first;
  for (int k = 0; k < 30; ++k) {
    auto r = rec;
    r.frame.t = k / 30.0;
    const StepResult s = engine.step(r);
    CHECK(s.ik_ok);
    CHECK(bit_equal(s.action.head(engine.arm_dof()), q0.head(engine.arm_dof())));
    CHECK((s.action.tail(engine.hand_dof()) - q0.tail(engine.hand_dof())).cwiseAbs().maxCoeff() <= 1e-6);
    if (k == 0) first = s.action;
    CHECK((s.action - first).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("fixture stream through a deterministic server gives byte-identical episodes") {
  const auto cfg = SessionConfig::load(kFixtures + "/session.json");
  const auto a = scratch("episode_a"), b = scratch("episode_b");
  StreamFileSource src_a(kFixtures + "/stream_3s.jsonl");
  StreamFileSource src_b(kFixtures + "/stream_3s.jsonl");
  const Run ra = run_against_server(cfg, src_a, a);
  const Run rb = run_against_server(cfg, src_b, b);
  CHECK(ra.report.frames == 90);
  CHECK(ra.report.recorded_steps == 90);
  CHECK_FALSE(ra.report.disconnected);
  CHECK(ra.report.ik_failures == 0);
  CHECK(slurp(a / "steps.jsonl") == slurp(b / "steps.jsonl"));
  CHECK(slurp(a / "meta.json") == slurp(b / "meta.json"));
  CHECK(slurp(a / "steps.jsonl").size() > 0);

  const auto ep = formats::read_episode(a);
  CHECK(ep.meta.n_steps == 90);
  CHECK(ep.meta.action_dim == 19);
  CHECK(ep.meta.episode_id == "fixture-0001");
  for (std::size_t k = 1; k < ep.steps.size(); ++k)
    CHECK(std::abs(ep.steps[k].t - ep.steps[k - 1].t - 1.0 / 30.0) <= 1e-3);
  for (std::size_t k = 0; k < ep.steps.size(); ++k) {
    const JointVector act = Eigen::Map<const JointVector>(ep.steps[k].action.data(), 19);
    CHECK(bit_equal(act, ra.log[k].action));
  }
  // Observed motion respects the plant's velocity bound and joint limits.
  const double v_max = io::default_limits(19)[0].v_max;
  for (std::size_t k = 1; k < ep.steps.size(); ++k) {
    const double dt = ep.steps[k].t - ep.steps[k - 1].t;
    for (int i = 0; i < 19; ++i) {
      CHECK(std::abs(ep.steps[k].q[i] - ep.steps[k - 1].q[i]) <= v_max * dt + 1e-9);
      CHECK(ep.steps[k].q[i] >= robot().lower()[i]);
      CHECK(ep.steps[k].q[i] <= robot().upper()[i]);
    }
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("recording does not perturb the command log") {
  const auto cfg = SessionConfig::load(kFixtures + "/session.json");
  const auto dir = scratch("episode_rec");
  StreamFileSource with(kFixtures + "/stream_3s.jsonl"), without(kFixtures + "/stream_3s.jsonl");
  const Run r1 = run_against_server(cfg, with, dir);
  const Run r2 = run_against_server(cfg, without);
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t k = 0; k < r1.log.size(); ++k) {
    CHECK(r1.log[k].offset_us == r2.log[k].offset_us);
    CHECK(bit_equal(r1.log[k].action, r2.log[k].action));
  }
  fs::remove_all(dir);
}

TEST_CASE("branches are independent") {
  const auto recs = formats::read_stream(kFixtures + "/stream_3s.jsonl");
  const JointVector q0 = robot().mid_range();
  auto run = [&](bool arm, bool hand) {
    SessionConfig cfg = SessionConfig::load(kFixtures + "/session.json");
    cfg.arm_enabled = arm;
    cfg.hand_enabled = hand;
    TeleopEngine engine(cfg);
    engine.start(q0);
    std::vector<JointVector> out;
    for (const auto& r : recs) out.push_back(engine.step(r).action);
    return out;
  };
  const auto both = run(true, true), arm_only = run(true, false), hand_only = run(false, true);
  for (std::size_t k = 0; k < recs.size(); ++k) {
    CHECK(bit_equal(both[k].head(7), arm_only[k].head(7)));
    CHECK(bit_equal(both[k].tail(12), hand_only[k].tail(12)));
    CHECK(bit_equal(arm_only[k].tail(12), q0.tail(12)));
    CHECK(bit_equal(hand_only[k].head(7), q0.head(7)));
  }
}

TEST_CASE("synthesized operator motion is recovered by both branches") {
  const SessionConfig cfg = self_consistent_config();
  TeleopEngine engine(cfg);
  const JointVector q0 = robot().mid_range();
  engine.start(q0);
  const auto& arm = engine.arm();
  const auto& hand = engine.hand();
  const Pose ee0 = fk(arm, q0.head(7), "ee");
  const Pose wrist0 = synth::operator_wrist();

  // Waypoints of a known robot trajectory, each held for 12 frames so the
  // command filter settles before comparison.
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const JointVector arm_range = arm.upper() - arm.lower(), hand_range = hand.upper() - hand.lower();
  JointVector qa = q0.head(7), qh = q0.tail(12);
  int frame = 0;
  double worst_p = 0.0, worst_r = 0.0, worst_hand = 0.0;
  for (int w = 0; w < 12; ++w) {
    for (int i = 0; i < 7; ++i) qa[i] = std::clamp(qa[i] + 0.03 * arm_range[i] * u(rng), arm.lower()[i], arm.upper()[i]);
    for (int i = 0; i < 12; ++i)
      qh[i] = std::clamp(qh[i] + 0.08 * hand_range[i] * u(rng), hand.lower()[i] + 0.05 * hand_range[i],
                         hand.upper()[i] - 0.05 * hand_range[i]);
    const Pose target = fk(arm, qa, "ee");
    const Pose wrist = synth::wrist_for_target(wrist0, ee0, target, cfg.frame_map);
    StepResult s;
    for (int h = 0; h < 12; ++h, ++frame) {
      // The first frame anchors at the start pose.
      const auto rec = synth::hand_record(hand, qh, frame == 0 ? wrist0 : wrist, frame / 30.0);
      s = engine.step(rec);
      REQUIRE(s.ik_ok);
    }
    const IkSolution err = measure(arm, s.action.head(7), target, "ee");
    worst_p = std::max(worst_p, err.position_err);
    worst_r = std::max(worst_r, err.orientation_err);
    worst_hand = std::max(worst_hand, (s.action.tail(12) - qh).cwiseAbs().maxCoeff());
  }
  MESSAGE("position " << worst_p << " m, orientation " << worst_r << " rad, hand " << worst_hand << " rad");
  CHECK(worst_p <= 1e-4);
  CHECK(worst_r <= 1e-3);
  CHECK(worst_hand <= 1e-3);
}

TEST_CASE("unreachable targets hold the arm command") {
  SessionConfig cfg = base_config();
  TeleopEngine engine(cfg);
  const JointVector q0 = robot().mid_range();
  engine.start(q0);
  const auto base = synth::hand_record(engine.hand(), q0.tail(12), synth::operator_wrist(), 0.0);
  CHECK(engine.step(base).ik_ok);
  auto near = base;
  near.frame.t = 1.0 / 30.0;
  near.frame.wrist.p += Vec3(0.0, 0.02, 0.0);
  for (auto& lm : near.frame.landmarks) lm += Vec3(0.0, 0.02, 0.0);
  const StepResult moved = engine.step(near);
  REQUIRE(moved.ik_ok);
  auto far = near;
  far.frame.t = 2.0 / 30.0;
  far.frame.wrist.p += Vec3(0.0, 5.0, 0.0);
  for (auto& lm : far.frame.landmarks) lm += Vec3(0.0, 5.0, 0.0);
  const StepResult held = engine.step(far);
  CHECK_FALSE(held.ik_ok);
  CHECK(bit_equal(held.action.head(7), moved.action.head(7)));
  CHECK(held.action.size() == 19);
}

TEST_CASE("engage re-anchors the operator wrist") {
  SessionConfig cfg = base_config();
  TeleopEngine engine(cfg);
  const JointVector q0 = robot().mid_range();
  engine.start(q0);
  auto rec = synth::hand_record(engine.hand(), q0.tail(12), synth::operator_wrist(), 0.0);
  engine.step(rec);
  rec.frame.t = 0.1;
  rec.frame.wrist.p += Vec3(0.0, 0.03, 0.0);
  for (auto& lm : rec.frame.landmarks) lm += Vec3(0.0, 0.03, 0.0);
  const JointVector moved = engine.step(rec).action.head(7);
  CHECK((moved - q0.head(7)).norm() > 1e-3);
  // Clutch: re-engaging at the displaced pose keeps the arm where it is.
  rec.frame.t = 0.2;
  rec.engage = true;
  CHECK(bit_equal(engine.step(rec).action.head(7), moved));
  CHECK(engine.wrist_anchor().p == rec.frame.wrist.p);
}

TEST_CASE("a lost connection ends the run with the partial episode preserved") {
  const auto cfg = SessionConfig::load(kFixtures + "/session.json");
  const auto dir = scratch("episode_cut");
  auto server = std::make_unique<io::RobotServer>(robot(), det_server());
  server->start();
  TeleopEngine engine(cfg);
  ClientLink link("127.0.0.1", server->port(), true);
  StreamFileSource source(kFixtures + "/stream_3s.jsonl");
  RunOptions opts;
  opts.record_dir = dir;
  int seen = 0;
  opts.on_step = [&](const StepResult&) {
    if (++seen == 20) server->stop();
  };
  const RunReport report = run_teleop(engine, source, link, opts);
  CHECK(report.disconnected);
  CHECK(report.frames >= 20);
  CHECK(report.frames < 90);
  const auto ep = formats::read_episode(dir);
  CHECK(ep.steps.size() == report.recorded_steps);
  CHECK(ep.steps.size() >= 20);
  fs::remove_all(dir);
}

TEST_CASE("per-frame compute stays inside the 30 Hz budget") {
  const auto cfg = SessionConfig::load(kFixtures + "/session.json");
  StreamFileSource source(kFixtures + "/stream_3s.jsonl");
  const Run run = run_against_server(cfg, source);
  MESSAGE("compute ms mean " << run.report.compute_ms_mean << " max " << run.report.compute_ms_max);
  CHECK(run.report.compute_ms_max < 1000.0 / 30.0);
  const auto j = run.report.to_json();
  CHECK(j["frames"] == 90);
  CHECK(j.contains("ik_evaluations"));
}
