// Writes a stream-v1 tracking file synthesized from smooth arm and hand joint
// trajectories: the arm's end-effector path becomes operator wrist motion and
// the hand's landmark frames become the tracked landmarks.

#include <cmath>
#include <iostream>
#include <numbers>

#include <CLI11.hpp>

#include "support/synth.hpp"
#include "teleop/error.hpp"

using namespace teleop;

int main(int argc, char** argv) {
  CLI::App app{"Synthesize a tracking stream from known robot motion"};
  std::string arm_path, hand_path, out_path;
  int frames = 90;
  double rate = 30.0;
  double amplitude = 0.15;
  app.add_option("--arm-model", arm_path, "arm model")->required()->check(CLI::ExistingFile);
  app.add_option("--hand-model", hand_path, "hand model")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out_path, "output stream-v1 file")->required();
  app.add_option("--frames", frames, "number of frames")->check(CLI::PositiveNumber);
  app.add_option("--amplitude", amplitude, "joint excursion around mid-range, fraction of range");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto arm = KinematicModel::load(arm_path);
    const auto hand = KinematicModel::load(hand_path);
    const FrameMap fm = FrameMap::vr_default();
    const Pose wrist0 = synth::operator_wrist();
    const Pose ee0 = fk(arm, arm.mid_range(), "ee");
    const JointVector arm_range = arm.upper() - arm.lower();
    const JointVector hand_range = hand.upper() - hand.lower();

    std::vector<formats::TrackingRecord> recs;
    for (int k = 0; k < frames; ++k) {
      const double t = k / rate;
      // Every joint starts at mid-range with zero velocity.
      const double s = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * t / 3.0));
      JointVector qa = arm.mid_range(), qh = hand.mid_range();
      for (int i = 0; i < arm.dof(); ++i) qa[i] += amplitude * arm_range[i] * s * std::cos(0.7 * i);
      for (int i = 0; i < hand.dof(); ++i) qh[i] += amplitude * hand_range[i] * s * std::sin(1.3 * i + 0.4);
      const Pose wrist = synth::wrist_for_target(wrist0, ee0, fk(arm, qa, "ee"), fm);
      auto rec = synth::hand_record(hand, qh, wrist, t);
      rec.engage = k == 0;
      recs.push_back(rec);
    }
    formats::write_stream(out_path, {}, recs);
    std::cout << "{\"frames\":" << frames << ",\"out\":\"" << out_path << "\"}\n";
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 3;
  }
  return 0;
}
