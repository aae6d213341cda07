#pragma once

// Hand branch: tracked landmarks -> robot hand joint targets.
//
// Per frame: landmarks are re-expressed in a canonical hand frame, a set of
// reference vectors (wrist->fingertip and fingertip->fingertip) is rebuilt with
// proximity-dependent projection, and the joint vector minimizing
//
//   sum_i w_i huber(|v_i(q) - ref_i|) + lambda |q - q_prev|^2,  lo <= q <= hi
//
// is found by a projected Gauss-Newton method. An EMA smooths the output.
//
// Landmarks use the 21-point MediaPipe ordering: 0 wrist, thumb 1-4, index 5-8,
// middle 9-12, ring 13-16, pinky 17-20 (MCP-like joint first, tip last).

#include <array>
#include <string>
#include <vector>

#include "teleop/kinematics.hpp"

namespace teleop {

constexpr int kLandmarkCount = 21;

namespace landmark {
constexpr int kWrist = 0;
constexpr int kThumbTip = 4;
constexpr int kIndexMcp = 5;
constexpr int kIndexTip = 8;
constexpr int kMiddleMcp = 9;
constexpr int kMiddleTip = 12;
constexpr int kRingTip = 16;
constexpr int kPinkyMcp = 17;
constexpr int kPinkyTip = 20;
}  // namespace landmark

struct HandFrame {
  double t = 0.0;
  Pose wrist;
  std::array<Vec3, kLandmarkCount> landmarks{};
};

/// Throws Error(kSchema) on non-finite landmarks or any landmark farther than
/// 0.35 m from landmark 0.
void validate(const HandFrame& frame);

enum class RefKind { kWristFinger, kFingerFinger };
enum class RefState { kFree, kProjected };

struct RefVectorSpec {
  RefKind kind = RefKind::kWristFinger;
  int human_from = 0;
  int human_to = 0;
  std::string robot_from;
  std::string robot_to;
  RefState state = RefState::kFree;
  double weight = 1.0;
  Vec3 reference = Vec3::Zero();
};

struct RetargetConfig {
  double d_proj = 0.03;
  double d_esc = 0.03;
  double eta_finger = 1e-4;
  double eta_wrist = 3e-2;
  double scale = 1.0;  // s, applied to free references
  double weight_finger_projected = 400.0;
  double weight_wrist_projected = 200.0;
  double weight_free = 1.0;
  double huber_delta = 0.02;
  double lambda = 1e-2;
  double ema_alpha = 0.6;
  bool pinky_scaling = true;
  double gamma_lo = 1.2;
  double gamma_hi = 2.2;
  double ratio_lo = 0.3;
  double ratio_hi = 0.95;
  double tol = 1e-6;
  int max_iterations = 200;
  double hand_scale = 1.0;

  /// Throws Error(kSchema) when an invariant is violated.
  void validate() const;
};

/// Canonical frame: origin at landmark 0, x toward the middle MCP, z along
/// (index MCP - wrist) x (middle MCP - wrist), y = z x x. Landmarks are scaled
/// by cfg.hand_scale. Throws Error(kDegenerate) if the two MCP directions are
/// parallel within 1e-6.
HandFrame normalize_frame(const HandFrame& raw, const RetargetConfig& cfg = {});

/// The 15 reference slots (five wrist->tip, ten tip pairs) mapped onto the
/// robot frames "wrist" and "<finger>_tip", all free with zero reference.
std::vector<RefVectorSpec> default_reference_layout();

/// Updates every slot from a canonical frame. `prev` supplies the layout and
/// the state kept when a distance falls between d_proj and d_esc.
std::vector<RefVectorSpec> build_references(const HandFrame& canonical, const std::vector<RefVectorSpec>& prev,
                                            const RetargetConfig& cfg);

/// Pinky extension ratio |tip - mcp| / (sum of the three pinky segment
/// lengths in the same frame).
double pinky_extension_ratio(const HandFrame& frame);
double pinky_gamma(const HandFrame& frame, const RetargetConfig& cfg);

double huber(double r, double delta);

struct ObjectiveEval {
  double value = 0.0;
  Eigen::VectorXd gradient;
};

ObjectiveEval retarget_objective(const KinematicModel& hand, const JointVector& q, const JointVector& q_prev,
                                 const std::vector<RefVectorSpec>& refs, const RetargetConfig& cfg);

enum class SolveStatus { kConverged, kMaxIterations };

struct RetargetResult {
  JointVector q;
  SolveStatus status = SolveStatus::kConverged;
  int iterations = 0;
  double objective = 0.0;
  double projected_gradient_norm = 0.0;
};

/// Box-constrained minimization warm-started at q_prev. Never throws on
/// non-convergence; the best iterate is returned with kMaxIterations.
RetargetResult solve(const KinematicModel& hand, const JointVector& q_prev, const std::vector<RefVectorSpec>& refs,
                     const RetargetConfig& cfg);

JointVector ema_filter(const JointVector& q_new, const JointVector& q_smoothed_prev, double alpha);

/// Per-stream retargeting state: reference states, warm start and EMA memory.
class RetargetSession {
 public:
  RetargetSession(const KinematicModel& hand, RetargetConfig cfg);

  /// Full per-frame pipeline; returns the smoothed joint command.
  JointVector step(const HandFrame& raw);
  void reset();

  const std::vector<RefVectorSpec>& references() const { return refs_; }
  const RetargetResult& last_result() const { return last_; }
  const RetargetConfig& config() const { return cfg_; }

 private:
  const KinematicModel* hand_;
  RetargetConfig cfg_;
  std::vector<RefVectorSpec> refs_;
  JointVector q_prev_;
  JointVector smoothed_;
  bool primed_ = false;
  RetargetResult last_;
};

}  // namespace teleop
