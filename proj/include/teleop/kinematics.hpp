#pragma once

// Tree-structured kinematic models (serial arms and multi-finger hands) with
// forward kinematics, geometric Jacobians and Yoshikawa manipulability.
//
// Models are described by `model-v1` documents (see docs/model-v1.md). Joint
// values are addressed through the *actuated* vector: moving joints that are
// not mimics, in document order. Mimic joints are expanded as
// multiplier * source + offset before any kinematic evaluation.

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "teleop/se3.hpp"

namespace teleop {

using JointVector = Eigen::VectorXd;
/// Rows 0-2 linear velocity, rows 3-5 angular velocity, base frame.
using Jacobian = Eigen::Matrix<double, 6, Eigen::Dynamic>;

enum class JointType { kRevolute, kPrismatic, kFixed };

struct Mimic {
  std::string source;
  double multiplier = 1.0;
  double offset = 0.0;
};

struct Joint {
  std::string name;
  int parent = -1;  // index into joints, -1 = model base
  JointType type = JointType::kRevolute;
  Pose origin;      // parent frame -> joint frame at zero displacement
  Vec3 axis = Vec3::UnitZ();
  double limit_lo = 0.0;
  double limit_hi = 0.0;
  std::optional<Mimic> mimic;
};

/// A named frame rigidly attached to a joint's moving frame (or the base).
struct FrameRef {
  int joint = -1;
  Pose offset;
};

class ChainState;

class KinematicModel {
 public:
  /// Parses a model-v1 document. `base_dir` resolves relative `attach` paths.
  static KinematicModel from_text(const std::string& text,
                                  const std::filesystem::path& base_dir = {});
  static KinematicModel load(const std::filesystem::path& path);

  const std::string& name() const { return name_; }
  const std::vector<Joint>& joints() const { return joints_; }
  int dof() const { return static_cast<int>(actuated_.size()); }
  /// Number of non-fixed joints, mimics included.
  int moving_count() const;
  const std::vector<std::string>& actuated_names() const { return actuated_names_; }
  /// Position of an actuated joint name in the actuated vector, or -1.
  int actuated_index(const std::string& joint_name) const;

  const JointVector& lower() const { return lower_; }
  const JointVector& upper() const { return upper_; }
  JointVector mid_range() const { return 0.5 * (lower_ + upper_); }
  JointVector clamp(const JointVector& q) const;
  bool within_limits(const JointVector& q, double slack = 0.0) const;

  bool has_frame(const std::string& frame) const { return frames_.count(frame) != 0; }
  const FrameRef& frame(const std::string& name) const;
  std::vector<std::string> frame_names() const;

  /// Values of every joint (fixed joints read 0), mimics expanded.
  Eigen::VectorXd expand(const JointVector& q) const;

  ChainState evaluate(const JointVector& q) const;
  /// Same, reusing `out`'s storage.
  void evaluate(const JointVector& q, ChainState& out) const;

 private:
  friend class ChainState;
  void finalize();

  std::string name_;
  std::vector<Joint> joints_;
  std::unordered_map<std::string, FrameRef> frames_;
  std::vector<std::string> frame_order_;
  std::vector<int> actuated_;          // joint indices of actuated joints
  std::vector<std::string> actuated_names_;
  std::vector<int> mimic_order_;       // mimic joints, sources first
  std::vector<int> mimic_source_;      // per joint: mimic source index, -1 if none
  std::vector<Mat3> origin_r_;
  std::vector<int> column_;            // per joint: actuated column, -1 if none
  std::vector<double> gain_;           // per joint: d(value)/d(column)
  std::vector<std::vector<int>> chain_;  // per joint: moving ancestors incl. self
  JointVector lower_;
  JointVector upper_;
};

/// World transforms of every joint frame for one configuration.
class ChainState {
 public:
  Pose pose(const std::string& frame) const;
  Pose pose(const FrameRef& frame) const;
  /// World pose of joint `index` (see KinematicModel::joints) after its motion.
  Pose joint_pose(int index) const;
  Vec3 position(const std::string& frame) const;
  Jacobian jacobian(const std::string& frame) const;
  Jacobian jacobian(const FrameRef& frame) const;
  void jacobian(const FrameRef& frame, Jacobian& out) const;
  const KinematicModel& model() const { return *model_; }

 private:
  friend class KinematicModel;
  struct Xform {
    Mat3 r;
    Vec3 p;
  };
  Xform frame_xform(const FrameRef& frame) const;

  const KinematicModel* model_ = nullptr;
  std::vector<Xform> world_;  // per joint, after joint motion
  Eigen::VectorXd values_;    // per joint, mimics expanded
};

Pose fk(const KinematicModel& model, const JointVector& q, const std::string& frame);
Jacobian jacobian(const KinematicModel& model, const JointVector& q, const std::string& frame);

/// sqrt(det(J J^T)) over the selected Jacobian rows (all six by default).
/// Round-off negatives clamp to 0.
double manipulability(const KinematicModel& model, const JointVector& q,
                      const std::string& frame, std::span<const int> rows = {});
double manipulability(const Eigen::MatrixXd& j);

/// Six-vector (dp, rotation vector) taking pose `from` to pose `to`, base frame.
Eigen::Matrix<double, 6, 1> twist_between(const Pose& from, const Pose& to);

}  // namespace teleop
