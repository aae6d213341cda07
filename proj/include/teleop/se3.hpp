#pragma once

// Quaternion and rigid-transform helpers for the arm branch.
//
// Conventions: Hamilton product, scalar-first storage (w, x, y, z), active
// rotations. A unit quaternion q rotates a vector v as q * (0, v) * q^-1 and
// corresponds to the rotation matrix returned by Quat::matrix().

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <string>

namespace teleop {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct Quat {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quat identity() { return {}; }
  static Quat from_axis_angle(const Vec3& axis, double angle);
  /// Nearest unit quaternion to a rotation matrix (Shepperd branch selection),
  /// canonicalized to w >= 0.
  static Quat from_matrix(const Mat3& r);

  double norm() const;
  Quat normalized() const;
  Quat conjugate() const { return {w, -x, -y, -z}; }
  /// Inverse of a unit quaternion.
  Quat inverse() const { return conjugate(); }
  /// Flips sign so that w >= 0; (q and -q are the same rotation.)
  Quat canonical() const;
  Vec3 vec() const { return {x, y, z}; }

  Mat3 matrix() const;
  Vec3 rotate(const Vec3& v) const;
  /// Rotation angle in [0, pi].
  double angle() const;
  /// Rotation vector (axis * angle), angle in [0, pi].
  Vec3 log() const;

  bool operator==(const Quat&) const = default;
};

/// Hamilton product a ⊗ b, renormalized.
Quat quat_mul(const Quat& a, const Quat& b);
inline Quat operator*(const Quat& a, const Quat& b) { return quat_mul(a, b); }

/// Geodesic distance between two orientations, in [0, pi].
double angular_distance(const Quat& a, const Quat& b);

struct Pose {
  Vec3 p = Vec3::Zero();
  Quat q;

  static Pose identity() { return {}; }
  static Pose from_matrix(const Mat4& m);

  Mat4 matrix() const;
  Pose inverse() const;
  Pose operator*(const Pose& rhs) const;
  Vec3 transform(const Vec3& v) const { return q.rotate(v) + p; }
};

/// Constant orthogonal map from operator (VR) coordinates to robot base
/// coordinates. May be improper (det = -1) when the operator frame is
/// left-handed; intents mapped through it are still proper rotations.
struct FrameMap {
  std::string name;
  Mat3 r = Mat3::Identity();

  /// Left-handed operator frame (x right, y up, z forward) onto a robot base
  /// with x forward, y left, z up. det = -1.
  static FrameMap vr_default();
  /// Throws Error(kSchema) unless r is orthogonal.
  static FrameMap from_matrix(std::string name, const Mat3& r);
  /// Looks up a built-in map by name; throws Error(kSchema) if unknown.
  static FrameMap named(const std::string& name);
};

struct DifferentialIntent {
  Vec3 dp = Vec3::Zero();
  Quat dq;
};

/// Wrist motion since the engage pose: dp = p_t - p_0, dq = q_t ⊗ q_0^-1
/// (a world-frame, left increment).
DifferentialIntent compute_intent(const Pose& wrist_0, const Pose& wrist_t);

/// Re-expresses an intent in robot coordinates: dp -> R dp, R_dq -> R R_dq R^T.
DifferentialIntent map_intent(const DifferentialIntent& intent, const FrameMap& fm);

/// Target end-effector pose: p = p_ee0 + dp, q = dq ⊗ q_ee0.
Pose compose_target(const Pose& ee_0, const DifferentialIntent& mapped);

}  // namespace teleop
