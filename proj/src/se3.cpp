#include "teleop/se3.hpp"

#include <algorithm>
#include <cmath>

#include "teleop/error.hpp"

namespace teleop {

Quat Quat::from_axis_angle(const Vec3& axis, double angle) {
  const double n = axis.norm();
  if (n == 0.0) return identity();
  const Vec3 u = axis / n;
  const double s = std::sin(0.5 * angle);
  return Quat{std::cos(0.5 * angle), u.x() * s, u.y() * s, u.z() * s}.normalized();
}

Quat Quat::from_matrix(const Mat3& r) {
  // Shepperd: pick the largest of (trace, r00, r11, r22) to avoid dividing by
  // a small number.
  const double tr = r.trace();
  Quat q;
  if (tr >= r(0, 0) && tr >= r(1, 1) && tr >= r(2, 2)) {
    const double s = std::sqrt(1.0 + tr) * 2.0;
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
    const double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) >= r(2, 2)) {
    const double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    const double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return q.normalized().canonical();
}

double Quat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quat Quat::normalized() const {
  const double n = norm();
  return {w / n, x / n, y / n, z / n};
}

Quat Quat::canonical() const {
  if (w < 0.0) return {-w, -x, -y, -z};
  return *this;
}

Mat3 Quat::matrix() const {
  Mat3 m;
  const double xx = x * x, yy = y * y, zz = z * z;
  const double xy = x * y, xz = x * z, yz = y * z;
  const double wx = w * x, wy = w * y, wz = w * z;
  m << 1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
       2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
       2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy);
  return m;
}

Vec3 Quat::rotate(const Vec3& v) const {
  const Vec3 u = vec();
  const Vec3 t = 2.0 * u.cross(v);
  return v + w * t + u.cross(t);
}

double Quat::angle() const {
  const double s = vec().norm();
  return 2.0 * std::atan2(s, std::abs(w));
}

Vec3 Quat::log() const {
  const Quat c = canonical();
  const Vec3 u = c.vec();
  const double s = u.norm();
  if (s < 1e-300) return Vec3::Zero();
  return u / s * (2.0 * std::atan2(s, c.w));
}

Quat quat_mul(const Quat& a, const Quat& b) {
  return Quat{a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
              a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
              a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
              a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w}
      .normalized();
}

double angular_distance(const Quat& a, const Quat& b) {
  // atan2 form (inside angle()) stays accurate for tiny angles where acos does not.
  return quat_mul(a.inverse(), b).angle();
}

Pose Pose::from_matrix(const Mat4& m) {
  return {m.block<3, 1>(0, 3), Quat::from_matrix(m.block<3, 3>(0, 0))};
}

Mat4 Pose::matrix() const {
  Mat4 m = Mat4::Identity();
  m.block<3, 3>(0, 0) = q.matrix();
  m.block<3, 1>(0, 3) = p;
  return m;
}

Pose Pose::inverse() const {
  const Quat qi = q.inverse();
  return {-qi.rotate(p), qi};
}

Pose Pose::operator*(const Pose& rhs) const { return {q.rotate(rhs.p) + p, quat_mul(q, rhs.q)}; }

FrameMap FrameMap::vr_default() {
  Mat3 r;
  r << 0, 0, 1,
      -1, 0, 0,
       0, 1, 0;
  return {"vr-default", r};
}

FrameMap FrameMap::from_matrix(std::string name, const Mat3& r) {
  const double ortho = (r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
  // Improper maps (det = -1) are allowed: they convert a left-handed operator
  // frame, and R M R^T is still a proper rotation either way.
  if (ortho > 1e-12 || std::abs(std::abs(r.determinant()) - 1.0) > 1e-12) {
    throw Error(ErrorCode::kSchema, "frame map '" + name + "' is not orthogonal");
  }
  return {std::move(name), r};
}

FrameMap FrameMap::named(const std::string& name) {
  if (name == "vr-default") return vr_default();
  if (name == "identity") return {"identity", Mat3::Identity()};
  throw Error(ErrorCode::kSchema, "unknown frame map '" + name + "'");
}

DifferentialIntent compute_intent(const Pose& wrist_0, const Pose& wrist_t) {
  return {wrist_t.p - wrist_0.p, quat_mul(wrist_t.q, wrist_0.q.inverse())};
}

DifferentialIntent map_intent(const DifferentialIntent& intent, const FrameMap& fm) {
  const Mat3 rot = fm.r * intent.dq.matrix() * fm.r.transpose();
  return {fm.r * intent.dp, Quat::from_matrix(rot)};
}

Pose compose_target(const Pose& ee_0, const DifferentialIntent& mapped) {
  return {ee_0.p + mapped.dp, quat_mul(mapped.dq, ee_0.q)};
}

}  // namespace teleop
