#include "teleop/kinematics.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <sstream>

#include "teleop/error.hpp"

namespace teleop {

namespace {

using nlohmann::json;

Vec3 read_vec3(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::kSchema, what + ": expected 3 numbers");
  Vec3 v;
  for (int i = 0; i < 3; ++i) {
    if (!j[i].is_number()) throw Error(ErrorCode::kSchema, what + ": expected 3 numbers");
    v[i] = j[i].get<double>();
  }
  return v;
}

// Accepts {"xyz": [...], "rpy": [...]} or {"xyz": [...], "quat": [w, x, y, z]}.
Pose read_origin(const json& j, const std::string& what) {
  Pose pose;
  if (j.is_null()) return pose;
  if (!j.is_object()) throw Error(ErrorCode::kSchema, what + ": origin must be an object");
  if (j.contains("xyz")) pose.p = read_vec3(j["xyz"], what + ".xyz");
  if (j.contains("rpy") && j.contains("quat")) {
    throw Error(ErrorCode::kSchema, what + ": give either rpy or quat, not both");
  }
  if (j.contains("rpy")) {
    const Vec3 rpy = read_vec3(j["rpy"], what + ".rpy");
    // Fixed-axis roll, pitch, yaw: R = Rz(yaw) Ry(pitch) Rx(roll).
    pose.q = Quat::from_axis_angle(Vec3::UnitZ(), rpy.z()) *
             Quat::from_axis_angle(Vec3::UnitY(), rpy.y()) *
             Quat::from_axis_angle(Vec3::UnitX(), rpy.x());
  } else if (j.contains("quat")) {
    const auto& a = j["quat"];
    if (!a.is_array() || a.size() != 4) throw Error(ErrorCode::kSchema, what + ".quat: expected 4 numbers");
    const Quat q{a[0].get<double>(), a[1].get<double>(), a[2].get<double>(), a[3].get<double>()};
    if (std::abs(q.norm() - 1.0) > 1e-6) throw Error(ErrorCode::kSchema, what + ".quat: not a unit quaternion");
    pose.q = q.normalized();
  }
  return pose;
}

JointType read_type(const std::string& s, const std::string& joint) {
  if (s == "revolute") return JointType::kRevolute;
  if (s == "prismatic") return JointType::kPrismatic;
  if (s == "fixed") return JointType::kFixed;
  throw Error(ErrorCode::kSchema, "joint '" + joint + "': unknown type '" + s + "'");
}

Mat3 axis_rotation(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

struct RawModel {
  std::string name;
  std::vector<Joint> joints;
  std::vector<std::pair<std::string, FrameRef>> frames;
};

RawModel parse_document(const std::string& text, const std::filesystem::path& base_dir, int depth);

// Grafts `sub` under frame `parent_frame` of `into` ("base" mounts at the root).
void attach(RawModel& into, RawModel sub, const std::string& parent_frame, const Pose& origin) {
  FrameRef mount;
  if (parent_frame != "base") {
    auto it = std::find_if(into.frames.begin(), into.frames.end(),
                           [&](const auto& f) { return f.first == parent_frame; });
    if (it == into.frames.end()) {
      throw Error(ErrorCode::kUnknownFrame, "attach: parent frame '" + parent_frame + "' not found");
    }
    mount = it->second;
  }
  mount.offset = mount.offset * origin;
  const int shift = static_cast<int>(into.joints.size());
  for (auto& j : sub.joints) {
    if (j.parent < 0) {
      j.parent = mount.joint;
      j.origin = mount.offset * j.origin;
    } else {
      j.parent += shift;
    }
    into.joints.push_back(std::move(j));
  }
  for (auto& [name, f] : sub.frames) {
    if (f.joint < 0) {
      f.joint = mount.joint;
      f.offset = mount.offset * f.offset;
    } else {
      f.joint += shift;
    }
    into.frames.emplace_back(name, f);
  }
}

RawModel parse_document(const std::string& text, const std::filesystem::path& base_dir, int depth) {
  if (depth > 4) throw Error(ErrorCode::kSchema, "attach nesting too deep");
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kSchema, std::string("model document is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "model-v1") {
    throw Error(ErrorCode::kSchema, "model document: format must be \"model-v1\"");
  }
  RawModel m;
  m.name = doc.value("name", "unnamed");
  if (!doc.contains("joints") || !doc["joints"].is_array()) {
    throw Error(ErrorCode::kSchema, "model document: missing joints array");
  }

  std::unordered_map<std::string, int> index;
  for (const auto& jj : doc["joints"]) {
    Joint j;
    if (!jj.is_object() || !jj.contains("name") || !jj["name"].is_string()) {
      throw Error(ErrorCode::kSchema, "joint #" + std::to_string(m.joints.size()) + ": missing name");
    }
    j.name = jj["name"].get<std::string>();
    if (index.count(j.name)) throw Error(ErrorCode::kSchema, "joint '" + j.name + "': duplicate name");
    j.type = read_type(jj.value("type", "revolute"), j.name);

    if (!jj.contains("parent")) {
      j.parent = m.joints.empty() ? -1 : static_cast<int>(m.joints.size()) - 1;
    } else if (jj["parent"].is_null() || jj["parent"] == "base") {
      j.parent = -1;
    } else {
      const auto p = jj["parent"].get<std::string>();
      auto it = index.find(p);
      if (it == index.end()) {
        throw Error(ErrorCode::kSchema, "joint '" + j.name + "': parent '" + p + "' must be declared earlier");
      }
      j.parent = it->second;
    }
    j.origin = read_origin(jj.value("origin", json()), "joint '" + j.name + "' origin");

    if (j.type != JointType::kFixed) {
      j.axis = read_vec3(jj.value("axis", json()), "joint '" + j.name + "' axis");
      if (j.axis.norm() < 1e-9) throw Error(ErrorCode::kSchema, "joint '" + j.name + "': zero axis");
      j.axis.normalize();
      if (jj.contains("mimic")) {
        const auto& mm = jj["mimic"];
        Mimic mimic;
        mimic.source = mm.at("joint").get<std::string>();
        mimic.multiplier = mm.value("multiplier", 1.0);
        mimic.offset = mm.value("offset", 0.0);
        j.mimic = mimic;
      }
      if (jj.contains("limits")) {
        const auto& lim = jj["limits"];
        if (!lim.is_array() || lim.size() != 2) {
          throw Error(ErrorCode::kSchema, "joint '" + j.name + "': limits must be [lo, hi]");
        }
        j.limit_lo = lim[0].get<double>();
        j.limit_hi = lim[1].get<double>();
        if (!(j.limit_lo <= j.limit_hi)) {
          throw Error(ErrorCode::kSchema, "joint '" + j.name + "': limit_lo > limit_hi");
        }
      } else if (!j.mimic) {
        throw Error(ErrorCode::kSchema, "joint '" + j.name + "': moving joint needs limits");
      }
    }
    index[j.name] = static_cast<int>(m.joints.size());
    m.joints.push_back(std::move(j));
  }

  if (doc.contains("frames")) {
    if (!doc["frames"].is_object()) throw Error(ErrorCode::kSchema, "frames must be an object");
    for (const auto& [fname, fj] : doc["frames"].items()) {
      FrameRef f;
      const std::string jn = fj.value("joint", std::string("base"));
      if (jn == "base") {
        f.joint = -1;
      } else {
        auto it = index.find(jn);
        if (it == index.end()) {
          throw Error(ErrorCode::kUnknownFrame, "frame '" + fname + "' references unknown joint '" + jn + "'");
        }
        f.joint = it->second;
      }
      f.offset = read_origin(fj, "frame '" + fname + "'");
      m.frames.emplace_back(fname, f);
    }
  }

  if (doc.contains("attach")) {
    for (const auto& a : doc["attach"]) {
      const auto rel = a.at("model").get<std::string>();
      const auto path = base_dir / rel;
      std::ifstream in(path);
      if (!in) throw Error(ErrorCode::kSchema, "attach: cannot open '" + path.string() + "'");
      std::stringstream ss;
      ss << in.rdbuf();
      attach(m, parse_document(ss.str(), path.parent_path(), depth + 1), a.value("parent_frame", std::string("base")),
             read_origin(a.value("origin", json()), "attach origin"));
    }
  }
  return m;
}

}  // namespace

KinematicModel KinematicModel::from_text(const std::string& text, const std::filesystem::path& base_dir) {
  RawModel raw = parse_document(text, base_dir, 0);
  KinematicModel model;
  model.name_ = raw.name;
  model.joints_ = std::move(raw.joints);
  for (auto& [name, f] : raw.frames) {
    if (model.frames_.count(name)) throw Error(ErrorCode::kSchema, "frame '" + name + "': duplicate name");
    model.frames_[name] = f;
    model.frame_order_.push_back(name);
  }
  model.finalize();
  return model;
}

KinematicModel KinematicModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open model '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), path.parent_path());
}

void KinematicModel::finalize() {
  const int n = static_cast<int>(joints_.size());
  std::unordered_map<std::string, int> index;
  for (int i = 0; i < n; ++i) {
    if (index.count(joints_[i].name)) throw Error(ErrorCode::kSchema, "joint '" + joints_[i].name + "': duplicate name");
    index[joints_[i].name] = i;
  }

  // Resolve mimic sources and order mimics so every source precedes its users.
  std::vector<int> source(n, -1);
  for (int i = 0; i < n; ++i) {
    const auto& j = joints_[i];
    if (!j.mimic) continue;
    auto it = index.find(j.mimic->source);
    if (it == index.end()) {
      throw Error(ErrorCode::kSchema, "joint '" + j.name + "': mimic source '" + j.mimic->source + "' not found");
    }
    if (joints_[it->second].type == JointType::kFixed) {
      throw Error(ErrorCode::kSchema, "joint '" + j.name + "': mimic source '" + j.mimic->source + "' is fixed");
    }
    source[i] = it->second;
  }
  std::vector<int> state(n, 0);  // 0 = unvisited, 1 = on stack, 2 = done
  mimic_order_.clear();
  std::function<void(int)> visit = [&](int i) {
    if (state[i] == 2) return;
    if (state[i] == 1) throw Error(ErrorCode::kCyclicMimic, "mimic cycle through joint '" + joints_[i].name + "'");
    state[i] = 1;
    if (source[i] >= 0) visit(source[i]);
    state[i] = 2;
    if (source[i] >= 0) mimic_order_.push_back(i);
  };
  for (int i = 0; i < n; ++i) visit(i);
  mimic_source_ = source;

  actuated_.clear();
  actuated_names_.clear();
  column_.assign(n, -1);
  gain_.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    if (joints_[i].type == JointType::kFixed || joints_[i].mimic) continue;
    column_[i] = static_cast<int>(actuated_.size());
    gain_[i] = 1.0;
    actuated_.push_back(i);
    actuated_names_.push_back(joints_[i].name);
  }
  for (int i : mimic_order_) {
    column_[i] = column_[source[i]];
    gain_[i] = joints_[i].mimic->multiplier * gain_[source[i]];
  }

  lower_.resize(dof());
  upper_.resize(dof());
  for (int k = 0; k < dof(); ++k) {
    lower_[k] = joints_[actuated_[k]].limit_lo;
    upper_[k] = joints_[actuated_[k]].limit_hi;
  }

  origin_r_.clear();
  for (const auto& j : joints_) origin_r_.push_back(j.origin.q.matrix());

  chain_.assign(n, {});
  for (int i = 0; i < n; ++i) {
    if (joints_[i].parent >= i) throw Error(ErrorCode::kSchema, "joint '" + joints_[i].name + "': parent must precede child");
    std::vector<int> c;
    for (int k = i; k >= 0; k = joints_[k].parent) {
      if (joints_[k].type != JointType::kFixed) c.push_back(k);
    }
    std::reverse(c.begin(), c.end());
    chain_[i] = std::move(c);
  }

  for (const auto& [name, f] : frames_) {
    if (f.joint >= n) throw Error(ErrorCode::kUnknownFrame, "frame '" + name + "' references a missing joint");
  }
}

int KinematicModel::moving_count() const {
  return static_cast<int>(std::count_if(joints_.begin(), joints_.end(),
                                        [](const Joint& j) { return j.type != JointType::kFixed; }));
}

int KinematicModel::actuated_index(const std::string& joint_name) const {
  auto it = std::find(actuated_names_.begin(), actuated_names_.end(), joint_name);
  return it == actuated_names_.end() ? -1 : static_cast<int>(it - actuated_names_.begin());
}

JointVector KinematicModel::clamp(const JointVector& q) const { return q.cwiseMax(lower_).cwiseMin(upper_); }

bool KinematicModel::within_limits(const JointVector& q, double slack) const {
  return q.size() == dof() && ((q - lower_).array() >= -slack).all() && ((upper_ - q).array() >= -slack).all();
}

const FrameRef& KinematicModel::frame(const std::string& name) const {
  auto it = frames_.find(name);
  if (it == frames_.end()) throw Error(ErrorCode::kUnknownFrame, "unknown frame '" + name + "'");
  return it->second;
}

std::vector<std::string> KinematicModel::frame_names() const { return frame_order_; }

Eigen::VectorXd KinematicModel::expand(const JointVector& q) const {
  if (q.size() != dof()) {
    throw Error(ErrorCode::kSchema, "joint vector has " + std::to_string(q.size()) + " entries, model '" + name_ +
                                        "' expects " + std::to_string(dof()));
  }
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(joints_.size()));
  for (int k = 0; k < dof(); ++k) v[actuated_[k]] = q[k];
  for (int i : mimic_order_) {
    const auto& m = *joints_[i].mimic;
    v[i] = m.multiplier * v[mimic_source_[i]] + m.offset;
  }
  return v;
}

ChainState KinematicModel::evaluate(const JointVector& q) const {
  ChainState s;
  evaluate(q, s);
  return s;
}

void KinematicModel::evaluate(const JointVector& q, ChainState& s) const {
  if (q.size() != dof()) expand(q);  // throws the size error
  s.model_ = this;
  s.values_.setZero(static_cast<Eigen::Index>(joints_.size()));
  for (int k = 0; k < dof(); ++k) s.values_[actuated_[k]] = q[k];
  for (int i : mimic_order_) {
    const auto& m = *joints_[i].mimic;
    s.values_[i] = m.multiplier * s.values_[mimic_source_[i]] + m.offset;
  }
  s.world_.resize(joints_.size());
  for (size_t i = 0; i < joints_.size(); ++i) {
    const Joint& j = joints_[i];
    const double v = s.values_[static_cast<Eigen::Index>(i)];
    ChainState::Xform local{origin_r_[i], j.origin.p};
    switch (j.type) {
      case JointType::kRevolute:
        local.r = local.r * axis_rotation(j.axis, v);
        break;
      case JointType::kPrismatic:
        local.p += local.r * (j.axis * v);
        break;
      case JointType::kFixed:
        break;
    }
    if (j.parent < 0) {
      s.world_[i] = local;
    } else {
      const auto& pw = s.world_[j.parent];
      s.world_[i] = {pw.r * local.r, pw.r * local.p + pw.p};
    }
  }
}

ChainState::Xform ChainState::frame_xform(const FrameRef& f) const {
  const Mat3 off_r = f.offset.q.matrix();
  if (f.joint < 0) return {off_r, f.offset.p};
  const auto& w = world_[f.joint];
  return {w.r * off_r, w.r * f.offset.p + w.p};
}

Pose ChainState::pose(const std::string& frame) const { return pose(model_->frame(frame)); }

Pose ChainState::pose(const FrameRef& frame) const {
  const auto x = frame_xform(frame);
  return {x.p, Quat::from_matrix(x.r)};
}

Pose ChainState::joint_pose(int index) const {
  const auto& w = world_.at(static_cast<std::size_t>(index));
  return {w.p, Quat::from_matrix(w.r)};
}

Vec3 ChainState::position(const std::string& frame) const { return frame_xform(model_->frame(frame)).p; }

Jacobian ChainState::jacobian(const std::string& frame) const { return jacobian(model_->frame(frame)); }

Jacobian ChainState::jacobian(const FrameRef& f) const {
  Jacobian jac;
  jacobian(f, jac);
  return jac;
}

void ChainState::jacobian(const FrameRef& f, Jacobian& jac) const {
  jac.setZero(6, model_->dof());
  if (f.joint < 0) return;
  const Vec3 p = frame_xform(f).p;
  for (int k : model_->chain_[f.joint]) {
    const int col = model_->column_[k];
    if (col < 0) continue;
    const double g = model_->gain_[k];
    const auto& w = world_[k];
    const Vec3 axis = w.r * model_->joints_[k].axis;
    if (model_->joints_[k].type == JointType::kRevolute) {
      jac.block<3, 1>(0, col) += g * axis.cross(p - w.p);
      jac.block<3, 1>(3, col) += g * axis;
    } else {
      jac.block<3, 1>(0, col) += g * axis;
    }
  }
}

Pose fk(const KinematicModel& model, const JointVector& q, const std::string& frame) {
  model.frame(frame);
  return model.evaluate(q).pose(frame);
}

Jacobian jacobian(const KinematicModel& model, const JointVector& q, const std::string& frame) {
  model.frame(frame);
  return model.evaluate(q).jacobian(frame);
}

double manipulability(const Eigen::MatrixXd& j) {
  const double det = (j * j.transpose()).determinant();
  return det > 0.0 ? std::sqrt(det) : 0.0;
}

double manipulability(const KinematicModel& model, const JointVector& q, const std::string& frame,
                      std::span<const int> rows) {
  const Jacobian full = jacobian(model, q, frame);
  if (rows.empty()) return manipulability(Eigen::MatrixXd(full));
  Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), full.cols());
  for (size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = full.row(rows[r]);
  return manipulability(sub);
}

Eigen::Matrix<double, 6, 1> twist_between(const Pose& from, const Pose& to) {
  Eigen::Matrix<double, 6, 1> t;
  t.head<3>() = to.p - from.p;
  t.tail<3>() = quat_mul(to.q, from.q.inverse()).log();
  return t;
}

}  // namespace teleop
