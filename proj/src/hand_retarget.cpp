#include "teleop/hand_retarget.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>

#include "teleop/error.hpp"

namespace teleop {

void validate(const HandFrame& frame) {
  const Vec3& origin = frame.landmarks[landmark::kWrist];
  for (int i = 0; i < kLandmarkCount; ++i) {
    const Vec3& p = frame.landmarks[i];
    if (!p.allFinite()) throw Error(ErrorCode::kSchema, "landmark " + std::to_string(i) + " is not finite");
    if ((p - origin).norm() > 0.35)
      throw Error(ErrorCode::kSchema, "landmark " + std::to_string(i) + " is more than 0.35 m from the wrist");
  }
}

void RetargetConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kSchema, "retarget config: " + what); };
  if (d_proj < 0 || d_esc < 0 || d_proj > d_esc) fail("need 0 <= d_proj <= d_esc");
  if (!(ema_alpha > 0 && ema_alpha <= 1)) fail("ema_alpha must be in (0, 1]");
  if (gamma_lo > gamma_hi) fail("gamma_lo > gamma_hi");
  if (!(ratio_lo < ratio_hi)) fail("ratio_lo must be below ratio_hi");
  if (!(huber_delta > 0)) fail("huber_delta must be positive");
  if (lambda < 0) fail("lambda must be nonnegative");
  if (weight_finger_projected < 0 || weight_wrist_projected < 0 || weight_free < 0) fail("weights must be nonnegative");
  if (eta_finger <= 0 || eta_wrist <= 0) fail("projected lengths must be positive");
  if (!(tol > 0) || max_iterations < 1) fail("bad solver budget");
  if (!(hand_scale > 0)) fail("hand_scale must be positive");
}

HandFrame normalize_frame(const HandFrame& raw, const RetargetConfig& cfg) {
  validate(raw);
  const Vec3& o = raw.landmarks[landmark::kWrist];
  const Vec3 to_middle = raw.landmarks[landmark::kMiddleMcp] - o;
  const Vec3 to_index = raw.landmarks[landmark::kIndexMcp] - o;
  const Vec3 normal = to_index.cross(to_middle);
  if (normal.norm() < 1e-6 * to_index.norm() * to_middle.norm() || to_middle.norm() == 0.0)
    throw Error(ErrorCode::kDegenerate, "index and middle MCP directions are parallel");
  Mat3 basis;
  basis.col(0) = to_middle.normalized();
  basis.col(2) = normal.normalized();
  basis.col(1) = basis.col(2).cross(basis.col(0));
  HandFrame out = raw;
  for (int i = 0; i < kLandmarkCount; ++i)
    out.landmarks[i] = cfg.hand_scale * (basis.transpose() * (raw.landmarks[i] - o));
  return out;
}

std::vector<RefVectorSpec> default_reference_layout() {
  struct Finger {
    int tip;
    const char* frame;
  };
  static const Finger fingers[] = {{landmark::kThumbTip, "thumb_tip"},
                                   {landmark::kIndexTip, "index_tip"},
                                   {landmark::kMiddleTip, "middle_tip"},
                                   {landmark::kRingTip, "ring_tip"},
                                   {landmark::kPinkyTip, "pinky_tip"}};
  std::vector<RefVectorSpec> out;
  for (const auto& f : fingers) {
    RefVectorSpec s;
    s.kind = RefKind::kWristFinger;
    s.human_from = landmark::kWrist;
    s.human_to = f.tip;
    s.robot_from = "wrist";
    s.robot_to = f.frame;
    out.push_back(s);
  }
  for (int a = 0; a < 5; ++a) {
    for (int b = a + 1; b < 5; ++b) {
      RefVectorSpec s;
      s.kind = RefKind::kFingerFinger;
      s.human_from = fingers[a].tip;
      s.human_to = fingers[b].tip;
      s.robot_from = fingers[a].frame;
      s.robot_to = fingers[b].frame;
      out.push_back(s);
    }
  }
  return out;
}

double pinky_extension_ratio(const HandFrame& frame) {
  const auto& l = frame.landmarks;
  double path = 0.0;
  for (int i = landmark::kPinkyMcp; i < landmark::kPinkyTip; ++i) path += (l[i + 1] - l[i]).norm();
  if (path <= 0.0) return 0.0;
  return (l[landmark::kPinkyTip] - l[landmark::kPinkyMcp]).norm() / path;
}

double pinky_gamma(const HandFrame& frame, const RetargetConfig& cfg) {
  const double r = pinky_extension_ratio(frame);
  const double u = std::clamp((r - cfg.ratio_lo) / (cfg.ratio_hi - cfg.ratio_lo), 0.0, 1.0);
  return cfg.gamma_lo + (cfg.gamma_hi - cfg.gamma_lo) * u;
}

std::vector<RefVectorSpec> build_references(const HandFrame& canonical, const std::vector<RefVectorSpec>& prev,
                                            const RetargetConfig& cfg) {
  const double gamma = cfg.pinky_scaling ? pinky_gamma(canonical, cfg) : 1.0;
  std::vector<RefVectorSpec> out = prev;
  for (RefVectorSpec& s : out) {
    const Vec3 v = canonical.landmarks[s.human_to] - canonical.landmarks[s.human_from];
    const double d = v.norm();
    const bool finger = s.kind == RefKind::kFingerFinger;
    if (d < cfg.d_proj) {
      s.state = RefState::kProjected;
      const double eta = finger ? cfg.eta_finger : cfg.eta_wrist;
      // A zero-length vector has no direction; keep the previous one if any.
      const Vec3 dir = d > 0 ? Vec3(v / d) : (s.reference.norm() > 0 ? Vec3(s.reference.normalized()) : Vec3::UnitX());
      s.reference = dir * eta;
      s.weight = finger ? cfg.weight_finger_projected : cfg.weight_wrist_projected;
    } else if (d > cfg.d_esc) {
      s.state = RefState::kFree;
      s.reference = v * cfg.scale;
      s.weight = cfg.weight_free;
    } else {
      continue;
    }
    if (!finger && s.human_to == landmark::kPinkyTip) s.reference *= gamma;
  }
  return out;
}

double huber(double r, double delta) { return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta); }

namespace {

struct Linearization {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd gauss_newton;  // IRLS approximation of the Hessian
};

Linearization linearize(const KinematicModel& hand, const JointVector& q, const JointVector& q_prev,
                        const std::vector<RefVectorSpec>& refs, const RetargetConfig& cfg, bool want_hessian) {
  const int n = hand.dof();
  const ChainState st = hand.evaluate(q);
  std::map<std::string, std::pair<Vec3, Eigen::Matrix<double, 3, Eigen::Dynamic>>> cache;
  auto lookup = [&](const std::string& f) -> const auto& {
    auto it = cache.find(f);
    if (it == cache.end())
      it = cache.emplace(f, std::make_pair(st.position(f), Eigen::Matrix<double, 3, Eigen::Dynamic>(
                                                                st.jacobian(f).topRows<3>()))).first;
    return it->second;
  };
  Linearization lin;
  lin.gradient = Eigen::VectorXd::Zero(n);
  if (want_hessian) lin.gauss_newton = Eigen::MatrixXd::Zero(n, n);
  for (const RefVectorSpec& s : refs) {
    if (s.weight == 0.0) continue;
    const auto& from = lookup(s.robot_from);
    const auto& to = lookup(s.robot_to);
    const Vec3 res = (to.first - from.first) - s.reference;
    const double r = res.norm();
    lin.value += s.weight * huber(r, cfg.huber_delta);
    // d huber(|res|) / d res = psi * res with psi = min(1, delta / r).
    const double psi = r <= cfg.huber_delta ? 1.0 : cfg.huber_delta / r;
    const Eigen::Matrix<double, 3, Eigen::Dynamic> j = to.second - from.second;
    lin.gradient += s.weight * psi * (j.transpose() * res);
    if (want_hessian) lin.gauss_newton += s.weight * psi * (j.transpose() * j);
  }
  const Eigen::VectorXd dq = q - q_prev;
  lin.value += cfg.lambda * dq.squaredNorm();
  lin.gradient += 2.0 * cfg.lambda * dq;
  if (want_hessian) lin.gauss_newton.diagonal().array() += 2.0 * cfg.lambda;
  return lin;
}

double objective_value(const KinematicModel& hand, const JointVector& q, const JointVector& q_prev,
                       const std::vector<RefVectorSpec>& refs, const RetargetConfig& cfg) {
  return linearize(hand, q, q_prev, refs, cfg, false).value;
}

Eigen::VectorXd projected_gradient(const KinematicModel& hand, const JointVector& q, const Eigen::VectorXd& g) {
  return q - hand.clamp(q - g);
}

// Gauss-Newton step on the variables not pinned at a bound by the gradient.
// Falls back to steepest descent when the system yields no descent direction.
Eigen::VectorXd newton_step(const KinematicModel& hand, const JointVector& q, const Linearization& lin) {
  const int n = hand.dof();
  std::vector<int> free;
  for (int i = 0; i < n; ++i) {
    const bool at_lo = q[i] <= hand.lower()[i] && lin.gradient[i] > 0;
    const bool at_hi = q[i] >= hand.upper()[i] && lin.gradient[i] < 0;
    if (!at_lo && !at_hi) free.push_back(i);
  }
  Eigen::VectorXd step = Eigen::VectorXd::Zero(n);
  if (!free.empty()) {
    const int m = static_cast<int>(free.size());
    Eigen::MatrixXd h(m, m);
    Eigen::VectorXd g(m);
    for (int a = 0; a < m; ++a) {
      g[a] = lin.gradient[free[a]];
      for (int b = 0; b < m; ++b) h(a, b) = lin.gauss_newton(free[a], free[b]);
    }
    h.diagonal().array() += 1e-9 * std::max(1.0, h.diagonal().maxCoeff());
    const Eigen::VectorXd d = h.ldlt().solve(-g);
    for (int a = 0; a < m; ++a) step[free[a]] = d[a];
  }
  if (!step.allFinite() || step.dot(lin.gradient) > 0) step = -lin.gradient;
  return step;
}

}  // namespace

ObjectiveEval retarget_objective(const KinematicModel& hand, const JointVector& q, const JointVector& q_prev,
                                 const std::vector<RefVectorSpec>& refs, const RetargetConfig& cfg) {
  Linearization lin = linearize(hand, q, q_prev, refs, cfg, false);
  return {lin.value, std::move(lin.gradient)};
}

RetargetResult solve(const KinematicModel& hand, const JointVector& q_prev, const std::vector<RefVectorSpec>& refs,
                     const RetargetConfig& cfg) {
  const int n = hand.dof();
  if (q_prev.size() != n) throw Error(ErrorCode::kSchema, "retarget warm start has wrong dimension");
  RetargetResult out;
  JointVector q = hand.clamp(q_prev);
  out.status = SolveStatus::kMaxIterations;
  Linearization lin = linearize(hand, q, q_prev, refs, cfg, true);
  for (out.iterations = 0;; ++out.iterations) {
    const Eigen::VectorXd pg = projected_gradient(hand, q, lin.gradient);
    out.projected_gradient_norm = pg.norm();
    const Eigen::VectorXd step = newton_step(hand, q, lin);
    // Small gradients alone are not enough: free references carry weight 1 and
    // meter-scale residuals, so the gradient can vanish while joints are still
    // milliradians away. The projected step must be small as well.
    const double step_len = (hand.clamp(q + step) - q).cwiseAbs().maxCoeff();
    if (out.projected_gradient_norm <= cfg.tol && step_len <= cfg.tol) {
      out.status = SolveStatus::kConverged;
      break;
    }
    if (out.iterations >= cfg.max_iterations) break;

    // Projected Armijo backtracking; falls back to steepest descent once.
    Eigen::VectorXd dir = step;
    bool moved = false;
    for (int attempt = 0; attempt < 2 && !moved; ++attempt) {
      double alpha = 1.0;
      for (int ls = 0; ls < 40; ++ls, alpha *= 0.5) {
        const JointVector trial = hand.clamp(q + alpha * dir);
        const double decrease = lin.gradient.dot(trial - q);
        const double f = objective_value(hand, trial, q_prev, refs, cfg);
        if (f <= lin.value + 1e-4 * decrease && (trial - q).cwiseAbs().maxCoeff() > 0) {
          q = trial;
          moved = true;
          break;
        }
      }
      if (!moved) dir = -lin.gradient;
    }
    if (!moved) {
      // No representable descent left: stationary to machine precision.
      if (out.projected_gradient_norm <= cfg.tol) out.status = SolveStatus::kConverged;
      break;
    }
    lin = linearize(hand, q, q_prev, refs, cfg, true);
  }
  out.q = q;
  out.objective = lin.value;
  return out;
}

JointVector ema_filter(const JointVector& q_new, const JointVector& q_smoothed_prev, double alpha) {
  if (q_new.size() != q_smoothed_prev.size()) throw Error(ErrorCode::kSchema, "EMA inputs differ in length");
  return alpha * q_new + (1.0 - alpha) * q_smoothed_prev;
}

RetargetSession::RetargetSession(const KinematicModel& hand, RetargetConfig cfg)
    : hand_(&hand), cfg_(std::move(cfg)) {
  cfg_.validate();
  for (const char* f : {"wrist", "thumb_tip", "index_tip", "middle_tip", "ring_tip", "pinky_tip"})
    if (!hand.has_frame(f)) throw Error(ErrorCode::kUnknownFrame, std::string("hand model lacks frame ") + f);
  reset();
}

void RetargetSession::reset() {
  refs_ = default_reference_layout();
  q_prev_ = hand_->mid_range();
  smoothed_ = q_prev_;
  primed_ = false;
  last_ = {};
}

JointVector RetargetSession::step(const HandFrame& raw) {
  const HandFrame canonical = normalize_frame(raw, cfg_);
  refs_ = build_references(canonical, refs_, cfg_);
  last_ = solve(*hand_, q_prev_, refs_, cfg_);
  q_prev_ = last_.q;
  smoothed_ = primed_ ? ema_filter(last_.q, smoothed_, cfg_.ema_alpha) : last_.q;
  primed_ = true;
  return smoothed_;
}

}  // namespace teleop
