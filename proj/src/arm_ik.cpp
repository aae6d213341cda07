#include "teleop/arm_ik.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "teleop/brent.hpp"
#include "teleop/error.hpp"

namespace teleop {

namespace {

constexpr double kInfeasiblePenalty = 1e3;

// Deterministic sign patterns for spread seeds, one row per seed.
constexpr int kSpread[8][6] = {
    {1, 1, 1, 1, 1, 1},   {-1, 1, -1, 1, -1, 1}, {1, -1, 1, -1, 1, -1}, {-1, -1, 1, 1, -1, -1},
    {1, 1, -1, -1, 1, 1}, {-1, 1, 1, -1, -1, 1}, {1, -1, -1, 1, 1, -1}, {-1, -1, -1, -1, -1, -1},
};

int redundant_index(const KinematicModel& model) { return model.dof() - 1; }

Eigen::Matrix<double, 6, 1> pose_error(const Pose& current, const Pose& target) {
  Eigen::Matrix<double, 6, 1> e;
  e.head<3>() = target.p - current.p;
  e.tail<3>() = (target.q * current.q.inverse()).log();
  return e;
}

// One damped least-squares run over the first `m` joints, the rest locked.
// Returns the final configuration; convergence is judged by the caller.
JointVector dls_run(const KinematicModel& model, const Pose& target, JointVector q, const IkConfig& cfg, int m) {
  const FrameRef& ee = model.frame(cfg.ee_frame);
  const double lambda2 = cfg.dls_damping * cfg.dls_damping;
  const double settle_pos = cfg.settle_fraction * cfg.position_tol;
  const double settle_ori = cfg.settle_fraction * cfg.orientation_tol;
  double best = std::numeric_limits<double>::infinity();
  int stalled = 0;
  Eigen::VectorXd dq(m);
  ChainState st;
  Jacobian full;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    model.evaluate(q, st);
    const Eigen::Matrix<double, 6, 1> e = pose_error(st.pose(ee), target);
    const double norm = e.norm();
    if (norm < 1e-12) break;
    const double ep = e.head<3>().norm(), eo = e.tail<3>().norm();
    if (ep <= settle_pos && eo <= settle_ori) break;
    if (norm < 0.9999 * best) {
      best = norm;
      stalled = 0;
    } else if (++stalled >= 6) {
      break;
    }
    st.jacobian(ee, full);
    const auto j = full.leftCols(m);
    Eigen::Matrix<double, 6, 6> a = lambda2 * Eigen::Matrix<double, 6, 6>::Identity();
    a += j.lazyProduct(j.transpose());
    dq.noalias() = j.transpose() * a.ldlt().solve(e);
    const double biggest = dq.cwiseAbs().maxCoeff();
    if (biggest > cfg.step_cap) dq *= cfg.step_cap / biggest;
    q.head(m) += dq;
    q = q.cwiseMax(model.lower()).cwiseMin(model.upper());
  }
  return q;
}

}  // namespace

RedundancyWeights RedundancyWeights::defaults(const KinematicModel& model) {
  RedundancyWeights w;
  const Eigen::VectorXd range = model.upper() - model.lower();
  w.W_n = range.cwiseInverse();
  w.W_c = w.W_n;
  return w;
}

IkSolution measure(const KinematicModel& model, const JointVector& q, const Pose& target,
                   const std::string& frame) {
  const Pose p = fk(model, q, frame);
  IkSolution s;
  s.q = q;
  s.position_err = (p.p - target.p).norm();
  s.orientation_err = angular_distance(p.q, target.q);
  return s;
}

std::vector<IkSolution> solve_fixed_q7(const KinematicModel& model, const Pose& target, double q7,
                                       const std::vector<JointVector>& seeds, const IkConfig& cfg) {
  const int r = redundant_index(model);
  std::vector<IkSolution> out;
  if (q7 < model.lower()[r] || q7 > model.upper()[r]) return out;
  std::vector<JointVector> started;
  for (JointVector seed : seeds) {
    if (seed.size() != model.dof()) throw Error(ErrorCode::kSchema, "IK seed has wrong dimension");
    seed[r] = q7;
    seed = model.clamp(seed);
    // An identical start repeats an identical run.
    if (std::find(started.begin(), started.end(), seed) != started.end()) continue;
    started.push_back(seed);
    const JointVector q = dls_run(model, target, seed, cfg, r);
    IkSolution s = measure(model, q, target, cfg.ee_frame);
    if (s.position_err > cfg.position_tol || s.orientation_err > cfg.orientation_tol) continue;
    if (!model.within_limits(q)) continue;
    const bool dup = std::any_of(out.begin(), out.end(), [&](const IkSolution& o) {
      return (o.q - q).cwiseAbs().maxCoeff() <= cfg.dedup_tol;
    });
    if (!dup) out.push_back(std::move(s));
  }
  return out;
}

double redundancy_objective(const KinematicModel& model, const JointVector& q, const IkRequest& req,
                            const RedundancyWeights& w, const std::string& frame) {
  const double m = manipulability(model, q, frame);
  const double neutral = w.W_n.cwiseProduct(q - req.q_neutral).norm();
  const double cont = w.W_c.cwiseProduct(q - req.q_prev).norm();
  return w.w_m * m - w.w_n * neutral - w.w_c * cont;
}

std::vector<JointVector> resolve_seeds(const KinematicModel& model, const IkRequest& req, const IkConfig& cfg) {
  std::vector<JointVector> seeds{model.clamp(req.q_prev), model.clamp(req.q_neutral)};
  const JointVector mid = model.mid_range();
  const JointVector range = model.upper() - model.lower();
  const int extra = std::clamp(cfg.extra_seeds, 0, 8);
  for (int k = 0; k < extra; ++k) {
    JointVector s = mid;
    for (int i = 0; i < std::min(6, model.dof() - 1); ++i) s[i] += 0.3 * range[i] * kSpread[k][i];
    seeds.push_back(model.clamp(s));
  }
  return seeds;
}

namespace {

std::optional<double> best_at(const KinematicModel& model, const IkRequest& req, const RedundancyWeights& w,
                              const IkConfig& cfg, double q7, const std::vector<JointVector>& seeds,
                              IkSolution* best) {
  const auto cands = solve_fixed_q7(model, req.target, q7, seeds, cfg);
  std::optional<double> top;
  double top_dist = 0.0;
  for (const IkSolution& c : cands) {
    if (manipulability(model, c.q, cfg.ee_frame) < cfg.min_manipulability) continue;
    const double j = redundancy_objective(model, c.q, req, w, cfg.ee_frame);
    const double dist = (c.q - req.q_prev).cwiseAbs().maxCoeff();
    if (!top || j > *top || (j == *top && dist < top_dist)) {
      top = j;
      top_dist = dist;
      if (best) {
        *best = c;
        best->objective = j;
      }
    }
  }
  return top;
}

}  // namespace

std::optional<double> fixed_q7_value(const KinematicModel& model, const IkRequest& req,
                                     const RedundancyWeights& w, const IkConfig& cfg, double q7,
                                     IkSolution* best) {
  return best_at(model, req, w, cfg, q7, resolve_seeds(model, req, cfg), best);
}

ResolveResult resolve(const KinematicModel& model, const IkRequest& req, const RedundancyWeights& w,
                      const IkConfig& cfg) {
  if (req.q_prev.size() != model.dof() || req.q_neutral.size() != model.dof())
    throw Error(ErrorCode::kSchema, "IK request has wrong joint dimension");
  const int r = redundant_index(model);
  const double lo7 = model.lower()[r];
  const double hi7 = model.upper()[r];
  const double x_prev = std::clamp(req.q_prev[r], lo7, hi7);

  // The solution nearest q_prev. Damped least squares over all joints takes
  // minimum-norm steps, so it lands close to where the continuity term
  // peaks. Near singular configurations that peak is narrow enough for a
  // coarse scan to step over, and the default seeds fall into other basins
  // around it; scanning at its q7 and seeding from it tracks that branch.
  std::vector<JointVector> seeds = resolve_seeds(model, req, cfg);
  std::vector<double> anchors{x_prev};
  {
    const JointVector q_free = dls_run(model, req.target, model.clamp(req.q_prev), cfg, model.dof());
    const IkSolution s = measure(model, q_free, req.target, cfg.ee_frame);
    if (s.position_err <= cfg.position_tol && s.orientation_err <= cfg.orientation_tol) {
      seeds.push_back(q_free);
      if (std::abs(q_free[r] - x_prev) >= 1e-9) anchors.push_back(q_free[r]);
    }
  }

  ResolveResult res;
  struct Evaluated {
    std::optional<double> v;
    IkSolution best;
  };
  std::map<double, Evaluated> memo;
  auto eval = [&](double x) -> const Evaluated& {
    auto it = memo.find(x);
    if (it != memo.end()) return it->second;
    ++res.evaluations;
    Evaluated e;
    e.v = best_at(model, req, w, cfg, x, seeds, &e.best);
    return memo.emplace(x, std::move(e)).first->second;
  };
  auto g = [&](double x) { return eval(x).v; };

  struct Sample {
    double x;
    std::optional<double> v;
  };
  auto scan = [&](double a, double b, int n) {
    std::vector<Sample> s;
    for (int i = 0; i <= n; ++i) {
      const double x = a + (b - a) * i / n;
      s.push_back({x, g(x)});
    }
    for (double x : anchors) {
      const bool listed = std::any_of(s.begin(), s.end(), [&](const Sample& e) { return std::abs(e.x - x) < 1e-9; });
      if (!listed && x > a && x < b) s.push_back({x, g(x)});
    }
    std::sort(s.begin(), s.end(), [](const Sample& l, const Sample& rr) { return l.x < rr.x; });
    // The objective tends to peak where a solution branch folds and stops
    // existing, so every feasible/infeasible transition is bisected down to
    // its edge and both sides are kept as samples.
    const std::size_t n_scan = s.size();
    for (std::size_t i = 0; i + 1 < n_scan; ++i) {
      if (s[i].v.has_value() == s[i + 1].v.has_value()) continue;
      Sample in = s[i].v ? s[i] : s[i + 1];
      Sample out = s[i].v ? s[i + 1] : s[i];
      for (int it = 0; it < cfg.edge_bisections; ++it) {
        const double x = 0.5 * (in.x + out.x);
        const Sample mid{x, g(x)};
        (mid.v ? in : out) = mid;
      }
      s.push_back(in);
      s.push_back(out);
    }
    std::sort(s.begin(), s.end(), [](const Sample& l, const Sample& rr) { return l.x < rr.x; });
    return s;
  };
  auto argbest = [](const std::vector<Sample>& s) {
    int k = -1;
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
      if (s[i].v && (k < 0 || *s[i].v > *s[k].v)) k = i;
    return k;
  };

  double a = std::max(lo7, x_prev - cfg.bracket_half_width);
  double b = std::min(hi7, x_prev + cfg.bracket_half_width);
  const int n_local = std::max(2, cfg.scan_samples);
  std::vector<Sample> samples = scan(a, b, n_local);
  int k = argbest(samples);
  const bool at_open_edge =
      k >= 0 && ((k == 0 && a > lo7) || (k == static_cast<int>(samples.size()) - 1 && b < hi7));
  if ((k < 0 || at_open_edge) && (a > lo7 || b < hi7)) {
    const int n_full = static_cast<int>(std::ceil(n_local * (hi7 - lo7) / std::max(b - a, 1e-9)));
    a = lo7;
    b = hi7;
    samples = scan(a, b, n_full);
    k = argbest(samples);
  }
  res.bracket_lo = a;
  res.bracket_hi = b;
  if (k < 0) {
    res.status = IkStatus::kUnreachable;
    return res;
  }

  // Bounded search from each of the best few samples. Near folds and
  // singular configurations g has several narrow peaks within one scan cell.
  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i)
    if (samples[i].v) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int l, int rr) { return *samples[l].v > *samples[rr].v; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(1, cfg.search_starts))));
  double x_star = samples[k].x;
  double v_star = *samples[k].v;
  for (int i : order) {
    const double sa = samples[std::max(i - 1, 0)].x;
    const double sb = samples[std::min(i + 1, static_cast<int>(samples.size()) - 1)].x;
    const ScalarMin sm = brent_minimize(
        [&](double x) {
          const auto v = g(x);
          return v ? -*v : kInfeasiblePenalty;
        },
        sa, sb, samples[i].x, cfg.search_tol, cfg.search_max_iterations);
    res.search_iterations += sm.iterations;
    if (-sm.fx > v_star) {
      v_star = -sm.fx;
      x_star = sm.x;
    }
  }
  const Evaluated& top = eval(x_star);
  if (!top.v) {
    res.status = IkStatus::kUnreachable;
    return res;
  }
  res.status = IkStatus::kOk;
  res.solution = top.best;
  return res;
}

}  // namespace teleop
