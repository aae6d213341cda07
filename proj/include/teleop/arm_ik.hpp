#pragma once

// Arm branch inverse kinematics for a 7-DOF arm.
//
// Redundancy is parameterized by the last joint: for a fixed value of that
// joint the remaining six joints are solved numerically from several seeds
// (each seed yields at most one solution, so the candidate set mirrors the
// closed-form "up to eight branches"). A scalar search over the last joint then
// maximizes
//
//   J(q) = w_m M(q) - w_n |W_n (q - q_neutral)| - w_c |W_c (q - q_prev)|
//
// where M is Yoshikawa manipulability at the end-effector frame.

#include <optional>
#include <string>
#include <vector>

#include "teleop/kinematics.hpp"

namespace teleop {

struct IkRequest {
  Pose target;
  JointVector q_prev;
  JointVector q_neutral;
};

struct RedundancyWeights {
  double w_m = 1.0;
  double w_n = 0.5;
  double w_c = 2.0;
  Eigen::VectorXd W_n;  // diagonal entries
  Eigen::VectorXd W_c;

  /// Default scalar weights with W_n = W_c = diag(1 / joint range).
  static RedundancyWeights defaults(const KinematicModel& model);
};

struct IkConfig {
  std::string ee_frame = "ee";
  // Damped least squares on the six locked-q7 joints.
  double dls_damping = 1e-3;
  double step_cap = 0.2;
  int max_iterations = 200;
  double position_tol = 1e-4;
  double orientation_tol = 1e-3;
  double dedup_tol = 1e-6;
  // A run stops once both errors are below this fraction of their tolerances.
  double settle_fraction = 1e-4;
  // Scalar search over the redundant joint.
  double search_tol = 1e-6;
  int search_max_iterations = 100;
  double bracket_half_width = 0.6;
  // Samples the bounded search is started from, best first.
  int search_starts = 3;
  int scan_samples = 16;
  // Bisection steps that locate each feasibility edge found by the scan.
  int edge_bisections = 30;
  // Candidates below this manipulability are discarded.
  double min_manipulability = 1e-4;
  // Spread seeds tried in addition to q_prev and q_neutral.
  int extra_seeds = 2;
};

struct IkSolution {
  JointVector q;
  double objective = 0.0;
  double position_err = 0.0;
  double orientation_err = 0.0;
};

/// Residual errors of `q` against `target` at the configured frame.
IkSolution measure(const KinematicModel& model, const JointVector& q, const Pose& target,
                   const std::string& frame);

/// Candidate set for a locked last joint. One DLS run per seed; converged,
/// limit-respecting results are deduplicated. Empty means unreachable at q7.
std::vector<IkSolution> solve_fixed_q7(const KinematicModel& model, const Pose& target, double q7,
                                       const std::vector<JointVector>& seeds, const IkConfig& cfg = {});

double redundancy_objective(const KinematicModel& model, const JointVector& q, const IkRequest& req,
                            const RedundancyWeights& w, const std::string& frame = "ee");

/// Seeds for every q7 evaluation (q7 is overwritten). resolve() adds the
/// all-joint solution nearest q_prev when one exists.
std::vector<JointVector> resolve_seeds(const KinematicModel& model, const IkRequest& req, const IkConfig& cfg);

/// g(q7): best objective over the admissible candidates at q7, or nullopt if
/// none. `best` receives the winning candidate.
std::optional<double> fixed_q7_value(const KinematicModel& model, const IkRequest& req,
                                     const RedundancyWeights& w, const IkConfig& cfg, double q7,
                                     IkSolution* best = nullptr);

enum class IkStatus { kOk, kUnreachable };

struct ResolveResult {
  IkStatus status = IkStatus::kUnreachable;
  IkSolution solution;
  // Interval the final scalar search ran over, for diagnostics and oracles.
  double bracket_lo = 0.0;
  double bracket_hi = 0.0;
  int evaluations = 0;
  int search_iterations = 0;
};

ResolveResult resolve(const KinematicModel& model, const IkRequest& req, const RedundancyWeights& w,
                      const IkConfig& cfg = {});

}  // namespace teleop
