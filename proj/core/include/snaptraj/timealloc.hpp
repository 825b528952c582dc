#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <vector>

#include "snaptraj/trajopt.hpp"

namespace snaptraj::timealloc {

/// Speed/acceleration limits for the trapezoidal-velocity-profile heuristic.
struct TvpLimits {
  double v_max = 5.0;
  double a_max = 2.5;
};

using FeasibilityLimits = TvpLimits;

/// Knobs for the backtracking gradient descent over segment durations.
/// Step size and duration floor are expressed relative to the total time so
/// the descent is invariant to time rescaling.
struct BgdConfig {
  double h_fraction = 1e-4;      // finite-difference step, fraction of T
  double armijo_c = 1e-4;        // sufficient-decrease constant
  double shrink = 0.5;           // backtracking factor
  int max_iters = 100;
  int max_shrinks = 20;
  double rel_tol = 1e-6;         // stop when cost decrease falls below this
  double t_min_fraction = 1e-3;  // duration floor, fraction of T
};

struct GradientResult {
  Eigen::VectorXd derivatives;          // directional derivative per segment
  std::vector<int> skipped_directions;  // directions hitting the t_min floor
};

struct IterationRecord {
  int iter = 0;
  double cost = 0.0;
  double step_size = 0.0;
  double grad_norm = 0.0;
};

struct BgdResult {
  TimeAllocation allocation;
  trajopt::SnapCost cost;
  std::vector<IterationRecord> log;
  bool converged = false;
};

struct ScaleResult {
  double eta = 1.0;
  TimeAllocation allocation;
};

/// Rest-to-rest trapezoidal velocity profile timing per segment: segments
/// long enough to reach v_max get the trapezoid time d/v_max + v_max/a_max,
/// shorter ones the triangular time 2*sqrt(d/a_max).
TimeAllocation tvp_allocate(const WaypointPath& path, const TvpLimits& limits = {});

/// Finite differences of the min-snap cost along the sum-preserving
/// directions g_i = e_i - (1/(m-1)) * sum_{j != i} e_j.
GradientResult constrained_gradient(const WaypointPath& path,
                                    const TimeAllocation& alloc,
                                    const trajopt::BoundaryConfig& bc = {},
                                    const BgdConfig& cfg = {});

/// Backtracking gradient descent on durations with the total held fixed.
/// The accepted-cost sequence is non-increasing and every iterate keeps
/// sum(t) = T to 1e-9 relative.
BgdResult refine_bgd(const WaypointPath& path, const TimeAllocation& init,
                     const BgdConfig& cfg = {},
                     const trajopt::BoundaryConfig& bc = {});

/// Bisection for the smallest uniform time scale eta such that the re-solved
/// trajectory respects the sampled speed/acceleration limits.
ScaleResult scale_total_time(const WaypointPath& path,
                             const TimeAllocation& alloc,
                             const FeasibilityLimits& limits,
                             const trajopt::BoundaryConfig& bc = {});

/// CSV with header iter,cost,step_size,grad_norm.
void export_iteration_log_csv(const std::vector<IterationRecord>& log,
                              std::ostream& out);

}  // namespace snaptraj::timealloc
