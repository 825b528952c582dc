#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <vector>

#include "snaptraj/geometry.hpp"

namespace snaptraj::trajopt {

/// Options for the fixed-allocation polynomial solve.
///
/// `continuity_order` is the highest derivative kept continuous at interior
/// waypoints (2 = acceleration, 3 = jerk).  Endpoint velocity is always
/// pinned to zero; endpoint acceleration is pinned to zero unless
/// `zero_end_acceleration` is cleared.
struct BoundaryConfig {
  int order = 7;                     // polynomial order n per segment
  int continuity_order = 3;          // derivatives 1..C continuous at joints
  bool zero_end_acceleration = true; // a(0) = a(T) = 0
};

/// Snap integral value, m^2/s^7.  Always >= 0 for a valid solve.
struct SnapCost {
  double value = 0.0;
};

/// Quadratic program pieces for one axis-decoupled solve.  The Hessian is
/// block diagonal over segments; the equality right-hand side carries one
/// column per axis (x, y).
struct QpSystem {
  Eigen::MatrixXd hessian;  // m(n+1) x m(n+1)
  Eigen::MatrixXd a_eq;     // rows x m(n+1)
  Eigen::MatrixXd b_eq;     // rows x 2
};

/// Piecewise polynomial in local segment time: segment k is evaluated on
/// [0, tau_k].  Coefficients are monomial, one column per axis.
class PiecewiseTrajectory {
public:
  PiecewiseTrajectory() = default;
  PiecewiseTrajectory(std::vector<Eigen::MatrixXd> coefficients,
                      TimeAllocation allocation, int order);

  int order() const { return order_; }
  int segment_count() const { return static_cast<int>(coefficients_.size()); }
  double total_time() const { return allocation_.total_time; }
  const TimeAllocation& allocation() const { return allocation_; }
  const Eigen::MatrixXd& segment_coefficients(int k) const {
    return coefficients_[k];
  }

  /// Value of the `deriv`-th derivative at global time t.  Segments are
  /// left-closed; the final segment is closed on both ends.
  Vec2 evaluate(double t, int deriv = 0) const;

  Vec2 position(double t) const { return evaluate(t, 0); }
  Vec2 velocity(double t) const { return evaluate(t, 1); }
  Vec2 acceleration(double t) const { return evaluate(t, 2); }

private:
  std::vector<Eigen::MatrixXd> coefficients_;  // (n+1) x 2 per segment
  TimeAllocation allocation_;
  int order_ = 7;
};

struct MinSnapSolution {
  PiecewiseTrajectory trajectory;
  SnapCost cost;
  double constraint_residual = 0.0;  // inf-norm of A a - b over both axes
};

/// Block-diagonal Gram matrix of 4th-derivative products over each segment's
/// local time interval.  Only the Hessian field of the result is filled.
QpSystem build_snap_hessian(const TimeAllocation& alloc, int order);

/// Equality constraints: waypoint interpolation at segment ends, derivative
/// continuity at interior waypoints, and rest boundary conditions.
QpSystem build_equality_constraints(const WaypointPath& path,
                                    const TimeAllocation& alloc,
                                    const BoundaryConfig& bc);

/// Solve the equality-constrained QP for both axes through one KKT
/// factorization.  Throws Error{SolverSingular} when the system cannot be
/// solved to acceptable residual even after the least-squares fallback.
MinSnapSolution solve_min_snap(const WaypointPath& path,
                               const TimeAllocation& alloc,
                               const BoundaryConfig& bc = {});

/// Snap integral of an explicit trajectory via per-segment Gauss-Legendre
/// quadrature (8 nodes, exact for the polynomial degrees in play).  This is
/// the independent route against which the solver's a^T Q a is checked.
SnapCost snap_cost_quadrature(const PiecewiseTrajectory& traj);

struct KinematicExtremes {
  double max_speed = 0.0;
  double max_acceleration = 0.0;
};

/// Dense-sampled speed/acceleration maxima, `samples_per_segment` interior
/// points per segment plus both endpoints.
KinematicExtremes sampled_extremes(const PiecewiseTrajectory& traj,
                                   int samples_per_segment = 50);

/// CSV with header t,x,y,vx,vy,ax,ay sampled at `rate_hz` (the final time is
/// always included).
void export_trajectory_csv(const PiecewiseTrajectory& traj, double rate_hz,
                           std::ostream& out);

/// Row rank via column-pivoted QR; used by redundancy checks.
int matrix_rank(const Eigen::MatrixXd& m, double tol = -1.0);

/// Drop rows of [A | b] that are linearly dependent on earlier rows.
void eliminate_redundant_rows(Eigen::MatrixXd& a, Eigen::MatrixXd& b,
                              double tol = -1.0);

}  // namespace snaptraj::trajopt
