#include "snaptraj/trajopt.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace snaptraj::trajopt {
namespace {

// 8-point Gauss-Legendre rule on [-1, 1].
constexpr int kQuadNodes = 8;
constexpr double kQuadX[kQuadNodes] = {
    -0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
    -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
    0.7966664774136267,  0.9602898564975363};
constexpr double kQuadW[kQuadNodes] = {
    0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
    0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
    0.2223810344533745, 0.1012285362903763};

// j! / (j - d)! as a double; zero when j < d.
double falling_factorial(int j, int d) {
  if (j < d) return 0.0;
  double f = 1.0;
  for (int i = j; i > j - d; --i) f *= i;
  return f;
}

// Row of the monomial basis' d-th derivative at local time t.
Eigen::RowVectorXd derivative_basis(int order, int deriv, double t) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(order + 1);
  for (int j = deriv; j <= order; ++j)
    row(j) = falling_factorial(j, deriv) * std::pow(t, j - deriv);
  return row;
}

void check_dimensions(const WaypointPath& path, const TimeAllocation& alloc) {
  if (alloc.segment_count() != path.segment_count())
    raise(ErrorCode::DimensionMismatch,
          "allocation has " + std::to_string(alloc.segment_count()) +
              " segments, path needs " + std::to_string(path.segment_count()));
}

}  // namespace

PiecewiseTrajectory::PiecewiseTrajectory(
    std::vector<Eigen::MatrixXd> coefficients, TimeAllocation allocation,
    int order)
    : coefficients_(std::move(coefficients)),
      allocation_(std::move(allocation)),
      order_(order) {
  if (static_cast<int>(coefficients_.size()) != allocation_.segment_count())
    raise(ErrorCode::DimensionMismatch,
          "coefficient segments do not match allocation");
  for (const auto& c : coefficients_)
    if (c.rows() != order_ + 1 || c.cols() != 2)
      raise(ErrorCode::DimensionMismatch, "segment coefficient block must be (n+1) x 2");
}

Vec2 PiecewiseTrajectory::evaluate(double t, int deriv) const {
  const double T = total_time();
  const double slack = 1e-9 * std::max(T, 1.0);
  if (t < -slack || t > T + slack)
    raise(ErrorCode::OutOfRange,
          "evaluation time " + std::to_string(t) + " outside [0, " +
              std::to_string(T) + "]");
  if (deriv < 0 || deriv > order_)
    raise(ErrorCode::OutOfRange, "derivative order outside [0, n]");
  t = std::clamp(t, 0.0, T);

  int k = 0;
  double local = t;
  const auto& durations = allocation_.durations;
  const int m = segment_count();
  while (k < m - 1 && local >= durations[k]) {
    local -= durations[k];
    ++k;
  }
  local = std::min(local, durations[k]);

  Eigen::RowVectorXd basis = derivative_basis(order_, deriv, local);
  Eigen::RowVector2d value = basis * coefficients_[k];
  return value.transpose();
}

QpSystem build_snap_hessian(const TimeAllocation& alloc, int order) {
  if (order < 4)
    raise(ErrorCode::BadInput, "snap objective needs polynomial order >= 4");
  for (double t : alloc.durations)
    if (!(t > 0.0))
      raise(ErrorCode::InvalidAllocation, "segment duration must be > 0");

  const int m = alloc.segment_count();
  const int block = order + 1;
  QpSystem sys;
  sys.hessian = Eigen::MatrixXd::Zero(m * block, m * block);
  for (int k = 0; k < m; ++k) {
    const double tau = alloc.durations[k];
    for (int j = 4; j <= order; ++j) {
      for (int l = 4; l <= order; ++l) {
        const int p = j + l - 7;
        sys.hessian(k * block + j, k * block + l) =
            falling_factorial(j, 4) * falling_factorial(l, 4) *
            std::pow(tau, p) / p;
      }
    }
  }
  return sys;
}

QpSystem build_equality_constraints(const WaypointPath& path,
                                    const TimeAllocation& alloc,
                                    const BoundaryConfig& bc) {
  check_dimensions(path, alloc);
  if (bc.continuity_order < 1 || bc.continuity_order >= bc.order)
    raise(ErrorCode::BadInput, "continuity order must lie in [1, n)");

  const int m = alloc.segment_count();
  const int block = bc.order + 1;
  const int unknowns = m * block;
  const int rows = 2 * m + bc.continuity_order * (m - 1) + 2 +
                   (bc.zero_end_acceleration ? 2 : 0);

  QpSystem sys;
  sys.a_eq = Eigen::MatrixXd::Zero(rows, unknowns);
  sys.b_eq = Eigen::MatrixXd::Zero(rows, 2);
  int r = 0;

  // Waypoint interpolation at both ends of every segment.
  for (int k = 0; k < m; ++k) {
    sys.a_eq.block(r, k * block, 1, block) = derivative_basis(bc.order, 0, 0.0);
    sys.b_eq.row(r) = path.points[k].transpose();
    ++r;
    sys.a_eq.block(r, k * block, 1, block) =
        derivative_basis(bc.order, 0, alloc.durations[k]);
    sys.b_eq.row(r) = path.points[k + 1].transpose();
    ++r;
  }

  // Derivative continuity at interior waypoints.
  for (int k = 0; k + 1 < m; ++k) {
    for (int d = 1; d <= bc.continuity_order; ++d) {
      sys.a_eq.block(r, k * block, 1, block) =
          derivative_basis(bc.order, d, alloc.durations[k]);
      sys.a_eq.block(r, (k + 1) * block, 1, block) =
          -derivative_basis(bc.order, d, 0.0);
      ++r;
    }
  }

  // Rest-to-rest boundary: v(0) = v(T) = 0, optionally a(0) = a(T) = 0.
  sys.a_eq.block(r, 0, 1, block) = derivative_basis(bc.order, 1, 0.0);
  ++r;
  sys.a_eq.block(r, (m - 1) * block, 1, block) =
      derivative_basis(bc.order, 1, alloc.durations[m - 1]);
  ++r;
  if (bc.zero_end_acceleration) {
    sys.a_eq.block(r, 0, 1, block) = derivative_basis(bc.order, 2, 0.0);
    ++r;
    sys.a_eq.block(r, (m - 1) * block, 1, block) =
        derivative_basis(bc.order, 2, alloc.durations[m - 1]);
    ++r;
  }
  return sys;
}

int matrix_rank(const Eigen::MatrixXd& m, double tol) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
  if (tol > 0.0) qr.setThreshold(tol);
  return static_cast<int>(qr.rank());
}

void eliminate_redundant_rows(Eigen::MatrixXd& a, Eigen::MatrixXd& b,
                              double tol) {
  const int rows = static_cast<int>(a.rows());
  std::vector<int> keep;
  keep.reserve(rows);
  Eigen::MatrixXd accepted(rows, a.cols());
  int n = 0;
  for (int r = 0; r < rows; ++r) {
    accepted.row(n) = a.row(r);
    if (matrix_rank(accepted.topRows(n + 1), tol) == n + 1) {
      keep.push_back(r);
      ++n;
    }
  }
  Eigen::MatrixXd a2(n, a.cols());
  Eigen::MatrixXd b2(n, b.cols());
  for (int i = 0; i < n; ++i) {
    a2.row(i) = a.row(keep[i]);
    b2.row(i) = b.row(keep[i]);
  }
  a = std::move(a2);
  b = std::move(b2);
}

namespace {

// Internally the QP is solved over coefficients of u = t/tau per segment,
// which keeps the basis O(1) no matter how lopsided the durations are; the
// change of variables a_j = c_j / tau^j is exact.
struct ScaledQp {
  Eigen::MatrixXd hessian;  // unit-time Gram blocks weighted by tau^-7
  Eigen::MatrixXd a_eq;     // max-abs row-normalised constraints
  Eigen::MatrixXd b_eq;
};

ScaledQp build_scaled_qp(const WaypointPath& path, const TimeAllocation& alloc,
                         const BoundaryConfig& bc) {
  const int m = alloc.segment_count();
  const int block = bc.order + 1;
  const int unknowns = m * block;

  ScaledQp sys;
  sys.hessian = Eigen::MatrixXd::Zero(unknowns, unknowns);
  for (int k = 0; k < m; ++k) {
    const double w = 1.0 / std::pow(alloc.durations[k], 7);
    for (int j = 4; j <= bc.order; ++j)
      for (int l = 4; l <= bc.order; ++l)
        sys.hessian(k * block + j, k * block + l) =
            falling_factorial(j, 4) * falling_factorial(l, 4) / (j + l - 7) * w;
  }

  const int rows = 2 * m + bc.continuity_order * (m - 1) + 2 +
                   (bc.zero_end_acceleration ? 2 : 0);
  sys.a_eq = Eigen::MatrixXd::Zero(rows, unknowns);
  sys.b_eq = Eigen::MatrixXd::Zero(rows, 2);
  int r = 0;

  for (int k = 0; k < m; ++k) {
    sys.a_eq(r, k * block) = 1.0;  // u = 0
    sys.b_eq.row(r) = path.points[k].transpose();
    ++r;
    sys.a_eq.block(r, k * block, 1, block).setOnes();  // u = 1
    sys.b_eq.row(r) = path.points[k + 1].transpose();
    ++r;
  }
  // Derivative rows carry 1/tau^d factors; normalise each to unit max.
  auto deriv_row = [&](int r, int k, int d, double at_u, double sign,
                       double tau) {
    for (int j = d; j <= bc.order; ++j)
      sys.a_eq(r, k * block + j) += sign * falling_factorial(j, d) *
                                    std::pow(at_u, j - d) / std::pow(tau, d);
  };
  for (int k = 0; k + 1 < m; ++k) {
    for (int d = 1; d <= bc.continuity_order; ++d) {
      deriv_row(r, k, d, 1.0, 1.0, alloc.durations[k]);
      deriv_row(r, k + 1, d, 0.0, -1.0, alloc.durations[k + 1]);
      ++r;
    }
  }
  deriv_row(r++, 0, 1, 0.0, 1.0, alloc.durations[0]);
  deriv_row(r++, m - 1, 1, 1.0, 1.0, alloc.durations[m - 1]);
  if (bc.zero_end_acceleration) {
    deriv_row(r++, 0, 2, 0.0, 1.0, alloc.durations[0]);
    deriv_row(r++, m - 1, 2, 1.0, 1.0, alloc.durations[m - 1]);
  }
  for (int row = 2 * m; row < rows; ++row) {
    const double mx = sys.a_eq.row(row).cwiseAbs().maxCoeff();
    if (mx > 0.0) sys.a_eq.row(row) /= mx;  // b is zero on these rows
  }
  return sys;
}

}  // namespace

MinSnapSolution solve_min_snap(const WaypointPath& path,
                               const TimeAllocation& alloc,
                               const BoundaryConfig& bc) {
  check_dimensions(path, alloc);
  if (bc.order < 4)
    raise(ErrorCode::BadInput, "snap objective needs polynomial order >= 4");
  if (bc.continuity_order < 1 || bc.continuity_order >= bc.order)
    raise(ErrorCode::BadInput, "continuity order must lie in [1, n)");
  for (double t : alloc.durations)
    if (!(t > 0.0))
      raise(ErrorCode::InvalidAllocation, "segment duration must be > 0");

  const ScaledQp sys = build_scaled_qp(path, alloc, bc);
  const int nu = static_cast<int>(sys.hessian.rows());
  const int rc = static_cast<int>(sys.a_eq.rows());
  const int m = alloc.segment_count();
  const int block = bc.order + 1;

  // Balance the objective block against the O(1) constraint rows.
  const double q_scale = 1.0 / std::max(sys.hessian.cwiseAbs().maxCoeff(), 1e-300);

  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(nu + rc, nu + rc);
  kkt.topLeftCorner(nu, nu) = q_scale * sys.hessian;
  kkt.topRightCorner(nu, rc) = sys.a_eq.transpose();
  kkt.bottomLeftCorner(rc, nu) = sys.a_eq;
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(nu + rc, 2);
  rhs.bottomRows(rc) = sys.b_eq;

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(kkt);
  Eigen::MatrixXd sol = lu.solve(rhs);
  sol += lu.solve(rhs - kkt * sol);  // one refinement pass
  Eigen::MatrixXd scaled = sol.topRows(nu);

  const double b_scale = std::max(1.0, sys.b_eq.cwiseAbs().maxCoeff());
  auto scaled_residual = [&](const Eigen::MatrixXd& c) {
    return (sys.a_eq * c - sys.b_eq).cwiseAbs().maxCoeff();
  };

  if (!scaled.allFinite() || scaled_residual(scaled) > 1e-8 * b_scale) {
    // Null-space fallback: constraints hold by construction, and the
    // reduced problem is small and positive semidefinite.
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(sys.a_eq);
    const int rank = static_cast<int>(cod.rank());
    Eigen::MatrixXd particular = cod.solve(sys.b_eq);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(sys.a_eq.transpose());
    Eigen::MatrixXd q_full = qr.householderQ();
    Eigen::MatrixXd null_basis = q_full.rightCols(nu - rank);
    if (null_basis.cols() > 0) {
      Eigen::MatrixXd reduced =
          null_basis.transpose() * (q_scale * sys.hessian) * null_basis;
      reduced.diagonal().array() += 1e-14 * reduced.diagonal().maxCoeff();
      Eigen::LDLT<Eigen::MatrixXd> ldlt(reduced);
      Eigen::MatrixXd y = ldlt.solve(
          -null_basis.transpose() * (q_scale * sys.hessian) * particular);
      scaled = particular + null_basis * y;
    } else {
      scaled = particular;
    }
    if (!scaled.allFinite() || scaled_residual(scaled) > 1e-6 * b_scale) {
      std::ostringstream msg;
      msg << "constraint system is numerically singular (residual "
          << scaled_residual(scaled) << " over " << rc << " rows)";
      raise(ErrorCode::SolverSingular, msg.str());
    }
  }

  // Undo the change of variables and report everything in local time.
  Eigen::MatrixXd coeffs(nu, 2);
  for (int k = 0; k < m; ++k) {
    double power = 1.0;
    for (int j = 0; j <= bc.order; ++j) {
      coeffs.row(k * block + j) = scaled.row(k * block + j) / power;
      power *= alloc.durations[k];
    }
  }

  // Residual of the row-normalised system; the raw monomial form evaluates
  // with catastrophic cancellation once durations get lopsided, which says
  // nothing about the solution itself.
  const double residual = scaled_residual(scaled);

  std::vector<Eigen::MatrixXd> segs(m);
  for (int k = 0; k < m; ++k) segs[k] = coeffs.middleRows(k * block, block);

  double cost = 0.0;
  for (int axis = 0; axis < 2; ++axis)
    cost += scaled.col(axis).dot(sys.hessian * scaled.col(axis));

  MinSnapSolution out;
  out.trajectory = PiecewiseTrajectory(std::move(segs), alloc, bc.order);
  out.cost = SnapCost{std::max(cost, 0.0)};
  out.constraint_residual = residual;
  return out;
}

SnapCost snap_cost_quadrature(const PiecewiseTrajectory& traj) {
  double total = 0.0;
  for (int k = 0; k < traj.segment_count(); ++k) {
    const double tau = traj.allocation().durations[k];
    const auto& c = traj.segment_coefficients(k);
    double seg = 0.0;
    for (int q = 0; q < kQuadNodes; ++q) {
      const double t = 0.5 * tau * (kQuadX[q] + 1.0);
      Eigen::RowVectorXd basis = derivative_basis(traj.order(), 4, t);
      Eigen::RowVector2d snap = basis * c;
      seg += kQuadW[q] * snap.squaredNorm();
    }
    total += 0.5 * tau * seg;
  }
  return SnapCost{total};
}

KinematicExtremes sampled_extremes(const PiecewiseTrajectory& traj,
                                   int samples_per_segment) {
  KinematicExtremes ext;
  double start = 0.0;
  for (int k = 0; k < traj.segment_count(); ++k) {
    const double tau = traj.allocation().durations[k];
    for (int j = 0; j <= samples_per_segment; ++j) {
      const double t =
          std::min(start + tau * j / samples_per_segment, traj.total_time());
      ext.max_speed = std::max(ext.max_speed, traj.velocity(t).norm());
      ext.max_acceleration =
          std::max(ext.max_acceleration, traj.acceleration(t).norm());
    }
    start += tau;
  }
  return ext;
}

void export_trajectory_csv(const PiecewiseTrajectory& traj, double rate_hz,
                           std::ostream& out) {
  if (!(rate_hz > 0.0)) raise(ErrorCode::BadInput, "sampling rate must be > 0");
  out << "t,x,y,vx,vy,ax,ay\n";
  out << std::setprecision(17);
  const double T = traj.total_time();
  const double dt = 1.0 / rate_hz;
  double t = 0.0;
  bool last = false;
  while (!last) {
    if (t >= T) {
      t = T;
      last = true;
    }
    const Vec2 p = traj.position(t);
    const Vec2 v = traj.velocity(t);
    const Vec2 a = traj.acceleration(t);
    out << t << ',' << p.x() << ',' << p.y() << ',' << v.x() << ',' << v.y()
        << ',' << a.x() << ',' << a.y() << '\n';
    t += dt;
  }
}

}  // namespace snaptraj::trajopt
