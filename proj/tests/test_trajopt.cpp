#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "snaptraj/trajopt.hpp"
#include "test_helpers.hpp"

using namespace snaptraj;
using namespace snaptraj::trajopt;
using testing_support::random_allocation;
using testing_support::random_path;
using testing_support::simpson;

namespace {

double falling(int j, int d) {
  double f = 1.0;
  for (int i = j; i > j - d; --i) f *= i;
  return (j < d) ? 0.0 : f;
}

// Independent entry oracle: integral of the product of 4th derivatives of
// monomials t^j and t^l over [0, tau].
double hessian_entry_oracle(int j, int l, double tau) {
  return simpson(
      [&](double t) {
        const double pj = (j >= 4) ? falling(j, 4) * std::pow(t, j - 4) : 0.0;
        const double pl = (l >= 4) ? falling(l, 4) * std::pow(t, l - 4) : 0.0;
        return pj * pl;
      },
      0.0, tau);
}

WaypointPath collinear3(double spacing = 2.0) {
  return WaypointPath({{0.0, 0.0}, {spacing, 0.0}, {2.0 * spacing, 0.0}});
}

}  // namespace

TEST_CASE("snap hessian matches the quadrature oracle entry by entry") {
  TimeAllocation alloc = TimeAllocation::from_durations({1.0});
  QpSystem sys = build_snap_hessian(alloc, 7);
  REQUIRE(sys.hessian.rows() == 8);

  CHECK(sys.hessian(4, 4) == doctest::Approx(576.0).epsilon(1e-12));

  for (int j = 0; j <= 7; ++j)
    for (int l = 0; l <= 7; ++l) {
      if (j < 4 || l < 4) {
        CHECK(sys.hessian(j, l) == 0.0);
      } else {
        CHECK(sys.hessian(j, l) ==
              doctest::Approx(hessian_entry_oracle(j, l, 1.0)).epsilon(1e-9));
      }
    }

  TimeAllocation alloc2 = TimeAllocation::from_durations({2.0});
  QpSystem sys2 = build_snap_hessian(alloc2, 7);
  CHECK(sys2.hessian(4, 4) == doctest::Approx(1152.0).epsilon(1e-12));
  for (int j = 4; j <= 7; ++j)
    for (int l = 4; l <= 7; ++l)
      CHECK(sys2.hessian(j, l) ==
            doctest::Approx(hessian_entry_oracle(j, l, 2.0)).epsilon(1e-9));
}

TEST_CASE("snap hessian is block diagonal and positive semidefinite") {
  std::mt19937_64 rng(11);
  TimeAllocation alloc = random_allocation(rng, 3);
  QpSystem sys = build_snap_hessian(alloc, 7);
  for (int r = 0; r < 24; ++r)
    for (int c = 0; c < 24; ++c)
      if (r / 8 != c / 8) CHECK(sys.hessian(r, c) == 0.0);
  CHECK((sys.hessian - sys.hessian.transpose()).cwiseAbs().maxCoeff() == 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sys.hessian);
  CHECK(es.eigenvalues().minCoeff() >= -1e-9 * es.eigenvalues().maxCoeff());
}

TEST_CASE("snap hessian rejects bad input") {
  CHECK_THROWS_AS(build_snap_hessian(TimeAllocation::from_durations({1.0}), 3),
                  Error);
  TimeAllocation bad;
  bad.durations = {1.0, -0.5};
  bad.total_time = 0.5;
  CHECK_THROWS_AS(build_snap_hessian(bad, 7), Error);
}

TEST_CASE("solver validates order and continuity configuration") {
  WaypointPath path({{0.0, 0.0}, {1.0, 0.0}});
  TimeAllocation alloc = TimeAllocation::from_durations({1.0});
  BoundaryConfig low_order;
  low_order.order = 3;
  CHECK_THROWS_AS(solve_min_snap(path, alloc, low_order), Error);
  BoundaryConfig bad_continuity;
  bad_continuity.continuity_order = 7;
  CHECK_THROWS_AS(solve_min_snap(path, alloc, bad_continuity), Error);
  BoundaryConfig velocity_only;
  velocity_only.continuity_order = 2;
  velocity_only.zero_end_acceleration = false;
  auto sol = solve_min_snap(path, alloc, velocity_only);
  CHECK(sol.constraint_residual < 1e-6);
}

TEST_CASE("single-segment constraints are satisfied by the smoothstep polynomial") {
  // Rest-to-rest quintic s(u) = 10u^3 - 15u^4 + 6u^5 hits position, velocity
  // and acceleration rows exactly, so A a - b must vanish.
  WaypointPath path({{1.0, -2.0}, {4.0, 2.0}});
  const double tau = 1.7;
  TimeAllocation alloc = TimeAllocation::from_durations({tau});
  QpSystem con = build_equality_constraints(path, alloc, BoundaryConfig{});
  CHECK(con.a_eq.rows() == 6);  // 2 pos + 2 vel + 2 acc

  Eigen::MatrixXd coeffs = Eigen::MatrixXd::Zero(8, 2);
  const Vec2 delta = path.points[1] - path.points[0];
  for (int axis = 0; axis < 2; ++axis) {
    coeffs(0, axis) = path.points[0](axis);
    coeffs(3, axis) = 10.0 * delta(axis) / std::pow(tau, 3);
    coeffs(4, axis) = -15.0 * delta(axis) / std::pow(tau, 4);
    coeffs(5, axis) = 6.0 * delta(axis) / std::pow(tau, 5);
  }
  const double residual = (con.a_eq * coeffs - con.b_eq).cwiseAbs().maxCoeff();
  CHECK(residual < 1e-12);
}

TEST_CASE("constraint right-hand side carries the waypoint coordinates") {
  WaypointPath path = collinear3(2.0);
  TimeAllocation alloc = TimeAllocation::from_durations({1.0, 1.0});
  QpSystem con = build_equality_constraints(path, alloc, BoundaryConfig{});
  // Rows 0..3 are segment position rows in order: start0, end0, start1, end1.
  CHECK(con.b_eq.row(0) == path.points[0].transpose());
  CHECK(con.b_eq.row(1) == path.points[1].transpose());
  CHECK(con.b_eq.row(2) == path.points[1].transpose());
  CHECK(con.b_eq.row(3) == path.points[2].transpose());
}

TEST_CASE("constraint matrices have full row rank on random instances") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> npts(2, 9);
    const int n = npts(rng);
    WaypointPath path = random_path(rng, n);
    TimeAllocation alloc = random_allocation(rng, n - 1);
    BoundaryConfig bc;
    bc.continuity_order = (trial % 2) ? 2 : 3;
    QpSystem con = build_equality_constraints(path, alloc, bc);
    CHECK(matrix_rank(con.a_eq) == con.a_eq.rows());
  }
}

TEST_CASE("constraints reject inconsistent lengths") {
  WaypointPath path = collinear3();
  TimeAllocation alloc = TimeAllocation::from_durations({1.0, 1.0, 1.0});
  CHECK_THROWS_AS(build_equality_constraints(path, alloc, BoundaryConfig{}),
                  Error);
}

TEST_CASE("solver reproduces waypoints and rest boundary conditions") {
  std::mt19937_64 rng(21);
  WaypointPath path = random_path(rng, 5);
  TimeAllocation alloc = random_allocation(rng, 4);
  auto sol = solve_min_snap(path, alloc);

  CHECK(sol.constraint_residual < 1e-6);
  CHECK((sol.trajectory.position(0.0) - path.points[0]).norm() < 1e-6);
  CHECK((sol.trajectory.position(sol.trajectory.total_time()) -
         path.points.back())
            .norm() < 1e-6);
  double t = 0.0;
  for (int k = 0; k + 1 < path.waypoint_count(); ++k) {
    t += alloc.durations[k];
    CHECK((sol.trajectory.position(t) - path.points[k + 1]).norm() < 1e-6);
  }
  CHECK(sol.trajectory.velocity(0.0).norm() < 1e-6);
  CHECK(sol.trajectory.velocity(sol.trajectory.total_time()).norm() < 1e-6);
  CHECK(sol.trajectory.acceleration(0.0).norm() < 1e-6);
  CHECK(sol.trajectory.acceleration(sol.trajectory.total_time()).norm() <
        1e-6);
}

TEST_CASE("symmetric instance yields a mirror-symmetric trajectory") {
  WaypointPath path = collinear3(3.0);
  TimeAllocation alloc = TimeAllocation::from_durations({2.0, 2.0});
  auto sol = solve_min_snap(path, alloc);
  const double T = sol.trajectory.total_time();
  const Vec2 middle = path.points[1];
  for (double s = 0.0; s <= 2.0; s += 0.1) {
    const Vec2 a = sol.trajectory.position(T / 2 + s);
    const Vec2 b = sol.trajectory.position(T / 2 - s);
    CHECK(((a + b) / 2.0 - middle).norm() < 1e-6);
  }
}

TEST_CASE("solver cost equals the quadrature of the 4th derivative") {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> npts(2, 8);
    const int n = npts(rng);
    WaypointPath path = random_path(rng, n);
    TimeAllocation alloc = random_allocation(rng, n - 1);
    auto sol = solve_min_snap(path, alloc);
    const double quad = snap_cost_quadrature(sol.trajectory).value;
    CHECK(sol.cost.value ==
          doctest::Approx(quad).epsilon(1e-9));
  }
}

TEST_CASE("quadrature route agrees with an independent Simpson integration") {
  std::mt19937_64 rng(5);
  WaypointPath path = random_path(rng, 4);
  TimeAllocation alloc = random_allocation(rng, 3);
  auto sol = solve_min_snap(path, alloc);
  const double gl = snap_cost_quadrature(sol.trajectory).value;
  const double simpson_val = testing_support::simpson_snap_cost(sol.trajectory);
  CHECK(gl == doctest::Approx(simpson_val).epsilon(1e-8));
}

TEST_CASE("scaling waypoints scales cost quadratically") {
  std::mt19937_64 rng(55);
  WaypointPath path = random_path(rng, 5);
  TimeAllocation alloc = random_allocation(rng, 4);
  const double base = solve_min_snap(path, alloc).cost.value;
  for (double s : {0.5, 3.0}) {
    WaypointPath scaled = path.transformed(s, 0.0, Vec2::Zero());
    const double cost = solve_min_snap(scaled, alloc).cost.value;
    CHECK(cost == doctest::Approx(s * s * base).epsilon(1e-9));
  }
}

TEST_CASE("time-scaling law: cost times alpha^7 is invariant") {
  std::mt19937_64 rng(66);
  WaypointPath path = random_path(rng, 5);
  TimeAllocation alloc = random_allocation(rng, 4);
  const double base = solve_min_snap(path, alloc).cost.value;
  for (double alpha : {0.5, 2.0, 3.0}) {
    const double scaled = solve_min_snap(path, alloc.scaled(alpha)).cost.value;
    CHECK(scaled * std::pow(alpha, 7.0) == doctest::Approx(base).epsilon(1e-6));
    // Equivalently the re-solved cost ratio is alpha^-7.
    CHECK(scaled / base ==
          doctest::Approx(std::pow(alpha, -7.0)).epsilon(1e-6));
  }
}

TEST_CASE("cost ordering survives rotation, translation and scaling") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> angle(0.0, 6.28);
  std::uniform_real_distribution<double> scl(0.3, 4.0);
  std::uniform_real_distribution<double> shift(-20.0, 20.0);
  for (int trial = 0; trial < 10; ++trial) {
    WaypointPath path = random_path(rng, 4);
    TimeAllocation f1 = random_allocation(rng, 3);
    TimeAllocation f2 = random_allocation(rng, 3);
    const double j1 = solve_min_snap(path, f1).cost.value;
    const double j2 = solve_min_snap(path, f2).cost.value;
    WaypointPath moved = path.transformed(scl(rng), angle(rng),
                                          Vec2(shift(rng), shift(rng)));
    const double k1 = solve_min_snap(moved, f1).cost.value;
    const double k2 = solve_min_snap(moved, f2).cost.value;
    CHECK(((j1 < j2) == (k1 < k2)));
  }
}

TEST_CASE("local optimality: null-space perturbations never reduce cost") {
  std::mt19937_64 rng(88);
  WaypointPath path = random_path(rng, 4);
  TimeAllocation alloc = random_allocation(rng, 3);
  QpSystem hess = build_snap_hessian(alloc, 7);
  QpSystem con = build_equality_constraints(path, alloc, BoundaryConfig{});
  auto sol = solve_min_snap(path, alloc);

  // Projector onto the null space of the constraint matrix.
  Eigen::MatrixXd a = con.a_eq;
  Eigen::MatrixXd proj =
      Eigen::MatrixXd::Identity(a.cols(), a.cols()) -
      a.transpose() * (a * a.transpose()).ldlt().solve(a);

  Eigen::MatrixXd coeffs(a.cols(), 2);
  for (int k = 0; k < sol.trajectory.segment_count(); ++k)
    coeffs.middleRows(8 * k, 8) = sol.trajectory.segment_coefficients(k);

  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd z(a.cols());
    for (int i = 0; i < z.size(); ++i) z(i) = normal(rng);
    Eigen::VectorXd dir = proj * z;
    REQUIRE(dir.norm() > 0.0);
    for (int axis = 0; axis < 2; ++axis) {
      Eigen::VectorXd perturbed = coeffs.col(axis) + 1e-3 * dir;
      const double before =
          coeffs.col(axis).dot(hess.hessian * coeffs.col(axis));
      const double after = perturbed.dot(hess.hessian * perturbed);
      CHECK(after >= before - 1e-9 * std::max(1.0, before));
    }
  }
}

TEST_CASE("pathologically scaled durations raise the singular-solver error") {
  // Durations this small overflow the 1/tau^7 objective weights; the solver
  // must refuse loudly instead of returning garbage.
  WaypointPath path({{0.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}});
  TimeAllocation alloc;
  alloc.durations = {1e-60, 1.0};
  alloc.total_time = 1.0 + 1e-60;
  try {
    solve_min_snap(path, alloc);
    FAIL("expected a solver error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SolverSingular);
    CHECK(std::string(e.what()).find("singular") != std::string::npos);
  }
}

TEST_CASE("lopsided but finite durations still solve to tight residuals") {
  // Fractions down at the clamp floor of the learned allocator.
  WaypointPath path({{0.0, 0.0}, {1.0, 0.4}, {2.0, 0.0}, {2.5, 1.0}});
  TimeAllocation alloc = TimeAllocation::from_fractions(
      {1e-4, 0.4999, 0.5}, 4.0);
  auto sol = solve_min_snap(path, alloc);
  CHECK(sol.constraint_residual < 1e-6);
  CHECK(sol.cost.value > 0.0);
  CHECK((sol.trajectory.position(0.0) - path.points[0]).norm() < 1e-6);
  CHECK((sol.trajectory.position(4.0) - path.points[3]).norm() < 1e-6);
}

TEST_CASE("evaluation rejects out-of-range queries") {
  WaypointPath path = collinear3();
  TimeAllocation alloc = TimeAllocation::from_durations({1.0, 1.0});
  auto sol = solve_min_snap(path, alloc);
  CHECK_THROWS_AS(sol.trajectory.evaluate(-0.1, 0), Error);
  CHECK_THROWS_AS(sol.trajectory.evaluate(2.5, 0), Error);
  CHECK_THROWS_AS(sol.trajectory.evaluate(1.0, 9), Error);
  CHECK_NOTHROW(sol.trajectory.evaluate(2.0, 0));  // right-closed final segment
}

TEST_CASE("evaluated derivative matches a central finite difference") {
  std::mt19937_64 rng(99);
  WaypointPath path = random_path(rng, 4);
  TimeAllocation alloc = random_allocation(rng, 3);
  auto sol = solve_min_snap(path, alloc);
  const double T = sol.trajectory.total_time();
  const double h = 1e-6 * T;
  for (double frac : {0.21, 0.5, 0.83}) {
    const double t = frac * T;
    const Vec2 fd =
        (sol.trajectory.position(t + h) - sol.trajectory.position(t - h)) /
        (2.0 * h);
    const Vec2 v = sol.trajectory.velocity(t);
    CHECK((v - fd).norm() <= 1e-4 * std::max(1.0, v.norm()));
  }
}

TEST_CASE("cubic-only trajectory has zero snap") {
  std::vector<Eigen::MatrixXd> segs(2, Eigen::MatrixXd::Zero(8, 2));
  segs[0](0, 0) = 1.0;
  segs[0](3, 0) = 2.0;  // t^3 terms only
  segs[1](2, 1) = -1.0;
  PiecewiseTrajectory traj(segs, TimeAllocation::from_durations({1.0, 2.0}), 7);
  CHECK(snap_cost_quadrature(traj).value == 0.0);
}

TEST_CASE("csv export produces the documented columns") {
  WaypointPath path = collinear3();
  TimeAllocation alloc = TimeAllocation::from_durations({1.0, 1.0});
  auto sol = solve_min_snap(path, alloc);
  std::ostringstream out;
  export_trajectory_csv(sol.trajectory, 50.0, out);
  std::istringstream in(out.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "t,x,y,vx,vy,ax,ay");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 101);  // 2 s at 50 Hz inclusive of the final sample
}

TEST_CASE("redundant rows are eliminated to full rank") {
  std::mt19937_64 rng(123);
  WaypointPath path = random_path(rng, 4);
  TimeAllocation alloc = random_allocation(rng, 3);
  QpSystem con = build_equality_constraints(path, alloc, BoundaryConfig{});
  Eigen::MatrixXd a = con.a_eq;
  Eigen::MatrixXd b = con.b_eq;
  // Duplicate a few rows to create redundancy.
  Eigen::MatrixXd a2(a.rows() + 2, a.cols());
  Eigen::MatrixXd b2(b.rows() + 2, b.cols());
  a2 << a, a.row(0), a.row(3);
  b2 << b, b.row(0), b.row(3);
  eliminate_redundant_rows(a2, b2);
  CHECK(a2.rows() == a.rows());
  CHECK(matrix_rank(a2) == a2.rows());
}
