#include "snaptraj/timealloc.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace snaptraj::timealloc {
namespace {

double solve_cost(const WaypointPath& path, const TimeAllocation& alloc,
                  const trajopt::BoundaryConfig& bc) {
  return trajopt::solve_min_snap(path, alloc, bc).cost.value;
}

// Clamp durations to the floor, then rescale the free ones so the total is
// restored exactly.  A few passes settle even when several coordinates clamp.
TimeAllocation project_to_simplex(std::vector<double> durations, double total,
                                  double floor) {
  const int m = static_cast<int>(durations.size());
  for (int pass = 0; pass < m + 1; ++pass) {
    double clamped_mass = 0.0;
    double free_mass = 0.0;
    for (double& t : durations) {
      if (t <= floor) {
        t = floor;
        clamped_mass += floor;
      } else {
        free_mass += t;
      }
    }
    const double target = total - clamped_mass;
    if (free_mass <= 0.0 || target <= 0.0) {
      // Degenerate: spread evenly and stop.
      for (double& t : durations) t = total / m;
      break;
    }
    bool dirty = false;
    for (double& t : durations) {
      if (t > floor) {
        t *= target / free_mass;
        if (t < floor) dirty = true;
      }
    }
    if (!dirty) break;
  }
  TimeAllocation out = TimeAllocation::from_durations(std::move(durations));
  out.total_time = total;
  return out;
}

}  // namespace

TimeAllocation tvp_allocate(const WaypointPath& path, const TvpLimits& limits) {
  if (!(limits.v_max > 0.0) || !(limits.a_max > 0.0))
    raise(ErrorCode::BadInput, "velocity/acceleration limits must be > 0");
  std::vector<double> durations;
  durations.reserve(path.segment_count());
  const double cruise_dist = limits.v_max * limits.v_max / limits.a_max;
  for (int i = 0; i < path.segment_count(); ++i) {
    const double d = path.segment_length(i);
    if (!(d > 0.0))
      raise(ErrorCode::DegenerateSegment,
            "zero-length segment " + std::to_string(i));
    durations.push_back(d >= cruise_dist
                            ? d / limits.v_max + limits.v_max / limits.a_max
                            : 2.0 * std::sqrt(d / limits.a_max));
  }
  return TimeAllocation::from_durations(std::move(durations));
}

GradientResult constrained_gradient(const WaypointPath& path,
                                    const TimeAllocation& alloc,
                                    const trajopt::BoundaryConfig& bc,
                                    const BgdConfig& cfg) {
  const int m = alloc.segment_count();
  GradientResult res;
  res.derivatives = Eigen::VectorXd::Zero(m);
  if (m < 2) return res;  // nothing to redistribute

  const double T = alloc.total_time;
  const double h = cfg.h_fraction * T;
  const double floor = cfg.t_min_fraction * T;

  // Central differences: the O(h^2) truncation keeps the estimate clean at
  // stationary points, where a one-sided difference is dominated by the
  // curvature term.
  for (int i = 0; i < m; ++i) {
    std::vector<double> plus = alloc.durations;
    std::vector<double> minus = alloc.durations;
    bool ok = true;
    for (int j = 0; j < m; ++j) {
      const double step = (j == i) ? h : -h / (m - 1);
      plus[j] += step;
      minus[j] -= step;
      if (plus[j] < floor || minus[j] < floor) ok = false;
    }
    if (!ok) {
      res.skipped_directions.push_back(i);
      continue;
    }
    TimeAllocation tp = TimeAllocation::from_durations(std::move(plus));
    TimeAllocation tm = TimeAllocation::from_durations(std::move(minus));
    tp.total_time = T;
    tm.total_time = T;
    res.derivatives(i) =
        (solve_cost(path, tp, bc) - solve_cost(path, tm, bc)) / (2.0 * h);
  }
  return res;
}

BgdResult refine_bgd(const WaypointPath& path, const TimeAllocation& init,
                     const BgdConfig& cfg, const trajopt::BoundaryConfig& bc) {
  if (init.total_mismatch() > 1e-9)
    raise(ErrorCode::InvalidAllocation,
          "initial durations do not sum to the stated total");

  const int m = init.segment_count();
  const double T = init.total_time;
  const double floor = cfg.t_min_fraction * T;

  BgdResult res;
  res.allocation = init;
  double cost = solve_cost(path, init, bc);
  res.log.push_back({0, cost, 0.0, 0.0});

  if (m < 2) {
    res.cost = trajopt::SnapCost{cost};
    res.converged = true;
    return res;
  }

  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    GradientResult grad = constrained_gradient(path, res.allocation, bc, cfg);
    const double grad_norm = grad.derivatives.norm();
    // Stop once the estimate sinks to the finite-difference noise floor.
    if (grad_norm <= 1e-10 * std::max(cost, 1e-300) / T) {
      res.converged = true;
      break;
    }

    // Descent direction: the negative combination of the sum-preserving
    // basis directions weighted by their directional derivatives.  Its
    // components sum to zero by construction.
    Eigen::VectorXd p = Eigen::VectorXd::Zero(m);
    for (int i = 0; i < m; ++i) {
      if (grad.derivatives(i) == 0.0) continue;
      for (int j = 0; j < m; ++j)
        p(j) -= grad.derivatives(i) * ((j == i) ? 1.0 : -1.0 / (m - 1));
    }
    const double slope = -grad.derivatives.squaredNorm();

    double alpha = 0.1 * T / std::max(p.cwiseAbs().maxCoeff(),
                                      std::numeric_limits<double>::min());
    bool accepted = false;
    TimeAllocation candidate;
    double candidate_cost = 0.0;
    for (int s = 0; s <= cfg.max_shrinks; ++s) {
      std::vector<double> trial = res.allocation.durations;
      for (int j = 0; j < m; ++j) trial[j] += alpha * p(j);
      candidate = project_to_simplex(std::move(trial), T, floor);
      bool solved = true;
      try {
        candidate_cost = solve_cost(path, candidate, bc);
      } catch (const Error&) {
        solved = false;  // QP failure inside the line search: just shrink
      }
      if (solved && candidate_cost <= cost + cfg.armijo_c * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= cfg.shrink;
    }
    if (!accepted) {
      res.converged = false;
      res.cost = trajopt::SnapCost{cost};
      return res;
    }

    const double prev = cost;
    res.allocation = candidate;
    cost = candidate_cost;
    res.log.push_back({iter, cost, alpha, grad_norm});
    if ((prev - cost) <= cfg.rel_tol * std::max(prev, 1e-300)) {
      res.converged = true;
      break;
    }
    if (iter == cfg.max_iters) res.converged = true;
  }

  if (cfg.max_iters == 0) res.converged = true;
  res.cost = trajopt::SnapCost{cost};
  return res;
}

ScaleResult scale_total_time(const WaypointPath& path,
                             const TimeAllocation& alloc,
                             const FeasibilityLimits& limits,
                             const trajopt::BoundaryConfig& bc) {
  auto feasible = [&](double eta) {
    auto sol = trajopt::solve_min_snap(path, alloc.scaled(eta), bc);
    auto ext = trajopt::sampled_extremes(sol.trajectory, 50);
    return ext.max_speed <= limits.v_max &&
           ext.max_acceleration <= limits.a_max;
  };

  double lo, hi;
  if (feasible(1.0)) {
    hi = 1.0;
    lo = 0.5;
    while (feasible(lo)) {
      hi = lo;
      lo *= 0.5;
      if (lo < 1e-6) return {hi, alloc.scaled(hi)};
    }
  } else {
    lo = 1.0;
    hi = 2.0;
    while (!feasible(hi)) {
      if (hi >= 10.0)
        raise(ErrorCode::BracketFailure,
              "no feasible time scale found up to eta = 10");
      lo = hi;
      hi = std::min(hi * 2.0, 10.0);
    }
  }

  while ((hi - lo) / hi > 1e-3) {
    const double mid = 0.5 * (lo + hi);
    if (feasible(mid))
      hi = mid;
    else
      lo = mid;
  }
  return {hi, alloc.scaled(hi)};
}

void export_iteration_log_csv(const std::vector<IterationRecord>& log,
                              std::ostream& out) {
  out << "iter,cost,step_size,grad_norm\n";
  out << std::setprecision(17);
  for (const auto& rec : log)
    out << rec.iter << ',' << rec.cost << ',' << rec.step_size << ','
        << rec.grad_norm << '\n';
}

}  // namespace snaptraj::timealloc
