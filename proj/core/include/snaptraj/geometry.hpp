#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <vector>

#include "snaptraj/error.hpp"

namespace snaptraj {

using Vec2 = Eigen::Vector2d;

/// Ordered 2D waypoints a trajectory must pass through.
struct WaypointPath {
  std::vector<Vec2> points;

  WaypointPath() = default;
  explicit WaypointPath(std::vector<Vec2> pts) : points(std::move(pts)) {
    if (points.size() < 2)
      raise(ErrorCode::BadInput, "waypoint path needs at least 2 points");
  }

  int waypoint_count() const { return static_cast<int>(points.size()); }
  int segment_count() const { return waypoint_count() - 1; }

  double segment_length(int i) const {
    return (points[i + 1] - points[i]).norm();
  }

  WaypointPath transformed(double scale, double rotation, const Vec2& shift) const {
    Eigen::Rotation2Dd rot(rotation);
    std::vector<Vec2> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(scale * (rot * p) + shift);
    return WaypointPath(std::move(out));
  }
};

/// Per-segment durations with a fixed total.  The durations always sum to
/// `total_time` within 1e-9 relative; construction enforces positivity.
struct TimeAllocation {
  std::vector<double> durations;
  double total_time = 0.0;

  TimeAllocation() = default;

  static TimeAllocation from_durations(std::vector<double> d) {
    TimeAllocation a;
    a.durations = std::move(d);
    for (double t : a.durations)
      if (!(t > 0.0))
        raise(ErrorCode::InvalidAllocation, "segment duration must be > 0");
    a.total_time = std::accumulate(a.durations.begin(), a.durations.end(), 0.0);
    return a;
  }

  static TimeAllocation from_fractions(const std::vector<double>& fractions,
                                       double total) {
    std::vector<double> d(fractions.size());
    for (size_t i = 0; i < fractions.size(); ++i) d[i] = fractions[i] * total;
    TimeAllocation a = from_durations(std::move(d));
    a.total_time = total;  // keep the caller's total exactly
    return a;
  }

  int segment_count() const { return static_cast<int>(durations.size()); }

  std::vector<double> fractions() const {
    std::vector<double> f(durations.size());
    for (size_t i = 0; i < durations.size(); ++i)
      f[i] = durations[i] / total_time;
    return f;
  }

  TimeAllocation scaled(double alpha) const {
    TimeAllocation a;
    a.durations.reserve(durations.size());
    for (double t : durations) a.durations.push_back(alpha * t);
    a.total_time = alpha * total_time;
    return a;
  }

  /// Relative mismatch between the stored total and the duration sum.
  double total_mismatch() const {
    double sum = std::accumulate(durations.begin(), durations.end(), 0.0);
    return std::abs(sum - total_time) / std::max(total_time, 1e-300);
  }
};

}  // namespace snaptraj
