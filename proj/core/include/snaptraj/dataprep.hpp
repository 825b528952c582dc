#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "snaptraj/geometry.hpp"
#include "snaptraj/timealloc.hpp"

namespace snaptraj::dataprep {

/// Transform-invariant encoding of a waypoint path: consecutive segment
/// lengths divided by the longest one (so max(ranges) == 1) and signed turn
/// angles in (-pi, pi], first angle fixed to zero.  `scale` records the
/// removed length unit.
struct RangeAngleSequence {
  std::vector<double> ranges;
  std::vector<double> angles;
  double scale = 1.0;

  int size() const { return static_cast<int>(ranges.size()); }
};

struct Curve {
  std::string id;
  std::vector<Vec2> points;
};

using CurveSet = std::vector<Curve>;

struct SynthConfig {
  std::uint64_t seed = 0;
  int count = 100;
  int check_waypoints = 30;  // collocation size used for rejection testing
};

/// One labeled training/evaluation sample: invariant inputs plus the
/// unit-total time fractions produced by the descent refinement.
struct LabeledSample {
  std::string curve_id;
  int waypoint_count = 0;  // N; the sequences have length N - 1
  RangeAngleSequence input;
  std::vector<double> fractions;
  bool converged = false;
};

struct DatasetSplit {
  std::vector<int> train;       // sample indices
  std::vector<int> validation;  // disjoint from train by curve id
};

RangeAngleSequence to_range_angle(const WaypointPath& path);

/// Rebuild waypoints from a range-angle sequence given the pose the encoding
/// removed: first point, heading of the first segment, and the length scale.
WaypointPath from_range_angle(const RangeAngleSequence& seq,
                              const Vec2& first_point = Vec2::Zero(),
                              double first_heading = 0.0);

/// Resample a polyline to `n` waypoints at equal arc-length spacing,
/// endpoints preserved exactly.  Consecutive duplicate input points are
/// merged first.
WaypointPath collocate(const std::vector<Vec2>& polyline, int n);

/// Seeded family of smooth random curves (spline-through-random-knots and
/// Lissajous figures).  Curves failing the collocation smoke test are
/// regenerated, so every returned curve collocates cleanly.
CurveSet synth_curves(const SynthConfig& config);

CurveSet load_curves_jsonl(const std::string& path);
void save_curves_jsonl(const CurveSet& curves, const std::string& path);

struct DatasetBuildStats {
  int produced = 0;
  int rejected = 0;       // degenerate collocations
  int unconverged = 0;    // stored with converged = false
};

/// Label every (curve, n) pair: collocate, TVP-initialise, descend, store the
/// optimal fractions.  Output order is (curve order, ascending n) no matter
/// how many worker threads run.
std::vector<LabeledSample> build_dataset(const CurveSet& curves,
                                         const std::vector<int>& waypoint_counts,
                                         const timealloc::TvpLimits& limits,
                                         const timealloc::BgdConfig& cfg,
                                         int threads = 1,
                                         DatasetBuildStats* stats = nullptr);

void save_dataset_jsonl(const std::vector<LabeledSample>& samples,
                        const std::string& path);
std::vector<LabeledSample> load_dataset_jsonl(const std::string& path);

/// Train/validation split disjoint by curve id at the given ratio
/// (train_parts : 1).  Samples of one curve never straddle the split.
DatasetSplit split_by_curve(const std::vector<LabeledSample>& samples,
                            int train_parts = 5);

}  // namespace snaptraj::dataprep
