#include "snaptraj/dataprep.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace snaptraj::dataprep {
namespace {

using json = nlohmann::ordered_json;

std::vector<Vec2> merge_duplicates(const std::vector<Vec2>& pts) {
  std::vector<Vec2> out;
  out.reserve(pts.size());
  for (const auto& p : pts) {
    if (out.empty() || (p - out.back()).norm() > 0.0) out.push_back(p);
  }
  return out;
}

// Centripetal-free Catmull-Rom segment between p1 and p2.
Vec2 catmull_rom(const Vec2& p0, const Vec2& p1, const Vec2& p2,
                 const Vec2& p3, double u) {
  const double u2 = u * u, u3 = u2 * u;
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * u +
                (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u3);
}

Curve make_spline_curve(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> knot_count(4, 9);
  std::uniform_real_distribution<double> coord(0.0, 10.0);
  const int k = knot_count(rng);
  std::vector<Vec2> knots(k);
  for (auto& p : knots) p = Vec2(coord(rng), coord(rng));

  std::vector<Vec2> pts;
  const int per_span = 40;
  for (int i = 0; i + 1 < k; ++i) {
    const Vec2& p0 = knots[std::max(i - 1, 0)];
    const Vec2& p1 = knots[i];
    const Vec2& p2 = knots[i + 1];
    const Vec2& p3 = knots[std::min(i + 2, k - 1)];
    for (int j = 0; j < per_span; ++j)
      pts.push_back(catmull_rom(p0, p1, p2, p3, double(j) / per_span));
  }
  pts.push_back(knots.back());
  return Curve{"", std::move(pts)};
}

Curve make_lissajous_curve(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> freq(1, 4);
  std::uniform_real_distribution<double> amp(2.0, 6.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> span(0.5, 1.75);
  const double fa = freq(rng), fb = freq(rng);
  const double ax = amp(rng), ay = amp(rng);
  const double ph = phase(rng);
  const double total = span(rng) * std::numbers::pi;

  std::vector<Vec2> pts;
  const int samples = 300;
  for (int i = 0; i <= samples; ++i) {
    const double u = total * i / samples;
    pts.push_back(Vec2(ax * std::sin(fa * u + ph), ay * std::sin(fb * u)));
  }
  return Curve{"", std::move(pts)};
}

bool curve_usable(const Curve& c, int check_n) {
  double w = 0.0, h = 0.0;
  double xmin = c.points.front().x(), xmax = xmin;
  double ymin = c.points.front().y(), ymax = ymin;
  for (const auto& p : c.points) {
    xmin = std::min(xmin, p.x());
    xmax = std::max(xmax, p.x());
    ymin = std::min(ymin, p.y());
    ymax = std::max(ymax, p.y());
  }
  w = xmax - xmin;
  h = ymax - ymin;
  if (!(w > 0.0) || !(h > 0.0)) return false;
  try {
    WaypointPath wp = collocate(c.points, check_n);
    to_range_angle(wp);
  } catch (const Error&) {
    return false;
  }
  return true;
}

}  // namespace

RangeAngleSequence to_range_angle(const WaypointPath& path) {
  const int m = path.segment_count();
  RangeAngleSequence seq;
  seq.ranges.resize(m);
  seq.angles.resize(m);

  double max_len = 0.0;
  for (int i = 0; i < m; ++i) {
    const double d = path.segment_length(i);
    if (!(d > 0.0))
      raise(ErrorCode::DegenerateSegment,
            "zero-length segment " + std::to_string(i));
    seq.ranges[i] = d;
    max_len = std::max(max_len, d);
  }

  seq.angles[0] = 0.0;
  for (int i = 1; i < m; ++i) {
    const Vec2 prev = path.points[i] - path.points[i - 1];
    const Vec2 cur = path.points[i + 1] - path.points[i];
    const double cross = prev.x() * cur.y() - prev.y() * cur.x();
    const double dot = prev.dot(cur);
    double theta = std::atan2(cross, dot);
    if (theta <= -std::numbers::pi) theta = std::numbers::pi;  // branch (-pi, pi]
    seq.angles[i] = theta;
  }

  seq.scale = max_len;
  for (double& d : seq.ranges) d /= max_len;
  return seq;
}

WaypointPath from_range_angle(const RangeAngleSequence& seq,
                              const Vec2& first_point, double first_heading) {
  std::vector<Vec2> pts;
  pts.reserve(seq.size() + 1);
  pts.push_back(first_point);
  double heading = first_heading;
  for (int i = 0; i < seq.size(); ++i) {
    heading += (i == 0) ? 0.0 : seq.angles[i];
    const double d = seq.ranges[i] * seq.scale;
    pts.push_back(pts.back() + d * Vec2(std::cos(heading), std::sin(heading)));
  }
  return WaypointPath(std::move(pts));
}

WaypointPath collocate(const std::vector<Vec2>& polyline, int n) {
  if (n < 2) raise(ErrorCode::BadInput, "need at least 2 waypoints");
  std::vector<Vec2> pts = merge_duplicates(polyline);
  if (pts.size() < 2)
    raise(ErrorCode::DegenerateSegment, "polyline has no extent");

  std::vector<double> cum(pts.size(), 0.0);
  for (size_t i = 1; i < pts.size(); ++i)
    cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
  const double total = cum.back();
  if (!(total > 0.0))
    raise(ErrorCode::DegenerateSegment, "polyline arc length is zero");

  std::vector<Vec2> out(n);
  out.front() = pts.front();
  out.back() = pts.back();
  size_t seg = 0;
  for (int k = 1; k + 1 < n; ++k) {
    const double target = total * k / (n - 1);
    while (seg + 2 < pts.size() && cum[seg + 1] < target) ++seg;
    const double span = cum[seg + 1] - cum[seg];
    const double u = (target - cum[seg]) / span;
    out[k] = pts[seg] + u * (pts[seg + 1] - pts[seg]);
  }

  for (int k = 0; k + 1 < n; ++k)
    if ((out[k + 1] - out[k]).norm() <= 1e-12 * total)
      raise(ErrorCode::DuplicateOutput,
            "collocation to " + std::to_string(n) +
                " points produced duplicate consecutive waypoints");
  return WaypointPath(std::move(out));
}

CurveSet synth_curves(const SynthConfig& config) {
  CurveSet curves;
  curves.reserve(config.count);
  for (int i = 0; i < config.count; ++i) {
    Curve c;
    for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
      std::seed_seq seq{config.seed, static_cast<std::uint64_t>(i), attempt};
      std::mt19937_64 rng(seq);
      c = (i % 2 == 0) ? make_spline_curve(rng) : make_lissajous_curve(rng);
      if (curve_usable(c, config.check_waypoints)) break;
    }
    char id[32];
    std::snprintf(id, sizeof(id), "synth-%06d", i);
    c.id = id;
    curves.push_back(std::move(c));
  }
  return curves;
}

CurveSet load_curves_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::Io, "cannot open curve file: " + path);
  CurveSet curves;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("id") || !j.contains("points"))
      raise(ErrorCode::Io,
            path + ":" + std::to_string(lineno) + ": bad curve record");
    Curve c;
    c.id = j["id"].get<std::string>();
    for (const auto& p : j["points"])
      c.points.push_back(Vec2(p[0].get<double>(), p[1].get<double>()));
    if (merge_duplicates(c.points).size() < 2)
      raise(ErrorCode::Io, path + ":" + std::to_string(lineno) +
                               ": curve needs 2 distinct points");
    curves.push_back(std::move(c));
  }
  return curves;
}

void save_curves_jsonl(const CurveSet& curves, const std::string& path) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::Io, "cannot write curve file: " + path);
  for (const auto& c : curves) {
    json pts = json::array();
    for (const auto& p : c.points) pts.push_back({p.x(), p.y()});
    json j;
    j["id"] = c.id;
    j["points"] = std::move(pts);
    out << j.dump() << '\n';
  }
}

std::vector<LabeledSample> build_dataset(const CurveSet& curves,
                                         const std::vector<int>& waypoint_counts,
                                         const timealloc::TvpLimits& limits,
                                         const timealloc::BgdConfig& cfg,
                                         int threads,
                                         DatasetBuildStats* stats) {
  struct Job {
    const Curve* curve;
    int n;
  };
  std::vector<Job> jobs;
  for (const auto& c : curves)
    for (int n : waypoint_counts) jobs.push_back({&c, n});

  std::vector<std::optional<LabeledSample>> slots(jobs.size());
  auto work = [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      try {
        WaypointPath wp = collocate(jobs[i].curve->points, jobs[i].n);
        RangeAngleSequence ra = to_range_angle(wp);
        TimeAllocation init = timealloc::tvp_allocate(wp, limits);
        auto refined = timealloc::refine_bgd(wp, init, cfg);
        LabeledSample s;
        s.curve_id = jobs[i].curve->id;
        s.waypoint_count = jobs[i].n;
        s.input = std::move(ra);
        s.fractions = refined.allocation.fractions();
        s.converged = refined.converged;
        slots[i] = std::move(s);
      } catch (const Error&) {
        // degenerate sample: dropped, counted below
      }
    }
  };

  threads = std::max(threads, 1);
  if (threads == 1 || jobs.size() < 2) {
    work(0, jobs.size());
  } else {
    std::vector<std::thread> pool;
    const size_t chunk = (jobs.size() + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const size_t begin = t * chunk;
      const size_t end = std::min(jobs.size(), begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(work, begin, end);
    }
    for (auto& th : pool) th.join();
  }

  std::vector<LabeledSample> out;
  out.reserve(jobs.size());
  DatasetBuildStats local;
  for (auto& slot : slots) {
    if (!slot) {
      ++local.rejected;
      continue;
    }
    if (!slot->converged) ++local.unconverged;
    ++local.produced;
    out.push_back(std::move(*slot));
  }
  if (stats) *stats = local;
  return out;
}

void save_dataset_jsonl(const std::vector<LabeledSample>& samples,
                        const std::string& path) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::Io, "cannot write dataset file: " + path);
  for (const auto& s : samples) {
    json j;
    j["id"] = s.curve_id;
    j["n"] = s.waypoint_count;
    j["d"] = s.input.ranges;
    j["theta"] = s.input.angles;
    j["fractions"] = s.fractions;
    j["converged"] = s.converged;
    out << j.dump() << '\n';
  }
}

std::vector<LabeledSample> load_dataset_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::Io, "cannot open dataset file: " + path);
  std::vector<LabeledSample> samples;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      raise(ErrorCode::Io,
            path + ":" + std::to_string(lineno) + ": bad dataset record");
    LabeledSample s;
    s.curve_id = j["id"].get<std::string>();
    s.waypoint_count = j["n"].get<int>();
    s.input.ranges = j["d"].get<std::vector<double>>();
    s.input.angles = j["theta"].get<std::vector<double>>();
    s.input.scale = 1.0;
    s.fractions = j["fractions"].get<std::vector<double>>();
    s.converged = j["converged"].get<bool>();
    if (s.input.ranges.size() != s.input.angles.size() ||
        s.input.ranges.size() != s.fractions.size() ||
        static_cast<int>(s.fractions.size()) != s.waypoint_count - 1)
      raise(ErrorCode::Io,
            path + ":" + std::to_string(lineno) + ": inconsistent lengths");
    samples.push_back(std::move(s));
  }
  return samples;
}

DatasetSplit split_by_curve(const std::vector<LabeledSample>& samples,
                            int train_parts) {
  if (train_parts < 1) raise(ErrorCode::BadInput, "train_parts must be >= 1");
  std::unordered_map<std::string, int> curve_index;
  std::vector<std::string> order;
  for (const auto& s : samples) {
    if (curve_index.emplace(s.curve_id, static_cast<int>(order.size())).second)
      order.push_back(s.curve_id);
  }
  DatasetSplit split;
  const int cycle = train_parts + 1;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
    const int ci = curve_index[samples[i].curve_id];
    if (ci % cycle == cycle - 1)
      split.validation.push_back(i);
    else
      split.train.push_back(i);
  }
  return split;
}

}  // namespace snaptraj::dataprep
