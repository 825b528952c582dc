#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "snaptraj/dataprep.hpp"
#include "test_helpers.hpp"

using namespace snaptraj;
using namespace snaptraj::dataprep;
using testing_support::random_path;

namespace {

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("range-angle encoding of a unit right turn") {
  WaypointPath path({{0.0, 0.0}, {1.0, 0.0}, {1.0, 1.0}});
  RangeAngleSequence seq = to_range_angle(path);
  REQUIRE(seq.size() == 2);
  CHECK(seq.ranges[0] == doctest::Approx(1.0));
  CHECK(seq.ranges[1] == doctest::Approx(1.0));
  CHECK(seq.angles[0] == 0.0);
  CHECK(seq.angles[1] == doctest::Approx(std::numbers::pi / 2));
  CHECK(seq.scale == doctest::Approx(1.0));
}

TEST_CASE("collinear waypoints have zero turn angles") {
  WaypointPath path({{0.0, 0.0}, {1.0, 1.0}, {2.5, 2.5}, {4.0, 4.0}});
  RangeAngleSequence seq = to_range_angle(path);
  for (double a : seq.angles) CHECK(a == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("the longest segment is normalised to exactly one") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    WaypointPath path = random_path(rng, 6);
    RangeAngleSequence seq = to_range_angle(path);
    double mx = 0.0;
    for (double d : seq.ranges) {
      CHECK(d > 0.0);
      CHECK(d <= 1.0);
      mx = std::max(mx, d);
    }
    CHECK(mx == 1.0);
    CHECK(seq.angles[0] == 0.0);
    for (double a : seq.angles) {
      CHECK(a > -std::numbers::pi);
      CHECK(a <= std::numbers::pi);
    }
  }
}

TEST_CASE("encoding is invariant to rotation, translation and scaling") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> scl(0.2, 5.0);
  std::uniform_real_distribution<double> shift(-30.0, 30.0);
  for (int trial = 0; trial < 20; ++trial) {
    WaypointPath path = random_path(rng, 7);
    RangeAngleSequence a = to_range_angle(path);
    WaypointPath moved =
        path.transformed(scl(rng), angle(rng), Vec2(shift(rng), shift(rng)));
    RangeAngleSequence b = to_range_angle(moved);
    for (int i = 0; i < a.size(); ++i) {
      CHECK(a.ranges[i] == doctest::Approx(b.ranges[i]).epsilon(1e-9));
      CHECK(a.angles[i] == doctest::Approx(b.angles[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("waypoints rebuild exactly from ranges, angles and pose") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    WaypointPath path = random_path(rng, 6);
    RangeAngleSequence seq = to_range_angle(path);
    const Vec2 first_dir = path.points[1] - path.points[0];
    const double heading = std::atan2(first_dir.y(), first_dir.x());
    WaypointPath rebuilt = from_range_angle(seq, path.points[0], heading);
    REQUIRE(rebuilt.waypoint_count() == path.waypoint_count());
    for (int i = 0; i < path.waypoint_count(); ++i)
      CHECK((rebuilt.points[i] - path.points[i]).norm() < 1e-9);
  }
}

TEST_CASE("zero-length segments are rejected by the encoder") {
  WaypointPath dup({{0.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}});
  CHECK_THROWS_AS(to_range_angle(dup), Error);
}

TEST_CASE("collocation spaces points uniformly along a straight line") {
  std::vector<Vec2> line = {{0.0, 0.0}, {3.0, 0.0}};
  WaypointPath wp = collocate(line, 4);
  REQUIRE(wp.waypoint_count() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(wp.points[i].x() == doctest::Approx(double(i)).epsilon(1e-12));
    CHECK(wp.points[i].y() == 0.0);
  }
}

TEST_CASE("collocation to two points keeps exactly the endpoints") {
  std::vector<Vec2> zig = {{0.0, 0.0}, {1.0, 2.0}, {-1.0, 3.0}, {4.0, 4.0}};
  WaypointPath wp = collocate(zig, 2);
  CHECK(wp.points.front() == zig.front());
  CHECK(wp.points.back() == zig.back());
}

TEST_CASE("collocating a dense circle gives equal chords") {
  std::vector<Vec2> circle;
  for (int i = 0; i <= 1000; ++i) {
    const double a = 1.8 * std::numbers::pi * i / 1000.0;
    circle.push_back(Vec2(std::cos(a), std::sin(a)));
  }
  WaypointPath wp = collocate(circle, 10);
  std::vector<double> chords;
  for (int i = 0; i + 1 < 10; ++i)
    chords.push_back(wp.segment_length(i));
  for (double c : chords)
    CHECK(c == doctest::Approx(chords.front()).epsilon(1e-3));
}

TEST_CASE("collocation merges duplicate input points first") {
  std::vector<Vec2> noisy = {{0.0, 0.0}, {0.0, 0.0}, {1.0, 0.0},
                             {1.0, 0.0}, {2.0, 0.0}};
  WaypointPath wp = collocate(noisy, 3);
  CHECK(wp.points[1].x() == doctest::Approx(1.0));
}

TEST_CASE("degenerate collocation requests fail loudly") {
  std::vector<Vec2> point = {{1.0, 1.0}, {1.0, 1.0}};
  CHECK_THROWS_AS(collocate(point, 3), Error);
  std::vector<Vec2> line = {{0.0, 0.0}, {1.0, 0.0}};
  CHECK_THROWS_AS(collocate(line, 1), Error);
}

TEST_CASE("synthetic curves are deterministic per seed") {
  SynthConfig cfg;
  cfg.seed = 99;
  cfg.count = 12;
  CurveSet a = synth_curves(cfg);
  CurveSet b = synth_curves(cfg);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    REQUIRE(a[i].points.size() == b[i].points.size());
    for (size_t j = 0; j < a[i].points.size(); ++j)
      CHECK(a[i].points[j] == b[i].points[j]);  // bit-identical
  }
  SynthConfig other = cfg;
  other.seed = 100;
  CurveSet c = synth_curves(other);
  bool any_diff = false;
  for (size_t i = 0; i < a.size() && !any_diff; ++i)
    any_diff = a[i].points != c[i].points;
  CHECK(any_diff);
}

TEST_CASE("synthetic curves collocate cleanly and have real extent") {
  SynthConfig cfg;
  cfg.seed = 4;
  cfg.count = 1000;
  cfg.check_waypoints = 12;
  CurveSet curves = synth_curves(cfg);
  int failures = 0;
  for (const auto& c : curves) {
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& p : c.points) {
      xmin = std::min(xmin, p.x());
      xmax = std::max(xmax, p.x());
      ymin = std::min(ymin, p.y());
      ymax = std::max(ymax, p.y());
    }
    CHECK(xmax - xmin > 0.0);
    CHECK(ymax - ymin > 0.0);
    try {
      WaypointPath wp = collocate(c.points, 12);
      to_range_angle(wp);
    } catch (const Error&) {
      ++failures;
    }
  }
  CHECK(failures == 0);
}

TEST_CASE("curves survive a jsonl round trip") {
  SynthConfig cfg;
  cfg.seed = 8;
  cfg.count = 5;
  CurveSet curves = synth_curves(cfg);
  const std::string path = temp_file("snaptraj_curves_test.jsonl");
  save_curves_jsonl(curves, path);
  CurveSet loaded = load_curves_jsonl(path);
  REQUIRE(loaded.size() == curves.size());
  for (size_t i = 0; i < curves.size(); ++i) {
    CHECK(loaded[i].id == curves[i].id);
    REQUIRE(loaded[i].points.size() == curves[i].points.size());
    for (size_t j = 0; j < curves[i].points.size(); ++j)
      CHECK((loaded[i].points[j] - curves[i].points[j]).norm() < 1e-12);
  }
  std::remove(path.c_str());
}

TEST_CASE("dataset labeling produces unit-sum fractions and full bookkeeping") {
  SynthConfig cfg;
  cfg.seed = 21;
  cfg.count = 4;
  CurveSet curves = synth_curves(cfg);
  timealloc::BgdConfig bgd;
  bgd.max_iters = 15;
  DatasetBuildStats stats;
  auto samples = build_dataset(curves, {4, 6}, {}, bgd, 1, &stats);
  CHECK(stats.produced + stats.rejected ==
        static_cast<int>(curves.size()) * 2);
  CHECK(samples.size() == static_cast<size_t>(stats.produced));
  for (const auto& s : samples) {
    double sum = 0.0;
    for (double f : s.fractions) sum += f;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s.input.size() == s.waypoint_count - 1);
  }
}

TEST_CASE("labels are invariant when the source curve is rotated") {
  SynthConfig cfg;
  cfg.seed = 23;
  cfg.count = 2;
  CurveSet curves = synth_curves(cfg);
  timealloc::BgdConfig bgd;
  bgd.max_iters = 25;
  auto base = build_dataset(curves, {5}, {}, bgd, 1);

  CurveSet rotated = curves;
  Eigen::Rotation2Dd rot(1.1);
  for (auto& c : rotated)
    for (auto& p : c.points) p = rot * p;
  auto again = build_dataset(rotated, {5}, {}, bgd, 1);

  REQUIRE(base.size() == again.size());
  for (size_t i = 0; i < base.size(); ++i)
    for (size_t k = 0; k < base[i].fractions.size(); ++k)
      CHECK(base[i].fractions[k] ==
            doctest::Approx(again[i].fractions[k]).epsilon(1e-4));
}

TEST_CASE("parallel labeling is byte-identical to sequential labeling") {
  SynthConfig cfg;
  cfg.seed = 27;
  cfg.count = 6;
  CurveSet curves = synth_curves(cfg);
  timealloc::BgdConfig bgd;
  bgd.max_iters = 10;
  auto seq = build_dataset(curves, {4, 7}, {}, bgd, 1);
  auto par = build_dataset(curves, {4, 7}, {}, bgd, 4);
  const std::string p1 = temp_file("snaptraj_ds_seq.jsonl");
  const std::string p2 = temp_file("snaptraj_ds_par.jsonl");
  save_dataset_jsonl(seq, p1);
  save_dataset_jsonl(par, p2);
  std::ifstream f1(p1), f2(p2);
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("datasets survive a jsonl round trip") {
  SynthConfig cfg;
  cfg.seed = 29;
  cfg.count = 3;
  CurveSet curves = synth_curves(cfg);
  timealloc::BgdConfig bgd;
  bgd.max_iters = 5;
  auto samples = build_dataset(curves, {4}, {}, bgd, 1);
  const std::string path = temp_file("snaptraj_ds_roundtrip.jsonl");
  save_dataset_jsonl(samples, path);
  auto loaded = load_dataset_jsonl(path);
  REQUIRE(loaded.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].curve_id == samples[i].curve_id);
    CHECK(loaded[i].waypoint_count == samples[i].waypoint_count);
    CHECK(loaded[i].converged == samples[i].converged);
    for (int k = 0; k < samples[i].input.size(); ++k) {
      CHECK(loaded[i].input.ranges[k] == samples[i].input.ranges[k]);
      CHECK(loaded[i].input.angles[k] == samples[i].input.angles[k]);
      CHECK(loaded[i].fractions[k] == samples[i].fractions[k]);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("train/validation split never straddles a curve") {
  SynthConfig cfg;
  cfg.seed = 31;
  cfg.count = 13;
  CurveSet curves = synth_curves(cfg);
  timealloc::BgdConfig bgd;
  bgd.max_iters = 3;
  auto samples = build_dataset(curves, {3, 4, 5}, {}, bgd, 1);
  DatasetSplit split = split_by_curve(samples, 5);
  CHECK(split.train.size() + split.validation.size() == samples.size());
  std::set<std::string> train_ids, val_ids;
  for (int i : split.train) train_ids.insert(samples[i].curve_id);
  for (int i : split.validation) val_ids.insert(samples[i].curve_id);
  for (const auto& id : val_ids) CHECK(train_ids.count(id) == 0);
  CHECK(!val_ids.empty());
  CHECK(train_ids.size() > 4 * val_ids.size() - 2);
}
