#include <benchmark/benchmark.h>

#include <random>

#include "snaptraj/timealloc.hpp"
#include "snaptraj/trajopt.hpp"

namespace bm = benchmark;
using namespace snaptraj;

namespace {

WaypointPath make_path(int waypoints, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 8.0);
  std::vector<Vec2> pts;
  while (static_cast<int>(pts.size()) < waypoints) {
    Vec2 p(u(rng), u(rng));
    if (!pts.empty() && (p - pts.back()).norm() < 0.4) continue;
    pts.push_back(p);
  }
  return WaypointPath(std::move(pts));
}

}  // namespace

static void BM_SolveMinSnap(bm::State& state) {
  const int n = static_cast<int>(state.range(0));
  WaypointPath path = make_path(n, 42);
  TimeAllocation alloc = timealloc::tvp_allocate(path);
  for (auto _ : state) {
    auto sol = trajopt::solve_min_snap(path, alloc);
    bm::DoNotOptimize(sol.cost.value);
  }
}
BENCHMARK(BM_SolveMinSnap)->Arg(4)->Arg(8)->Arg(12)->Arg(30);

static void BM_SnapQuadrature(bm::State& state) {
  WaypointPath path = make_path(10, 42);
  TimeAllocation alloc = timealloc::tvp_allocate(path);
  auto sol = trajopt::solve_min_snap(path, alloc);
  for (auto _ : state) {
    auto cost = trajopt::snap_cost_quadrature(sol.trajectory);
    bm::DoNotOptimize(cost.value);
  }
}
BENCHMARK(BM_SnapQuadrature);

static void BM_RefineBgd(bm::State& state) {
  const int n = static_cast<int>(state.range(0));
  WaypointPath path = make_path(n, 7);
  TimeAllocation init = timealloc::tvp_allocate(path);
  timealloc::BgdConfig cfg;
  cfg.max_iters = 20;
  for (auto _ : state) {
    auto res = timealloc::refine_bgd(path, init, cfg);
    bm::DoNotOptimize(res.cost.value);
  }
}
BENCHMARK(BM_RefineBgd)->Arg(4)->Arg(8)->Unit(bm::kMillisecond);

BENCHMARK_MAIN();
