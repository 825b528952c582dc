#include <benchmark/benchmark.h>

#include <random>

#include "snaptraj/model.hpp"

namespace bm = benchmark;
using namespace snaptraj;

namespace {

dataprep::RangeAngleSequence make_input(int m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::uniform_real_distribution<double> a(-1.5, 1.5);
  dataprep::RangeAngleSequence seq;
  seq.ranges.resize(m);
  seq.angles.resize(m);
  double mx = 0.0;
  for (int i = 0; i < m; ++i) {
    seq.ranges[i] = u(rng);
    seq.angles[i] = (i == 0) ? 0.0 : a(rng);
    mx = std::max(mx, seq.ranges[i]);
  }
  for (double& d : seq.ranges) d /= mx;
  return seq;
}

model::ModelConfig small_config() {
  model::ModelConfig cfg;
  cfg.embed_dim = 32;
  cfg.num_heads = 4;
  cfg.enc_layers = 2;
  cfg.dec_layers = 2;
  cfg.ffn_dim = 256;
  return cfg;
}

}  // namespace

static void BM_AutoregressiveDecode(bm::State& state) {
  const int m = static_cast<int>(state.range(0));
  model::TransformerModel<float> net(small_config());
  net.init_parameters(3);
  auto input = make_input(m, 11);
  for (auto _ : state) {
    auto fractions = net.predict(input);
    bm::DoNotOptimize(fractions.data());
  }
}
BENCHMARK(BM_AutoregressiveDecode)->Arg(4)->Arg(11)->Arg(29)
    ->Unit(bm::kMillisecond);

static void BM_TeacherForcedStep(bm::State& state) {
  const int m = static_cast<int>(state.range(0));
  model::TransformerModel<float> net(small_config());
  net.init_parameters(3);
  auto input = make_input(m, 11);
  std::vector<double> target(m, 1.0 / m);
  for (auto _ : state) {
    auto out = net.forward_teacher_forced(input, target, false);
    bm::DoNotOptimize(out.predictions.data());
  }
}
BENCHMARK(BM_TeacherForcedStep)->Arg(4)->Arg(11)->Unit(bm::kMicrosecond);

BENCHMARK_MAIN();
