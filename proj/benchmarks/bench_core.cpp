#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include "metapu/autodiff.hpp"
#include "metapu/baselines.hpp"
#include "metapu/metatrain.hpp"
#include "metapu/model.hpp"
#include "metapu/tasks.hpp"

namespace {

using namespace metapu;

// K + lambda I with positive embeddings, the system solved in every adaptation.
void BM_SolveSpd(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  Rng rng(1);
  std::normal_distribution<double> g;
  Matrix h(30, m);
  for (ad::Index i = 0; i < h.size(); ++i) h.data()[i] = std::log1p(std::exp(g(rng)));
  Matrix a = h.transpose() * h / 30.0;
  a.diagonal().array() += 0.1;
  const Matrix b = Matrix::Ones(m, 1);
  for (auto _ : state) {
    ad::Tape tape;
    benchmark::DoNotOptimize(ad::solve_spd(tape.constant(a), tape.constant(b)).value());
  }
}
BENCHMARK(BM_SolveSpd)->Arg(8)->Arg(32)->Arg(100);

BenchmarkSplit bench_tasks() {
  BenchmarkConfig cfg;
  cfg.total_tasks = 6;
  cfg.n_source = 4;
  cfg.n_validation = 1;
  cfg.n_target = 1;
  return build_synthetic_benchmark(3, cfg);
}

ModelDims full_dims(int k) {
  ModelDims d;
  d.repr_dim = k;
  return d;
}

// Untaped adaptation to one 30-instance support set.
void BM_Adapt(benchmark::State& state) {
  const auto data = bench_tasks();
  const MetaParams theta = MetaParams::init(full_dims(static_cast<int>(state.range(0))), 0.1, 2);
  EpisodeConfig ecfg;
  Rng rng(4);
  const Episode ep = sample_episode(data.source[0], ecfg, rng);
  for (auto _ : state) benchmark::DoNotOptimize(adapt(ep.support, theta).pi_hat);
}
BENCHMARK(BM_Adapt)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

// One meta-training step: taped adaptation, smoothed query risk, backward pass and Adam.
void BM_TrainStep(benchmark::State& state) {
  const auto data = bench_tasks();
  MetaParams theta = MetaParams::init(full_dims(static_cast<int>(state.range(0))), 0.1, 2);
  nn::Adam opt(1e-3);
  EpisodeConfig ecfg;
  ecfg.support_pos_choices = {1, 3, 5};
  Rng rng(5);
  const Episode ep = sample_episode(data.source[0], ecfg, rng);
  for (auto _ : state) benchmark::DoNotOptimize(train_step(theta, opt, ep, 10.0).loss);
}
BENCHMARK(BM_TrainStep)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

// Kernel density-ratio baseline on a 30-instance support set.
void BM_FitDre(benchmark::State& state) {
  const auto data = bench_tasks();
  EpisodeConfig ecfg;
  Rng rng(6);
  const Episode ep = sample_episode(data.source[0], ecfg, rng);
  for (auto _ : state) benchmark::DoNotOptimize(fit_dre_kernel(ep.support, 0.1, 0.5).model.weights);
}
BENCHMARK(BM_FitDre)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
