// Serial reference kernels against the OpenMP versions.

#include <vector>

#include <benchmark/benchmark.h>

#include "milsurv/kernels.hpp"
#include "milsurv/rng.hpp"

using namespace milsurv;
using kernels::Trans;

namespace {

struct GemmInputs {
  std::size_t m, n, k;
  std::vector<float> a, b, c;

  GemmInputs(std::size_t m_, std::size_t n_, std::size_t k_) : m(m_), n(n_), k(k_), a(m * k), b(k * n), c(m * n) {
    Rng rng(1);
    for (auto& v : a) v = static_cast<float>(rng.normal());
    for (auto& v : b) v = static_cast<float>(rng.normal());
  }
};

// Shapes from training: bag × embedding, embedding × classifier, attention scores.
GemmInputs inputs_for(const benchmark::State& state) {
  return {static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
          static_cast<std::size_t>(state.range(2))};
}

void gemm_args(benchmark::internal::Benchmark* b) {
  b->Args({200, 512, 1024})->Args({200, 4, 512})->Args({256, 256, 64})->Args({64, 64, 64});
}

void BM_GemmReference(benchmark::State& state) {
  auto in = inputs_for(state);
  for (auto _ : state) {
    kernels::reference::gemm<float>(Trans::no, Trans::no, in.m, in.n, in.k, in.a, in.b, in.c);
    benchmark::DoNotOptimize(in.c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.m * in.n * in.k));
}

void BM_GemmOmp(benchmark::State& state) {
  auto in = inputs_for(state);
  for (auto _ : state) {
    kernels::gemm<float>(Trans::no, Trans::no, in.m, in.n, in.k, in.a, in.b, in.c);
    benchmark::DoNotOptimize(in.c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.m * in.n * in.k));
}

struct PairInputs {
  std::vector<double> risk, time;
  std::vector<std::uint8_t> event;

  explicit PairInputs(std::size_t n) : risk(n), time(n), event(n) {
    Rng rng(2);
    for (std::size_t i = 0; i < n; ++i) {
      risk[i] = rng.normal();
      time[i] = rng.exponential(0.05);
      event[i] = rng.bernoulli(0.55);
    }
  }
};

void BM_ConcordanceReference(benchmark::State& state) {
  PairInputs in(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::reference::concordance_pairs(in.risk, in.time, in.event));
}

void BM_ConcordanceOmp(benchmark::State& state) {
  PairInputs in(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::concordance_pairs(in.risk, in.time, in.event));
}

}  // namespace

BENCHMARK(BM_GemmReference)->Apply(gemm_args);
BENCHMARK(BM_GemmOmp)->Apply(gemm_args);
BENCHMARK(BM_ConcordanceReference)->Arg(80)->Arg(400)->Arg(2000);
BENCHMARK(BM_ConcordanceOmp)->Arg(80)->Arg(400)->Arg(2000);

BENCHMARK_MAIN();
