#include <benchmark/benchmark.h>

#include "rwdre/engine.hpp"
#include "rwdre/rng.hpp"

namespace {

void BM_counter_block(benchmark::State& state) {
  rwdre::RngStream rng(1, 0, rwdre::StreamPurpose::aux);
  std::uint64_t acc = 0;
  for (auto _ : state) acc ^= rng.bits64();
  benchmark::DoNotOptimize(acc);
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_counter_block);

void BM_uniform(benchmark::State& state) {
  rwdre::RngStream rng(1, 0, rwdre::StreamPurpose::aux);
  double acc = 0;
  for (auto _ : state) acc += rng.uniform();
  benchmark::DoNotOptimize(acc);
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_uniform);

void BM_resampling_evolve(benchmark::State& state) {
  const auto engine = rwdre::make_resampling_engine(1.0);
  const rwdre::TorusLattice lat(1, state.range(0));
  rwdre::RngStream rng(1, 0, rwdre::StreamPurpose::environment);
  rwdre::Configuration c = engine->make_config(lat, 0);
  for (auto _ : state) engine->evolve_inplace(c, 1.0, rng);
  state.SetItemsProcessed(state.iterations() * lat.n_sites());
}
BENCHMARK(BM_resampling_evolve)->Arg(64)->Arg(1024);

void BM_glauber_evolve(benchmark::State& state) {
  const auto engine = rwdre::make_glauber_engine(0.4, 1.0);
  const rwdre::TorusLattice lat(1, state.range(0));
  rwdre::RngStream rng(1, 0, rwdre::StreamPurpose::environment);
  rwdre::Configuration c = engine->make_config(lat, 0);
  for (auto _ : state) engine->evolve_inplace(c, 1.0, rng);
  state.SetItemsProcessed(state.iterations() * lat.n_sites());
}
BENCHMARK(BM_glauber_evolve)->Arg(64)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
