#include <benchmark/benchmark.h>

#include <vector>

#include "pointlama/serialization.hpp"

using namespace pointlama;

namespace {

std::vector<GridCell> cells(std::size_t n, unsigned bits) {
  Rng rng(3);
  std::vector<GridCell> out(n);
  for (auto& c : out)
    for (auto& v : c) v = static_cast<std::uint32_t>(rng.index(std::size_t{1} << bits));
  return out;
}

void BM_HilbertIndex(benchmark::State& state) {
  const unsigned bits = static_cast<unsigned>(state.range(0));
  const auto cs = cells(4096, bits);
  for (auto _ : state)
    for (const auto& c : cs) benchmark::DoNotOptimize(hilbert_index(c, bits));
  state.SetItemsProcessed(state.iterations() * cs.size());
}

void BM_TransHilbertIndex(benchmark::State& state) {
  const unsigned bits = static_cast<unsigned>(state.range(0));
  const auto cs = cells(4096, bits);
  for (auto _ : state)
    for (const auto& c : cs) benchmark::DoNotOptimize(trans_hilbert_index(c, bits));
  state.SetItemsProcessed(state.iterations() * cs.size());
}

void BM_HilbertInverse(benchmark::State& state) {
  const unsigned bits = static_cast<unsigned>(state.range(0));
  std::uint64_t i = 0;
  const std::uint64_t n = std::uint64_t{1} << (3 * bits);
  for (auto _ : state) {
    benchmark::DoNotOptimize(hilbert_index_inverse(i, bits));
    i = (i + 7919) % n;
  }
}

}  // namespace

BENCHMARK(BM_HilbertIndex)->Arg(4)->Arg(10)->Arg(20);
BENCHMARK(BM_TransHilbertIndex)->Arg(4)->Arg(10)->Arg(20);
BENCHMARK(BM_HilbertInverse)->Arg(10);

BENCHMARK_MAIN();
