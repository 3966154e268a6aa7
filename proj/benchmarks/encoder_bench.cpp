#include <benchmark/benchmark.h>

#include "pointlama/config.hpp"
#include "pointlama/encoder.hpp"

using namespace pointlama;

namespace {

void BM_Matmul(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  const Value a = Value::constant(rng.uniform_array({n, n}, -1, 1));
  const Value b = Value::constant(rng.uniform_array({n, n}, -1, 1));
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

void BM_DeskEncoderForward(benchmark::State& state) {
  const auto bundle = build_encoder(desk_config().encoder, 5);
  Rng rng(6);
  const std::size_t T = static_cast<std::size_t>(state.range(0)), C = desk_config().encoder.d_model;
  TokenSequence seq;
  seq.tokens = Value::constant(rng.uniform_array({8, T, C}, -1, 1));
  seq.centers = rng.uniform_array({8, T, 3}, -1, 1);
  for (std::size_t i = 0; i < 8 * T; ++i) {
    seq.order.push_back(OrderId::hilbert);
    seq.source.push_back(i % T);
  }
  for (auto _ : state) benchmark::DoNotOptimize(bundle.encoder->encode(seq));
}

}  // namespace

BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(384);
BENCHMARK(BM_DeskEncoderForward)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
