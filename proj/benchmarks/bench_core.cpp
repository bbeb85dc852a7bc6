#include <benchmark/benchmark.h>

#include "framelet/conv.hpp"
#include "framelet/fft.hpp"
#include "framelet/rng.hpp"
#include "framelet/tensor.hpp"

using namespace framelet;

namespace {

ComplexTensor random_complex(std::vector<std::size_t> shape, std::uint64_t seed) {
  ComplexTensor t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.storage()) v = cplx(rng.normal(), rng.normal());
  return t;
}

void BM_fft2(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const ComplexTensor x = random_complex({n, n}, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(fft2(x, {0, 1}));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_fft2)->Arg(64)->Arg(96)->Arg(256);

void BM_conv3x3(benchmark::State& state) {
  const auto ch = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  Rng rng(2);
  FilterBank f(ch, ch, 3, 3);
  for (auto& t : f.taps) t = rng.normal();
  RealTensor z({ch, n, n});
  for (auto& v : z.storage()) v = rng.normal();
  for (auto _ : state) {
    benchmark::DoNotOptimize(circ_conv_mc(z, f));
  }
  const auto macs = static_cast<std::int64_t>(ch * ch * n * n * 9);
  state.SetItemsProcessed(state.iterations() * macs);
}
BENCHMARK(BM_conv3x3)->Args({8, 32})->Args({16, 32})->Args({32, 16});

}  // namespace

BENCHMARK_MAIN();
