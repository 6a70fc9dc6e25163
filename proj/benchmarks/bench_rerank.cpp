#include <benchmark/benchmark.h>

#include <string>

#include "fmn/rerank.hpp"
#include "fmn/rng.hpp"

namespace {

void BM_Rerank(benchmark::State& state) {
  const auto n_gallery = static_cast<std::size_t>(state.range(0));
  const std::size_t n_query = n_gallery / 4, dim = 128;
  fmn::Rng rng(5);
  auto draw = [&](std::size_t n) {
    std::vector<std::vector<double>> out(n, std::vector<double>(dim));
    for (auto& v : out)
      for (auto& x : v) x = rng.uniform(-1, 1);
    return out;
  };
  const auto queries = draw(n_query), gallery = draw(n_gallery);
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < n_gallery; ++i) keys.push_back("g" + std::to_string(i));
  const fmn::ReRankConfig config;
  for (auto _ : state) {
    auto ranked = fmn::rerank(queries, gallery, keys, config);
    benchmark::DoNotOptimize(ranked.data());
  }
}
BENCHMARK(BM_Rerank)->Arg(64)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
