#include <benchmark/benchmark.h>

#include "fmn/autograd.hpp"
#include "fmn/rng.hpp"

namespace {

fmn::Tensor<float> random_tensor(fmn::Shape shape, fmn::Rng& rng) {
  fmn::Tensor<float> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

// Args: channels, spatial size.
void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  fmn::Rng rng(1);
  auto input = random_tensor({8, c, hw, hw / 2}, rng);
  auto kernel = random_tensor({c, c, 3, 3}, rng);
  kernel.set_requires_grad(true);
  for (auto _ : state) {
    kernel.zero_grad();
    fmn::Graph<float> g;
    auto x = g.input(input, true);
    auto k = g.parameter(kernel);
    auto y = fmn::conv2d(x, k, std::nullopt, 1, 1);
    g.backward(fmn::sum(y));
    benchmark::DoNotOptimize(kernel.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({8, 32})->Args({16, 32})->Args({32, 16});

}  // namespace
