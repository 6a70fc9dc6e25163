#include <benchmark/benchmark.h>

#include "fmn/network.hpp"
#include "fmn/rng.hpp"

namespace {

fmn::NetworkConfig small_network() {
  fmn::NetworkConfig c;
  c.stem_channels = 8;
  c.block_channels = {8, 16, 32, 64};
  c.blocks_per_stage = {1, 1, 1, 1};
  c.feature_dim = 64;
  return c;
}

void BM_ExtractEmbeddings(benchmark::State& state) {
  const auto config = small_network();
  auto params = fmn::init_params<float>(config, 3);
  fmn::Rng rng(4);
  std::vector<fmn::Tensor<float>> images;
  for (int i = 0; i < state.range(0); ++i) {
    fmn::Tensor<float> t(config.input_shape());
    for (auto& v : t.storage()) v = static_cast<float>(rng.uniform());
    images.push_back(std::move(t));
  }
  for (auto _ : state) {
    auto emb = fmn::extract_embeddings(images, params, config);
    benchmark::DoNotOptimize(emb.global.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ExtractEmbeddings)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

}  // namespace
