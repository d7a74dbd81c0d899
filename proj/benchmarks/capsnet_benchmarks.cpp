#include <benchmark/benchmark.h>

#include "caps/capsnet.hpp"
#include "caps/layers.hpp"
#include "caps/losses.hpp"

using namespace caps;

namespace {

// Votes at the default geometry: N_PC primary capsules, 10 classes, dim 16.
void BM_Routing(benchmark::State& state) {
  const auto iterations = static_cast<std::size_t>(state.range(0));
  const auto n_primary = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  const VoteTensor votes{Tensor::uniform({1, n_primary, 10, 16}, -0.05f, 0.05f, rng)};
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(dynamic_routing(votes, iterations).digit_caps.values.data().data());
}
BENCHMARK(BM_Routing)->ArgsProduct({{1, 2, 3}, {576, 1152, 2304}})->Unit(benchmark::kMicrosecond);

void BM_Votes(benchmark::State& state) {
  Rng rng(2);
  const CapsuleBlock u{Tensor::uniform({1, 1152, 8}, -1.0f, 1.0f, rng)};
  const Tensor w = Tensor::uniform({1152, 10, 8, 16}, -0.1f, 0.1f, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(compute_votes(u, w).votes.data().data());
}
BENCHMARK(BM_Votes)->Unit(benchmark::kMicrosecond);

void BM_ConvForward(benchmark::State& state) {
  const auto channels = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const Conv2dLayer conv = Conv2dLayer::create({1, channels, 9, 9, 1, 0}, rng);
  const Tensor x = Tensor::uniform({8, 1, 28, 28}, 0.0f, 1.0f, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv_forward(conv, x).data().data());
}
BENCHMARK(BM_ConvForward)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_ConvForwardBackward(benchmark::State& state) {
  Rng rng(4);
  Conv2dLayer conv = Conv2dLayer::create({64, 64, 9, 9, 2, 0}, rng);
  conv.weights.set_requires_grad(true);
  conv.bias.set_requires_grad(true);
  const Tensor x = Tensor::uniform({8, 64, 20, 20}, 0.0f, 1.0f, rng);
  for (auto _ : state) {
    conv.weights.zero_grad();
    sum_all(conv_forward(conv, x)).backward();
  }
}
BENCHMARK(BM_ConvForwardBackward)->Unit(benchmark::kMillisecond);

CapsNetConfig config_for(int64_t reduced) {
  CapsNetConfig c;
  if (reduced) {
    c.stem_channels = 64;
    c.primary.channels = 8;
  }
  return c;
}

void BM_CapsNetInference(benchmark::State& state) {
  Rng rng(5);
  const CapsNet net(config_for(state.range(0)), rng);
  const Tensor x = Tensor::uniform({1, 1, 28, 28}, 0.0f, 1.0f, rng);
  ForwardOptions opt;
  opt.reconstruct = false;
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, std::nullopt, opt).class_scores.data().data());
}
BENCHMARK(BM_CapsNetInference)->Arg(0)->Arg(1)->ArgName("reduced")->Unit(benchmark::kMillisecond);

void BM_CapsNetTrainingStep(benchmark::State& state) {
  Rng rng(6);
  const CapsNet net(config_for(1), rng);
  const Tensor x = Tensor::uniform({16, 1, 28, 28}, 0.0f, 1.0f, rng);
  std::vector<std::size_t> labels(16);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 10;
  for (auto _ : state) {
    const auto out = net.forward(x, labels);
    total_loss(margin_loss(out.class_scores, labels), reconstruction_loss(out.reconstruction, x)).backward();
  }
}
BENCHMARK(BM_CapsNetTrainingStep)->Unit(benchmark::kMillisecond);

}  // namespace

// The packaged benchmark_main archive holds slim LTO objects from another
// compiler release, so the entry point is defined here.
BENCHMARK_MAIN();
