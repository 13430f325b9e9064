#include <random>

#include <benchmark/benchmark.h>

#include "hitl/env.hpp"
#include "hitl/nn.hpp"
#include "hitl/replay.hpp"
#include "hitl/track.hpp"

namespace {

void BM_DuelingForward(benchmark::State& state) {
  const hitl::nn::DuelingNet net(7);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto fd = hitl::nn::random_fd_batch(net, batch, 3);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(fd.obs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DuelingForward)->Arg(1)->Arg(32);

void BM_DuelingLossBackward(benchmark::State& state) {
  const hitl::nn::DuelingNet net(7);
  const auto fd = hitl::nn::random_fd_batch(net, static_cast<std::size_t>(state.range(0)), 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(hitl::nn::loss_and_gradients(net, fd.obs, fd.actions, fd.targets, fd.weights));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DuelingLossBackward)->Arg(32);

void BM_SumTreeFind(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  hitl::SumTree tree(n);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) tree.set(i, u(rng) + 1e-3);
  for (auto _ : state) benchmark::DoNotOptimize(tree.find(u(rng) * tree.total() * 0.999999));
}
BENCHMARK(BM_SumTreeFind)->Arg(1 << 10)->Arg(1 << 17);

void BM_PrioritySample(benchmark::State& state) {
  hitl::PerConfig cfg;
  hitl::PriorityBuffer buf(cfg);
  hitl::Transition t;
  std::mt19937_64 rng(2);
  for (std::size_t i = 0; i < 20000; ++i) buf.push(t, 1.0 + static_cast<double>(i % 7));
  for (auto _ : state) benchmark::DoNotOptimize(buf.sample(32, rng));
}
BENCHMARK(BM_PrioritySample);

void BM_EnvStep(benchmark::State& state) {
  hitl::TrackEnv env(hitl::make_loop_track(0), hitl::EnvConfig{});
  env.reset(1);
  std::uint64_t ep = 1;
  for (auto _ : state) {
    const auto out = env.step(16);
    if (out.done || out.truncated) env.reset(++ep);
  }
}
BENCHMARK(BM_EnvStep);

}  // namespace

BENCHMARK_MAIN();
