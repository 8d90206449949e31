#include <benchmark/benchmark.h>

#include "tqpt/model.hpp"
#include "tqpt/ops.hpp"
#include "tqpt/rng.hpp"

namespace {

tqpt::Tensor random_tensor(tqpt::Shape shape, std::uint64_t seed) {
  tqpt::Rng rng(seed);
  tqpt::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0f, 1.0f);
  return t;
}

// x[T × in] · W[out × in]ᵀ at the shapes of the desk model's projections.
void BM_Linear(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const auto in = static_cast<std::size_t>(state.range(1));
  const auto out = static_cast<std::size_t>(state.range(2));
  const auto x = random_tensor({t, in}, 1);
  const auto w = random_tensor({out, in}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(tqpt::linear(x, w));
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * static_cast<double>(t * in * out), benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Linear)->Args({128, 64, 64})->Args({128, 64, 256})->Args({128, 256, 64});

void BM_LinearBackward(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const auto in = static_cast<std::size_t>(state.range(1));
  const auto out = static_cast<std::size_t>(state.range(2));
  const auto x = random_tensor({t, in}, 1);
  const auto w = random_tensor({out, in}, 2);
  const auto dy = random_tensor({t, out}, 3);
  for (auto _ : state) {
    tqpt::Tensor dx, dw;
    tqpt::linear_backward(x, w, dy, &dx, &dw);
    benchmark::DoNotOptimize(dw);
  }
}
BENCHMARK(BM_LinearBackward)->Args({128, 64, 256})->Args({128, 256, 64});

void BM_Attention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const auto q = random_tensor({t, 64}, 1), k = random_tensor({t, 64}, 2), v = random_tensor({t, 64}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(tqpt::causal_attention(q, k, v, 4));
}
BENCHMARK(BM_Attention)->Arg(128);

void BM_SequenceLossWithGrad(benchmark::State& state) {
  const tqpt::ModelConfig cfg;
  const auto model = tqpt::Model::initialized(cfg, 1);
  std::vector<std::int32_t> tokens(cfg.max_seq_len);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<std::int32_t>((i * 31) % 256);
  tqpt::ParamRegistry<float> grads(cfg);
  for (auto _ : state) benchmark::DoNotOptimize(model.sequence_loss(tokens, &grads));
}
BENCHMARK(BM_SequenceLossWithGrad)->Unit(benchmark::kMillisecond);

void BM_Forward(benchmark::State& state) {
  const tqpt::ModelConfig cfg;
  const auto model = tqpt::Model::initialized(cfg, 1);
  std::vector<std::int32_t> tokens(cfg.max_seq_len);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<std::int32_t>((i * 31) % 256);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

}  // namespace
