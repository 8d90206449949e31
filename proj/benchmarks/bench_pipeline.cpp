#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "tqpt/allocator.hpp"
#include "tqpt/corpus.hpp"
#include "tqpt/model.hpp"
#include "tqpt/quantizer.hpp"
#include "tqpt/rng.hpp"
#include "tqpt/sensitivity.hpp"

namespace {

tqpt::CalibrationSet synthetic_calibration(std::size_t n, std::size_t len) {
  std::vector<std::int32_t> tokens(4096);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<std::int32_t>((i * 37 + i / 7) % 256);
  tqpt::Rng rng(3);
  return tqpt::sample_calibration(tokens, n, len, rng);
}

tqpt::Tensor random_weight(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  tqpt::Rng rng(seed);
  tqpt::Tensor t({rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0f, 0.05f);
  return t;
}

// One sensitivity probe: reconstruction loss with a single layer replaced.
// Arg 0 is the block of the perturbed layer, so later blocks reuse more of the
// cached prefix in the evaluator.
void BM_ReconLossDirect(benchmark::State& state) {
  const tqpt::ModelConfig cfg;
  const auto model = tqpt::Model::initialized(cfg, 1);
  const auto calib = synthetic_calibration(4, cfg.max_seq_len);
  const tqpt::LayerId id{static_cast<std::size_t>(state.range(0)), tqpt::LayerKind::q_proj};
  const auto& w = model.params().weight(id);
  const tqpt::Tensor wq = tqpt::rtn_layer(w, std::vector<std::size_t>{0}, tqpt::QuantSpec{});
  const tqpt::WeightOverride o{id, &wq};
  for (auto _ : state) benchmark::DoNotOptimize(tqpt::recon_loss(model, std::span(&o, 1), calib));
}
BENCHMARK(BM_ReconLossDirect)->Arg(0)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_ReconLossCached(benchmark::State& state) {
  const tqpt::ModelConfig cfg;
  const auto model = tqpt::Model::initialized(cfg, 1);
  const auto calib = synthetic_calibration(4, cfg.max_seq_len);
  const tqpt::ReconstructionEvaluator eval(model, calib);
  const tqpt::LayerId id{static_cast<std::size_t>(state.range(0)), tqpt::LayerKind::q_proj};
  const auto& w = model.params().weight(id);
  const tqpt::Tensor wq = tqpt::rtn_layer(w, std::vector<std::size_t>{0}, tqpt::QuantSpec{});
  const tqpt::WeightOverride o{id, &wq};
  for (auto _ : state) benchmark::DoNotOptimize(eval.loss(std::span(&o, 1)));
}
BENCHMARK(BM_ReconLossCached)->Arg(0)->Arg(3)->Unit(benchmark::kMillisecond);

// Allocator on a desk-sized instance: 4 blocks of 6 layers, arg 0 ratio options.
void BM_AllocatorSolve(benchmark::State& state) {
  const auto options = static_cast<std::size_t>(state.range(0));
  tqpt::SensitivityMatrix m;
  for (std::size_t o = 0; o < options; ++o) m.ratios.push_back(0.05 * static_cast<double>(o + 1));
  m.n_layers = 24;
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    m.block_of.push_back(l / 6);
    const bool wide = l % 6 >= 4;
    m.c_out.push_back(wide && l % 6 == 4 ? 256 : 64);
    m.c_in.push_back(wide && l % 6 == 5 ? 256 : 64);
    m.layer_params.push_back(m.c_out.back() * m.c_in.back());
  }
  tqpt::Rng rng(9);
  const std::size_t n = m.dim();
  m.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const std::size_t li = i / options, lj = j / options;
      if (m.block_of[li] != m.block_of[lj] || (li == lj && i != j)) continue;
      const double v = (i == j ? 2.0 : 0.2) * rng.uniform();
      m(i, j) = m(j, i) = v;
    }
  }
  const auto costs = tqpt::option_costs(m);
  const double budget = tqpt::budget_bits(m, 2.1);
  for (auto _ : state) benchmark::DoNotOptimize(tqpt::solve(m, costs, budget));
}
BENCHMARK(BM_AllocatorSolve)->Arg(3)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_RtnLayer(benchmark::State& state) {
  const auto w = random_weight(256, 64, 5);
  std::vector<std::size_t> high{3, 17, 40, 200};
  for (auto _ : state) benchmark::DoNotOptimize(tqpt::rtn_layer(w, high, tqpt::QuantSpec{}));
}
BENCHMARK(BM_RtnLayer);

// One optimizer step of a hybrid layer quantizer: materialize, backward, regularize, Adam.
void BM_LayerQuantizerStep(benchmark::State& state) {
  const auto w = random_weight(256, 64, 6);
  const auto dw = random_weight(256, 64, 7);
  std::vector<std::size_t> high;
  for (std::size_t r = 0; r < static_cast<std::size_t>(state.range(0)); ++r) high.push_back(r * 4);
  tqpt::LayerQuantizer q(tqpt::LayerId{}, w, high, tqpt::QuantSpec{}, tqpt::QuantMethod::hybrid);
  const tqpt::AdamOptions opt;
  for (auto _ : state) {
    benchmark::DoNotOptimize(q.materialize());
    q.zero_grad();
    q.backward(dw);
    benchmark::DoNotOptimize(q.add_reg(10.0, 1.0));
    q.step(opt);
  }
}
BENCHMARK(BM_LayerQuantizerStep)->Arg(8)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
