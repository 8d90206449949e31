#pragma once

#include <cstdint>
#include <vector>

#include "tqpt/model.hpp"
#include "tqpt/sensitivity.hpp"
#include "tqpt/rng.hpp"
#include "tqpt/tensor.hpp"

namespace tqpt::test {

template <typename T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  BasicTensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(scale * (2.0 * rng.uniform() - 1.0));
  return t;
}

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = static_cast<std::int32_t>(rng.below(vocab));
  return out;
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_blocks = 2;
  c.d_ff = 16;
  c.max_seq_len = 8;
  return c;
}

/// Random-valued model (larger than GPT-2 init so gradients are far from zero
/// and LayerNorm gains/biases are not at their trivial values).
template <typename T>
BasicModel<T> random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5) {
  BasicModel<T> m(cfg);
  Rng rng(seed);
  for (auto& [name, t] : m.params().named()) {
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = static_cast<T>(scale * (2.0 * rng.uniform() - 1.0));
    if (name.find("gain") != std::string::npos) {
      for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] += T{1};
    }
  }
  return m;
}

/// Random allocation problem: `layers` layers split into consecutive blocks of
/// `per_block`, symmetric block-diagonal M with entries in [−1, 1] shifted by
/// `diag_shift` on the diagonal (negative shifts give indefinite blocks), and
/// integer costs in [1, max_cost].
struct AllocInstance {
  SensitivityMatrix m;
  std::vector<double> costs;
};

inline AllocInstance random_alloc_instance(std::size_t layers, std::size_t per_block, std::size_t options,
                                           Rng& rng, double diag_shift, std::size_t max_cost = 20) {
  AllocInstance inst;
  auto& m = inst.m;
  for (std::size_t o = 0; o < options; ++o) m.ratios.push_back(static_cast<double>(o + 1) / static_cast<double>(options));
  m.n_layers = layers;
  for (std::size_t l = 0; l < layers; ++l) {
    m.block_of.push_back(l / per_block);
    m.layer_params.push_back(10);
    m.c_out.push_back(2);
    m.c_in.push_back(5);
  }
  const std::size_t n = m.dim();
  m.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      const std::size_t li = i / options, lj = j / options;
      if (m.block_of[li] != m.block_of[lj] || (li == lj && i != j)) continue;
      const double v = 2.0 * rng.uniform() - 1.0 + (i == j ? diag_shift : 0.0);
      m(i, j) = m(j, i) = v;
    }
  for (std::size_t i = 0; i < n; ++i) inst.costs.push_back(static_cast<double>(1 + rng.below(max_cost)));
  return inst;
}

}  // namespace tqpt::test
