#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqpt/ops.hpp"
#include "tqpt/tensor.hpp"

namespace tqpt {

// --- layer identity ----------------------------------------------------------

enum class LayerKind : std::uint8_t { q_proj, k_proj, v_proj, o_proj, up_proj, down_proj };

inline constexpr std::size_t kLayersPerBlock = 6;
inline constexpr std::array<LayerKind, kLayersPerBlock> kLayerKinds = {
    LayerKind::q_proj,  LayerKind::k_proj,  LayerKind::v_proj,
    LayerKind::o_proj,  LayerKind::up_proj, LayerKind::down_proj};

std::string_view to_string(LayerKind kind) noexcept;
LayerKind parse_layer_kind(std::string_view name);

/// A quantizable projection. Canonical index = block * 6 + kind.
struct LayerId {
  std::size_t block = 0;
  LayerKind kind = LayerKind::q_proj;

  std::size_t index() const noexcept { return block * kLayersPerBlock + static_cast<std::size_t>(kind); }
  static LayerId from_index(std::size_t index) noexcept {
    return {index / kLayersPerBlock, kLayerKinds[index % kLayersPerBlock]};
  }
  std::string name() const;

  friend auto operator<=>(const LayerId& a, const LayerId& b) noexcept {
    return a.index() <=> b.index();
  }
  friend bool operator==(const LayerId& a, const LayerId& b) noexcept { return a.index() == b.index(); }
};

// --- configuration -----------------------------------------------------------

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 128;
  double layernorm_eps = 1e-5;

  /// Throws InvalidArgument when an invariant does not hold.
  void validate() const;
  std::size_t n_layers() const noexcept { return n_blocks * kLayersPerBlock; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// --- parameters --------------------------------------------------------------

template <typename T>
struct BlockParams {
  BasicTensor<T> ln1_gain, ln1_bias;
  BasicTensor<T> wq, wk, wv, wo;
  BasicTensor<T> ln2_gain, ln2_bias;
  BasicTensor<T> w_up, w_down;

  BasicTensor<T>& weight(LayerKind kind);
  const BasicTensor<T>& weight(LayerKind kind) const;
};

/// Every parameter of the model, addressable by name or, for the six
/// projections of each block, by LayerId. Also used as gradient storage.
template <typename T>
struct ParamRegistry {
  BasicTensor<T> tok_emb;  // [vocab × d]
  BasicTensor<T> pos_emb;  // [max_seq_len × d]
  std::vector<BlockParams<T>> blocks;
  BasicTensor<T> lnf_gain, lnf_bias;
  BasicTensor<T> head;  // [vocab × d]

  ParamRegistry() = default;
  /// Correctly shaped, zero-filled (gains included).
  explicit ParamRegistry(const ModelConfig& cfg);

  BasicTensor<T>& weight(LayerId id);
  const BasicTensor<T>& weight(LayerId id) const;

  std::size_t n_layers() const noexcept { return blocks.size() * kLayersPerBlock; }
  std::vector<LayerId> layers() const;
  std::size_t n_params(LayerId id) const { return weight(id).size(); }
  std::size_t quantizable_params() const;
  std::size_t total_params() const;

  /// Canonical-order (name, tensor) view over every parameter.
  std::vector<std::pair<std::string, BasicTensor<T>*>> named();
  std::vector<std::pair<std::string, const BasicTensor<T>*>> named() const;

  void set_zero();

  template <typename U>
  ParamRegistry<U> cast() const;
};

// --- activations -------------------------------------------------------------

template <typename T>
struct BlockCache {
  BasicTensor<T> x_in;
  LayerNormCache<T> ln1;
  BasicTensor<T> a;  // ln1 output
  BasicTensor<T> q, k, v;
  AttentionCache<T> attn;
  BasicTensor<T> att;    // attention output before o_proj
  BasicTensor<T> x_mid;  // residual after attention
  LayerNormCache<T> ln2;
  BasicTensor<T> b;  // ln2 output
  BasicTensor<T> u;  // up_proj output (pre-activation)
  BasicTensor<T> g;  // gelu(u)
};

template <typename T>
struct ForwardCache {
  std::vector<std::int32_t> tokens;
  std::vector<BlockCache<T>> blocks;
  BasicTensor<T> x_final;
  LayerNormCache<T> lnf;
  BasicTensor<T> y;  // ln_f output
};

/// One pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(·)).
template <typename T>
BasicTensor<T> block_forward(const BlockParams<T>& p, const ModelConfig& cfg,
                             const BasicTensor<T>& x, BlockCache<T>* cache = nullptr);

/// Accumulates parameter gradients into `grads` (if non-null) and the input
/// gradient into `dx` (if non-null).
template <typename T>
void block_backward(const BlockParams<T>& p, const ModelConfig& cfg, const BlockCache<T>& cache,
                    const BasicTensor<T>& dy, BlockParams<T>* grads, BasicTensor<T>* dx);

// --- model -------------------------------------------------------------------

/// GPT-style decoder: learned token + position embeddings, pre-norm blocks
/// with GELU MLP, final LayerNorm and an untied output head. Projections carry
/// no bias.
template <typename T>
class BasicModel {
 public:
  BasicModel() = default;
  /// Zero weights, unit LayerNorm gains.
  explicit BasicModel(ModelConfig cfg);
  /// GPT-2 style N(0, 0.02) initialization drawn from `seed`.
  static BasicModel initialized(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamRegistry<T>& params() noexcept { return params_; }
  const ParamRegistry<T>& params() const noexcept { return params_; }

  BasicTensor<T> embed(std::span<const std::int32_t> tokens) const;
  /// ln_f followed by the output head.
  BasicTensor<T> head_forward(const BasicTensor<T>& x, ForwardCache<T>* cache = nullptr) const;
  BasicTensor<T> forward(std::span<const std::int32_t> tokens, ForwardCache<T>* cache = nullptr) const;

  /// Accumulates d(loss)/d(param) into `grads` given d(loss)/d(logits).
  void backward(const ForwardCache<T>& cache, const BasicTensor<T>& dlogits,
                ParamRegistry<T>& grads) const;

  /// Next-token cross-entropy over `tokens` (T−1 predictions); accumulates its
  /// gradient into `grads` when given.
  double sequence_loss(std::span<const std::int32_t> tokens, ParamRegistry<T>* grads = nullptr) const;

  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> out;
    out.cfg_ = cfg_;
    out.params_ = params_.template cast<U>();
    return out;
  }

 private:
  template <typename U>
  friend class BasicModel;

  void check_tokens(std::span<const std::int32_t> tokens) const;

  ModelConfig cfg_;
  ParamRegistry<T> params_;
};

using Model = BasicModel<float>;
using Model64 = BasicModel<double>;

extern template struct BlockParams<float>;
extern template struct BlockParams<double>;
extern template struct ParamRegistry<float>;
extern template struct ParamRegistry<double>;
extern template class BasicModel<float>;
extern template class BasicModel<double>;

}  // namespace tqpt
