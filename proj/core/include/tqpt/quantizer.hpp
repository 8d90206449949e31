#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqpt/checkpoint.hpp"
#include "tqpt/corpus.hpp"
#include "tqpt/importance.hpp"
#include "tqpt/model.hpp"
#include "tqpt/optim.hpp"
#include "tqpt/quant_grid.hpp"

namespace tqpt {

// --- rounding primitives -------------------------------------------------------

/// h(v) = clip(1.2·σ(v) − 0.1, 0, 1).
double rectified_sigmoid(double v);
/// dh/dv; zero where the clip is active.
double rectified_sigmoid_grad(double v);
/// Latent with h(v) = h for h in [0, 1).
double rectified_sigmoid_inverse(double h);

/// s · (clamp(⌊w/s⌋ + h + zp, 0, 2^b−1) − zp) for soft rounding offsets h.
void adaround_forward(std::span<const float> w, const GridParams& grid, std::span<const double> h,
                      std::span<float> out);

/// Σ (1 − |2h(v) − 1|^γ). When `dv` is given, adds `weight` · d/dv into it.
double reg_loss(std::span<const float> v, double gamma, std::span<double> dv = {}, double weight = 1.0);

/// Range a clipped group scales: lo = min(w, 0), hi = max(w, 0). Constant
/// nonzero groups are flagged; they keep their exact RTN grid.
struct ClipRange {
  double lo = 0.0;
  double hi = 0.0;
  bool constant = false;
};

ClipRange clip_range(std::span<const float> w);

/// Grid spanning [β·lo, α·hi] (the α = β = 1 grid is the RTN grid).
GridParams clip_grid(std::span<const float> w, const ClipRange& r, double alpha, double beta, int bits);

void clip_forward(std::span<const float> w, const ClipRange& r, double alpha, double beta, int bits,
                  std::span<float> out);

/// Straight-through gradients of Σ dout·clip_forward with respect to α and β:
/// round() passes gradient 1; a clamped element depends on the step only
/// through the zero point.
void clip_backward(std::span<const float> w, const ClipRange& r, double alpha, double beta, int bits,
                   std::span<const float> dout, double& dalpha, double& dbeta);

// --- per-layer learned quantizer -------------------------------------------------

enum class QuantMethod { rtn, clip, hybrid };

std::string_view to_string(QuantMethod m) noexcept;
QuantMethod parse_quant_method(std::string_view name);

/// Persisted description of one quantized layer. Grid entries run in row
/// order: one per high row, groups_per_row per normal row.
struct LayerQuantRecord {
  LayerId layer;
  std::vector<std::size_t> high_channels;
  std::vector<float> scales;
  std::vector<std::int32_t> zero_points;
  std::vector<float> alpha;
  std::vector<float> beta;
};

/// Learnable quantizer of one weight matrix.
///   hybrid: high rows use AdaRound on a fixed per-channel RTN grid at b_high;
///           normal rows use learnable clipping at b_normal.
///   clip:   every row uses learnable clipping (high rows at b_high).
///   rtn:    nothing is learned.
class LayerQuantizer {
 public:
  LayerQuantizer(LayerId id, const Tensor& w, std::span<const std::size_t> high_rows,
                 const QuantSpec& spec, QuantMethod method);

  LayerId layer() const noexcept { return id_; }
  std::size_t n_rounding() const noexcept { return v_.size(); }
  /// Rounding decisions fixed at construction because the grid clamps both choices.
  std::size_t n_pinned() const noexcept { return pinned_.size(); }
  std::size_t n_clip() const noexcept { return alpha_.size(); }

  /// Current (soft unless frozen) quantized weight.
  Tensor materialize() const;
  /// Accumulates the gradients of Σ dw·materialize() into the internal buffers.
  void backward(const Tensor& dw);
  /// Adds weight · reg_loss(v, γ) to the latent gradient; returns reg_loss.
  double add_reg(double gamma, double weight);
  double reg(double gamma) const;
  void zero_grad();
  void step(const AdamOptions& options);

  /// Fraction of soft rounding values within `tol` of 0 or 1 (1 if none).
  std::size_t near_binary(double tol) const;
  /// Rounds every latent to a hard 0/1 decision (h ≥ 0.5 → 1).
  void freeze();
  bool frozen() const noexcept { return frozen_; }
  /// Round-to-nearest decisions, α = β = 1, frozen.
  void reset_to_rtn();

  LayerQuantRecord record() const;

  /// Learnable state, for checkpointing an optimization or for tests.
  std::vector<float>& latents() noexcept { return v_; }
  std::vector<float>& alphas() noexcept { return alpha_; }
  std::vector<float>& betas() noexcept { return beta_; }
  std::span<const double> latent_grad() const noexcept { return dv_; }
  std::span<const double> alpha_grad() const noexcept { return dalpha_; }
  std::span<const double> beta_grad() const noexcept { return dbeta_; }

 private:
  struct Entry {
    std::size_t row = 0;
    std::size_t col = 0;
    std::size_t len = 0;
    int bits = 2;
    bool rounding = false;   // AdaRound entry (fixed grid)
    GridParams grid;         // fixed grid for rounding entries
    ClipRange range;         // clip entries
    std::size_t param = 0;   // index into alpha_/beta_ or first latent
  };

  double soft_h(std::size_t i) const;
  void project(std::size_t k);

  LayerId id_;
  Tensor w_;
  QuantSpec spec_;
  QuantMethod method_;
  std::vector<std::size_t> high_rows_;
  std::vector<Entry> entries_;
  std::vector<float> v_;
  std::vector<std::size_t> pinned_;  // latents whose rounding cannot change the output
  std::vector<float> alpha_, beta_;
  std::vector<double> dv_, dalpha_, dbeta_;
  AdamState v_state_, alpha_state_, beta_state_;
  bool frozen_ = false;
};

// --- block / model optimization ---------------------------------------------------

struct QuantizerOptions {
  QuantMethod method = QuantMethod::hybrid;
  std::size_t iters = 1000;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  double reg_weight = 1000.0;
  double gamma_start = 20.0;
  double gamma_end = 2.0;
  /// Fraction of iterations with the rounding regularizer switched off.
  double warmup_fraction = 0.2;
  /// Feed each block the outputs of the already-quantized prefix (true) or
  /// the full-precision activations (false).
  bool quantized_inputs = true;
  /// Keep the RTN solution for a block when training ends above its loss.
  bool revert_on_regression = true;
  std::uint64_t seed = 0;
};

/// Regularizer temperature at iteration `it`: γ_start during warmup, then
/// linear down to γ_end at the last iteration.
double anneal_gamma(const QuantizerOptions& o, std::size_t it);
/// 0 during warmup, reg_weight afterwards.
double anneal_reg_weight(const QuantizerOptions& o, std::size_t it);

struct BlockReport {
  std::size_t block = 0;
  double rtn_loss = 0.0;     // full-calibration loss of the RTN initialization
  double final_loss = 0.0;   // same loss after freezing
  double near_binary_fraction = 1.0;  // before freezing, tol 1e-3
  std::size_t rounding_params = 0;
  bool reverted = false;
  std::size_t iterations = 0;
};

void to_json(nlohmann::json& j, const BlockReport& r);

/// ‖block(x) − target‖²_F / tokens, averaged over the sequences.
double block_recon_loss(const BlockParams<float>& params, const ModelConfig& cfg,
                        const std::vector<Tensor>& inputs, const std::vector<Tensor>& targets);

/// Trains the quantizers of one block against FP targets, then freezes them.
BlockReport optimize_block(std::size_t block, const BlockParams<float>& fp, const ModelConfig& cfg,
                           std::array<LayerQuantizer*, kLayersPerBlock> layers,
                           const std::vector<Tensor>& inputs, const std::vector<Tensor>& targets,
                           const QuantizerOptions& options);

struct QuantizedModel {
  Model model;  // dequantized weights
  QuantSpec spec;
  QuantMethod method = QuantMethod::hybrid;
  std::vector<LayerQuantRecord> layers;
  std::vector<BlockReport> blocks;
};

using BlockProgress = std::function<void(const BlockReport&)>;

/// Quantizes blocks 0..n−1 in order.
QuantizedModel quantize_model(const Model& model, std::span<const ChannelPartition> partitions,
                              const QuantSpec& spec, const CalibrationSet& calib,
                              const QuantizerOptions& options, const BlockProgress& progress = {});

/// Checks every quantizable weight equals s·(q − zp) for an in-range integer
/// q under its recorded grid. Returns the number of violations.
std::size_t grid_violations(const QuantizedModel& qm);

CheckpointContents to_checkpoint(const QuantizedModel& qm);
/// Restores the model and the per-layer records from a quantized checkpoint.
QuantizedModel from_checkpoint(const CheckpointContents& contents);

}  // namespace tqpt
