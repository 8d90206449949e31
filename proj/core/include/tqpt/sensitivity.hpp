#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqpt/corpus.hpp"
#include "tqpt/importance.hpp"
#include "tqpt/model.hpp"
#include "tqpt/quant_grid.hpp"

namespace tqpt {

/// Selects ratio option `option` for canonical layer `layer`. Flat index in
/// the sensitivity matrix: layer · |options| + option.
struct PerturbationKey {
  std::size_t layer = 0;
  std::size_t option = 0;
};

/// Symmetric (L·|𝔹|)² matrix with zeros between layers of different blocks.
struct SensitivityMatrix {
  std::vector<double> ratios;
  QuantSpec spec;
  std::size_t n_layers = 0;
  std::vector<std::size_t> block_of;      // per layer
  std::vector<std::size_t> layer_params;  // C_out·C_in per layer
  std::vector<std::size_t> c_out;
  std::vector<std::size_t> c_in;
  std::vector<double> values;  // row-major dim × dim

  std::size_t n_options() const noexcept { return ratios.size(); }
  std::size_t dim() const noexcept { return n_layers * ratios.size(); }
  std::size_t index(std::size_t layer, std::size_t option) const noexcept {
    return layer * ratios.size() + option;
  }
  double operator()(std::size_t i, std::size_t j) const { return values[i * dim() + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * dim() + j]; }

  /// δᵀMδ for one option index per layer, summed block by block (blocks in
  /// ascending id, layers ascending inside a block). Cross-block entries are
  /// zero by invariant and are not visited. Every solver scores choices with
  /// this function, so equal choices give bitwise-equal objectives.
  double quadratic_form(std::span<const std::size_t> choice) const;
  /// The contribution of one block: Σ_{l1,l2 ∈ block} M[(l1,c_l1),(l2,c_l2)].
  double block_form(std::span<const std::size_t> block_layers,
                    std::span<const std::size_t> block_choice) const;
  /// Layers grouped by block id, ascending.
  std::vector<std::vector<std::size_t>> blocks() const;
  /// Fraction of layers whose diagonal entries do not increase with the option index.
  double monotone_diagonal_fraction() const;
  /// Symmetry, cross-block zeros and diagonal ≥ −1e-9·max|M|. Throws on violation.
  void check_invariants() const;
};

void to_json(nlohmann::json& j, const SensitivityMatrix& m);
void from_json(const nlohmann::json& j, SensitivityMatrix& m);

/// L(θ + Σ_k Δ_k) for a set of perturbation keys (empty set = unperturbed).
using JointLoss = std::function<double(std::span<const PerturbationKey>)>;

struct EvalCounts {
  std::size_t baseline = 0;
  std::size_t diagonal = 0;
  std::size_t joint = 0;
};

/// Fills the matrix values from a joint-loss oracle:
///   M_ii = 2·(L(Δ_i) − L(0));
///   M_ij = L(Δ_i + Δ_j) + L(0) − L(Δ_i) − L(Δ_j) for distinct layers in the same block;
///   every other entry 0.
/// Single-key losses are evaluated once and reused by the joint terms.
/// `m` must already carry ratios, n_layers and block_of.
void assemble_sensitivity(SensitivityMatrix& m, const JointLoss& loss, EvalCounts* counts = nullptr);

/// Δ = RTN(W | high rows at b_high, rest at b_normal) − W.
Tensor build_delta(const Tensor& w, std::span<const std::size_t> high_rows, const QuantSpec& spec);

/// Weight replacement for one quantizable layer.
struct WeightOverride {
  LayerId layer;
  const Tensor* weight = nullptr;
};

/// (1/N) Σ_n ‖f(x_n) − f'(x_n)‖²_F over final logits, where f' uses the
/// overridden weights. Direct evaluation with two full forward passes.
double recon_loss(const Model& model, std::span<const WeightOverride> overrides,
                  const CalibrationSet& calib);

/// Same loss as recon_loss, with full-precision activations cached per
/// sequence so that a perturbation only recomputes from its first touched
/// projection onward. Safe for concurrent calls.
class ReconstructionEvaluator {
 public:
  ReconstructionEvaluator(const Model& model, const CalibrationSet& calib);

  double loss(std::span<const WeightOverride> overrides) const;
  std::size_t n_sequences() const noexcept { return seqs_.size(); }

 private:
  struct BlockState {
    Tensor x_in, a, q, k, v, att, x_mid, b, g;
  };
  struct SequenceState {
    std::vector<BlockState> blocks;
    Tensor logits;
  };

  const Model& model_;
  std::vector<SequenceState> seqs_;
};

/// Builds M for `model` with RTN-probed perturbations at every ratio in
/// `ratios`, using the reconstruction loss over `calib`.
SensitivityMatrix build_sensitivity(const Model& model, const ChannelImportance& importance,
                                    const CalibrationSet& calib, std::span<const double> ratios,
                                    const QuantSpec& spec, EvalCounts* counts = nullptr);

}  // namespace tqpt
