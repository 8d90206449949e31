#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tqpt/corpus.hpp"
#include "tqpt/model.hpp"

namespace tqpt {

struct TrainOptions {
  std::size_t steps = 1500;
  std::size_t batch_size = 8;
  /// Training window length; 0 means the model's max_seq_len.
  std::size_t seq_len = 0;
  double lr = 3e-3;
  std::size_t warmup_steps = 50;
  /// Cosine decay ends at lr * min_lr_fraction.
  double min_lr_fraction = 0.1;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables clipping.
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss per step
};

/// Mean next-token cross-entropy over `batch` and its gradient in `grads`
/// (overwritten). Per-sequence gradients are reduced in batch order, so the
/// result does not depend on the worker count.
double batch_gradient(const Model& model, const std::vector<std::vector<std::int32_t>>& batch,
                      ParamRegistry<float>& grads);

/// ‖(1/N) Σ_n ∇L_n‖₂ over every parameter.
double gradient_norm(const Model& model, const CalibrationSet& calib);

/// Adam pretraining on random windows of `tokens`. steps = 0 leaves the model
/// untouched. Throws InvalidArgument on an empty corpus.
TrainResult train(Model& model, std::span<const std::int32_t> tokens, const TrainOptions& options,
                  const std::function<void(std::size_t step, double loss)>& on_step = {});

}  // namespace tqpt
