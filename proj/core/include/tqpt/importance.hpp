#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqpt/corpus.hpp"
#include "tqpt/model.hpp"

namespace tqpt {

/// Writes the loss gradient of sample `n` into `grad` (already zeroed, flat).
using SampleGradient = std::function<void(std::size_t n, std::span<double> grad)>;

/// (1/N) Σ_n g_n ⊙ g_n for an arbitrary differentiable model. Squares are
/// accumulated in sample order.
std::vector<double> fisher_diag(std::size_t n_samples, std::size_t dim, const SampleGradient& grad);

/// Per-parameter Fisher diagonal of every quantizable layer; layers[l] has
/// the layer's [C_out × C_in] shape.
struct FisherDiag {
  std::vector<Tensor64> layers;
};

/// Fisher diagonal from per-sequence cross-entropy gradients of `model`.
FisherDiag fisher_diag(const Model& model, const CalibrationSet& calib);

/// Mean Fisher value of every output channel (weight row) per layer.
struct ChannelImportance {
  std::vector<std::vector<double>> scores;  // indexed by canonical layer index

  const std::vector<double>& layer(LayerId id) const { return scores.at(id.index()); }
  std::size_t n_layers() const noexcept { return scores.size(); }
};

ChannelImportance channel_scores(const FisherDiag& fisher);

void to_json(nlohmann::json& j, const ChannelImportance& c);
void from_json(const nlohmann::json& j, ChannelImportance& c);

struct ChannelPartition {
  LayerId layer;
  double ratio = 0.0;
  std::vector<std::size_t> high_channels;  // ascending

  std::size_t n_high() const noexcept { return high_channels.size(); }
};

/// round(ratio·c_out), at least 1 when ratio > 0.
std::size_t high_channel_count(double ratio, std::size_t c_out);

/// Channel indices ordered by descending score, ties by lower index.
std::vector<std::size_t> channel_ranking(std::span<const double> scores);

/// Top-n channels of `layer`. Throws InvalidArgument for ratio outside [0, 1].
ChannelPartition partition(const ChannelImportance& importance, LayerId layer, double ratio);

}  // namespace tqpt
