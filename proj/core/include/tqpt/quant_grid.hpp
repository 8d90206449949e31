#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqpt/tensor.hpp"

namespace tqpt {

/// Bit-widths and grouping shared by the probing quantizer and the learned one.
struct QuantSpec {
  int b_high = 3;
  int b_normal = 2;
  /// Scale-group length along the input dimension for normal channels; 0
  /// means one group per channel.
  std::size_t group_size = 0;
  bool symmetric = false;
  /// Test mode: every quantizer returns its input unchanged.
  bool identity = false;

  /// 2 ≤ b_normal < b_high ≤ 8 (skipped in identity mode).
  void validate() const;
  /// Also checks that group_size divides c_in.
  void validate_for(std::size_t c_in) const;
  std::size_t groups_per_row(std::size_t c_in) const { return group_size == 0 ? 1 : c_in / group_size; }

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

void to_json(nlohmann::json& j, const QuantSpec& s);
void from_json(const nlohmann::json& j, QuantSpec& s);

constexpr std::int32_t max_code(int bits) { return (std::int32_t{1} << bits) - 1; }

inline constexpr float kMinScale = 1e-8f;

/// One uniform grid: value(q) = scale · (q − zero_point), q ∈ [0, 2^bits − 1].
struct GridParams {
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  int bits = 2;
};

/// Asymmetric grid spanning [lo, hi] with lo ≤ 0 ≤ hi.
GridParams grid_for_range(double lo, double hi, int bits);

/// RTN grid of a row or group. Asymmetric grids span [min(w,0), max(w,0)];
/// a constant nonzero row gets a grid holding that constant exactly.
GridParams rtn_grid(std::span<const float> w, int bits, bool symmetric);

inline std::int32_t quantize_code(float w, const GridParams& g) {
  const double x = std::round(static_cast<double>(w) / static_cast<double>(g.scale));
  const double q = x + static_cast<double>(g.zero_point);
  return static_cast<std::int32_t>(std::clamp(q, 0.0, static_cast<double>(max_code(g.bits))));
}

inline float dequantize(std::int32_t q, const GridParams& g) {
  return g.scale * static_cast<float>(q - g.zero_point);
}

/// Quantize-dequantize `w` into `out` with its own RTN grid.
GridParams rtn_quantize(std::span<const float> w, int bits, bool symmetric, std::span<float> out);

/// Fake-quantized copy of a [C_out × C_in] weight: rows in `high_rows` at
/// b_high with one grid per channel, other rows at b_normal with one grid per
/// group.
Tensor rtn_layer(const Tensor& w, std::span<const std::size_t> high_rows, const QuantSpec& spec);

}  // namespace tqpt
