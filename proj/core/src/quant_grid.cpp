#include "tqpt/quant_grid.hpp"

#include <algorithm>

namespace tqpt {

void QuantSpec::validate() const {
  if (identity) return;
  if (!(2 <= b_normal && b_normal < b_high && b_high <= 8)) {
    throw InvalidArgument("quant spec needs 2 <= b_normal < b_high <= 8, got b_normal=" +
                          std::to_string(b_normal) + " b_high=" + std::to_string(b_high));
  }
}

void QuantSpec::validate_for(std::size_t c_in) const {
  validate();
  if (group_size != 0 && c_in % group_size != 0) {
    throw InvalidArgument("group_size " + std::to_string(group_size) + " does not divide C_in " +
                          std::to_string(c_in));
  }
}

void to_json(nlohmann::json& j, const QuantSpec& s) {
  j = nlohmann::json{{"b_high", s.b_high},
                     {"b_normal", s.b_normal},
                     {"group_size", s.group_size},
                     {"symmetric", s.symmetric},
                     {"identity", s.identity}};
}

void from_json(const nlohmann::json& j, QuantSpec& s) {
  const QuantSpec d;
  s.b_high = j.value("b_high", d.b_high);
  s.b_normal = j.value("b_normal", d.b_normal);
  s.group_size = j.value("group_size", d.group_size);
  s.symmetric = j.value("symmetric", d.symmetric);
  s.identity = j.value("identity", d.identity);
}

GridParams grid_for_range(double lo, double hi, int bits) {
  const std::int32_t qmax = max_code(bits);
  const double range = hi - lo;
  GridParams g;
  g.bits = bits;
  g.scale = std::max(static_cast<float>(range / qmax), kMinScale);
  const double zp = std::round(-lo / static_cast<double>(g.scale));
  g.zero_point = static_cast<std::int32_t>(std::clamp(zp, 0.0, static_cast<double>(qmax)));
  return g;
}

GridParams rtn_grid(std::span<const float> w, int bits, bool symmetric) {
  if (bits < 2 || bits > 8) throw InvalidArgument("bit-width must lie in [2, 8]");
  if (w.empty()) return {kMinScale, 0, bits};
  const auto [mn_it, mx_it] = std::minmax_element(w.begin(), w.end());
  const float mn = *mn_it, mx = *mx_it;
  if (symmetric) {
    const double absmax = std::max(std::abs(static_cast<double>(mn)), std::abs(static_cast<double>(mx)));
    const std::int32_t half = std::int32_t{1} << (bits - 1);
    return {std::max(static_cast<float>(absmax / (half - 1)), kMinScale), half, bits};
  }
  if (mn == mx && mn != 0.0f) {
    // Constant row: a unit step equal to |c| places c on the grid exactly.
    if (mn > 0.0f) return {mn, 0, bits};
    return {-mn, 1, bits};
  }
  return grid_for_range(std::min(mn, 0.0f), std::max(mx, 0.0f), bits);
}

GridParams rtn_quantize(std::span<const float> w, int bits, bool symmetric, std::span<float> out) {
  const GridParams g = rtn_grid(w, bits, symmetric);
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = dequantize(quantize_code(w[i], g), g);
  return g;
}

Tensor rtn_layer(const Tensor& w, std::span<const std::size_t> high_rows, const QuantSpec& spec) {
  if (spec.identity) return w;
  const std::size_t rows = w.rows(), cols = w.cols();
  spec.validate_for(cols);
  std::vector<bool> is_high(rows, false);
  for (auto r : high_rows) {
    if (r >= rows) throw InvalidArgument("high channel " + std::to_string(r) + " out of range");
    is_high[r] = true;
  }
  Tensor out(w.shape());
  const std::size_t gs = spec.group_size == 0 ? cols : spec.group_size;
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const float> src(w.row(r), cols);
    std::span<float> dst(out.row(r), cols);
    if (is_high[r]) {
      rtn_quantize(src, spec.b_high, spec.symmetric, dst);
    } else {
      for (std::size_t c = 0; c < cols; c += gs)
        rtn_quantize(src.subspan(c, gs), spec.b_normal, spec.symmetric, dst.subspan(c, gs));
    }
  }
  return out;
}

}  // namespace tqpt
