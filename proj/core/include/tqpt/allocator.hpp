#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqpt/importance.hpp"
#include "tqpt/quant_grid.hpp"
#include "tqpt/sensitivity.hpp"

namespace tqpt {

/// Storage bits of one layer at `ratio`: whole high rows at b_high, the rest
/// at b_normal, with the high-row count from high_channel_count.
double layer_cost(std::size_t c_out, std::size_t c_in, double ratio, const QuantSpec& spec);

/// Cost of every (layer, option) pair, flat-indexed like the matrix.
std::vector<double> option_costs(const SensitivityMatrix& m);

/// target_avg_bits · Σ_l n_params(l).
double budget_bits(const SensitivityMatrix& m, double target_avg_bits);

/// Single ratio which, applied to every layer of `m`, buys the most high rows
/// within `c_target` bits. Ratios need not be among m.ratios; the result is
/// the smallest ratio giving those row counts, and no larger ratio that fits
/// the budget gives different ones.
/// Throws InfeasibleError when even ratio 0 (no high rows) does not fit.
double max_uniform_ratio(const SensitivityMatrix& m, double c_target);

/// One option per layer plus its score.
struct Allocation {
  std::vector<std::size_t> choice;
  double objective = 0.0;   // δᵀMδ
  double cost_bits = 0.0;
  double c_target = 0.0;
  std::string exactness;    // "exact" | "pareto-dp" | "beam"
};

struct AllocatorOptions {
  /// solve_exact refuses instances with more combinations than this.
  std::size_t exact_cap = 2'000'000;
  /// Per-block enumeration switches to beam search above this many combinations.
  std::size_t block_enum_cap = 1'000'000;
  std::size_t beam_width = 4096;
  /// Budget discretization: unit = C_target / dp_units.
  std::size_t dp_units = 100'000;
};

/// Exhaustive search in lexicographic order. Ties on objective go to the
/// lower cost, then to the lexicographically smaller choice.
/// Throws InfeasibleError when no choice fits, InvalidArgument above the cap.
Allocation solve_exact(const SensitivityMatrix& m, std::span<const double> costs, double c_target,
                       std::size_t cap = AllocatorOptions{}.exact_cap);

/// Block decomposition: enumerate (or beam-search) each block's combinations,
/// keep each block's cost/objective Pareto frontier, then run a
/// multiple-choice knapsack DP over blocks with costs rounded up to
/// C_target/dp_units. Always feasible; optimal when costs are multiples of the
/// unit, otherwise optimal among choices with B·unit of slack.
Allocation solve(const SensitivityMatrix& m, std::span<const double> costs, double c_target,
                 const AllocatorOptions& options = {});

struct LayerShape {
  std::size_t c_out = 0;
  std::size_t c_in = 0;
};

struct BitReport {
  double code_bits_avg = 0.0;
  /// Also charges 16-bit scale + 16-bit zero point per quantization group.
  double effective_bits_avg = 0.0;
};

BitReport report_avg_bits(std::span<const LayerShape> shapes, std::span<const double> layer_ratios,
                          const QuantSpec& spec);

std::vector<LayerShape> layer_shapes(const SensitivityMatrix& m);

/// Allocation file: {target_avg_bits, c_target_bits, exactness, objective,
/// cost_bits, code_bits_avg, effective_bits_avg, spec, ratios, layers: [...]}.
nlohmann::json allocation_to_json(const Allocation& a, const SensitivityMatrix& m,
                                  const ChannelImportance& importance, double target_avg_bits);

/// Per-layer partitions recorded in an allocation file, in canonical order.
std::vector<ChannelPartition> partitions_from_json(const nlohmann::json& j);

}  // namespace tqpt
