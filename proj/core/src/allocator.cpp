#include "tqpt/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "tqpt/parallel.hpp"

namespace tqpt {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Candidate {
  double cost = 0.0;
  double value = 0.0;
  std::vector<std::size_t> choice;  // options for the block's layers
};

double total_params(const SensitivityMatrix& m) {
  return std::accumulate(m.layer_params.begin(), m.layer_params.end(), 0.0,
                         [](double s, std::size_t n) { return s + static_cast<double>(n); });
}

double min_cost(const SensitivityMatrix& m, std::span<const double> costs) {
  double c = 0.0;
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    double best = kInf;
    for (std::size_t o = 0; o < m.n_options(); ++o) best = std::min(best, costs[m.index(l, o)]);
    c += best;
  }
  return c;
}

[[noreturn]] void throw_infeasible(const SensitivityMatrix& m, std::span<const double> costs,
                                   double c_target) {
  const double params = total_params(m);
  const double need = min_cost(m, costs);
  const double min_avg = params > 0 ? need / params : 0.0;
  throw InfeasibleError("budget of " + std::to_string(c_target) + " bits is below the minimum " +
                            std::to_string(need) + " bits (" + std::to_string(min_avg) +
                            " average bits)",
                        min_avg);
}

void check_inputs(const SensitivityMatrix& m, std::span<const double> costs) {
  if (m.n_layers == 0 || m.n_options() == 0) throw InvalidArgument("allocator: empty problem");
  if (costs.size() != m.dim()) throw InvalidArgument("allocator: cost vector length differs from matrix dim");
  if (m.values.size() != m.dim() * m.dim()) throw InvalidArgument("allocator: matrix value count mismatch");
  if (m.block_of.size() != m.n_layers) throw InvalidArgument("allocator: block map incomplete");
}

double choice_cost(const SensitivityMatrix& m, std::span<const double> costs,
                   std::span<const std::size_t> choice) {
  double c = 0.0;
  for (std::size_t l = 0; l < choice.size(); ++l) c += costs[m.index(l, choice[l])];
  return c;
}

/// Sorts by (cost, value, choice) and drops every candidate some other
/// candidate weakly dominates.
std::vector<Candidate> pareto(std::vector<Candidate> cands) {
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    if (a.value != b.value) return a.value < b.value;
    return a.choice < b.choice;
  });
  std::vector<Candidate> out;
  double best = kInf;
  for (auto& c : cands) {
    if (c.value < best) {
      best = c.value;
      out.push_back(std::move(c));
    }
  }
  return out;
}

std::size_t combo_count(std::size_t options, std::size_t layers, std::size_t cap) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < layers; ++i) {
    if (n > cap / options) return cap + 1;
    n *= options;
  }
  return n;
}

std::vector<Candidate> enumerate_block(const SensitivityMatrix& m, std::span<const double> costs,
                                       const std::vector<std::size_t>& layers) {
  const std::size_t opts = m.n_options();
  std::vector<Candidate> all;
  std::vector<std::size_t> choice(layers.size(), 0);
  while (true) {
    Candidate c;
    for (std::size_t a = 0; a < layers.size(); ++a) c.cost += costs[m.index(layers[a], choice[a])];
    c.value = m.block_form(layers, choice);
    c.choice = choice;
    all.push_back(std::move(c));
    std::size_t pos = layers.size();
    while (pos > 0) {
      --pos;
      if (++choice[pos] < opts) break;
      choice[pos] = 0;
      if (pos == 0) return all;
    }
    if (layers.empty()) return all;
  }
}

/// Layer-by-layer extension keeping at most `width` Pareto points of the
/// partial (cost, value); the survivors are spread evenly along the cost axis.
std::vector<Candidate> beam_block(const SensitivityMatrix& m, std::span<const double> costs,
                                  const std::vector<std::size_t>& layers, std::size_t width) {
  std::vector<Candidate> beam{Candidate{}};
  for (std::size_t depth = 0; depth < layers.size(); ++depth) {
    std::vector<Candidate> next;
    std::span<const std::size_t> prefix(layers.data(), depth + 1);
    for (const auto& c : beam) {
      for (std::size_t o = 0; o < m.n_options(); ++o) {
        Candidate e;
        e.choice = c.choice;
        e.choice.push_back(o);
        e.cost = c.cost + costs[m.index(layers[depth], o)];
        e.value = m.block_form(prefix, e.choice);
        next.push_back(std::move(e));
      }
    }
    next = pareto(std::move(next));
    if (next.size() > width) {
      std::vector<Candidate> kept;
      kept.reserve(width);
      for (std::size_t i = 0; i < width; ++i) {
        const std::size_t idx = i * (next.size() - 1) / (width - 1);
        kept.push_back(std::move(next[idx]));
      }
      next = std::move(kept);
    }
    beam = std::move(next);
  }
  return beam;
}

}  // namespace

double layer_cost(std::size_t c_out, std::size_t c_in, double ratio, const QuantSpec& spec) {
  const auto n_high = static_cast<double>(high_channel_count(ratio, c_out));
  const auto rows = static_cast<double>(c_out);
  const auto cols = static_cast<double>(c_in);
  return n_high * cols * spec.b_high + (rows - n_high) * cols * spec.b_normal;
}

std::vector<double> option_costs(const SensitivityMatrix& m) {
  if (m.c_out.size() != m.n_layers || m.c_in.size() != m.n_layers)
    throw InvalidArgument("sensitivity matrix lacks per-layer shapes");
  std::vector<double> out(m.dim());
  for (std::size_t l = 0; l < m.n_layers; ++l)
    for (std::size_t o = 0; o < m.n_options(); ++o)
      out[m.index(l, o)] = layer_cost(m.c_out[l], m.c_in[l], m.ratios[o], m.spec);
  return out;
}

double budget_bits(const SensitivityMatrix& m, double target_avg_bits) {
  return target_avg_bits * total_params(m);
}

double max_uniform_ratio(const SensitivityMatrix& m, double c_target) {
  if (m.c_out.size() != m.n_layers || m.c_in.size() != m.n_layers)
    throw InvalidArgument("sensitivity matrix lacks per-layer shapes");
  // Row counts round ratio · c_out, so they step at (k - 0.5) / c_out; k / c_out
  // is kept as well in case the half-way product rounds down in floating point.
  std::vector<double> candidates{0.0};
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    const auto c = static_cast<double>(m.c_out[l]);
    for (std::size_t k = 1; k <= m.c_out[l]; ++k) {
      candidates.push_back((static_cast<double>(k) - 0.5) / c);
      candidates.push_back(static_cast<double>(k) / c);
    }
  }
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  double lowest = 0.0;
  for (double r : candidates) {
    double cost = 0.0;
    for (std::size_t l = 0; l < m.n_layers; ++l) cost += layer_cost(m.c_out[l], m.c_in[l], r, m.spec);
    if (cost <= c_target) return r;
    lowest = cost;
  }
  const double params = total_params(m);
  throw InfeasibleError("budget of " + std::to_string(c_target) + " bits is below the all-normal cost (" +
                            std::to_string(lowest) + " bits)",
                        params > 0 ? lowest / params : 0.0);
}

Allocation solve_exact(const SensitivityMatrix& m, std::span<const double> costs, double c_target,
                       std::size_t cap) {
  check_inputs(m, costs);
  const std::size_t combos = combo_count(m.n_options(), m.n_layers, cap);
  if (combos > cap) {
    throw InvalidArgument("solve_exact: " + std::to_string(m.n_options()) + "^" +
                          std::to_string(m.n_layers) + " combinations exceed the cap of " +
                          std::to_string(cap));
  }
  std::vector<std::size_t> choice(m.n_layers, 0);
  Allocation best;
  best.objective = kInf;
  bool found = false;
  for (std::size_t it = 0; it < combos; ++it) {
    const double cost = choice_cost(m, costs, choice);
    if (cost <= c_target) {
      const double obj = m.quadratic_form(choice);
      if (!found || obj < best.objective || (obj == best.objective && cost < best.cost_bits)) {
        best.choice = choice;
        best.objective = obj;
        best.cost_bits = cost;
        found = true;
      }
    }
    for (std::size_t pos = m.n_layers; pos-- > 0;) {
      if (++choice[pos] < m.n_options()) break;
      choice[pos] = 0;
    }
  }
  if (!found) throw_infeasible(m, costs, c_target);
  best.c_target = c_target;
  best.exactness = "exact";
  return best;
}

Allocation solve(const SensitivityMatrix& m, std::span<const double> costs, double c_target,
                 const AllocatorOptions& options) {
  check_inputs(m, costs);
  if (options.dp_units == 0) throw InvalidArgument("solve: dp_units must be positive");
  if (min_cost(m, costs) > c_target) throw_infeasible(m, costs, c_target);

  const auto blocks = m.blocks();
  std::vector<std::vector<Candidate>> fronts(blocks.size());
  std::vector<bool> used_beam(blocks.size(), false);
  parallel_for(blocks.size(), [&](std::size_t b) {
    const auto& layers = blocks[b];
    if (combo_count(m.n_options(), layers.size(), options.block_enum_cap) > options.block_enum_cap) {
      used_beam[b] = true;
      fronts[b] = beam_block(m, costs, layers, std::max<std::size_t>(2, options.beam_width));
    } else {
      fronts[b] = pareto(enumerate_block(m, costs, layers));
    }
  });

  // Multiple-choice knapsack over blocks; dp[c] = best value using ≤ c units.
  const double unit = c_target / static_cast<double>(options.dp_units);
  const std::size_t capacity = options.dp_units;
  auto units_of = [&](double cost) -> std::size_t {
    if (unit <= 0.0) return cost <= 0.0 ? 0 : capacity + 1;
    const double u = std::ceil(cost / unit);
    return u > static_cast<double>(capacity) ? capacity + 1 : static_cast<std::size_t>(std::max(0.0, u));
  };
  std::vector<double> dp(capacity + 1, 0.0), next(capacity + 1);
  std::vector<std::vector<std::uint32_t>> pick(blocks.size(), std::vector<std::uint32_t>(capacity + 1));
  constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    std::fill(next.begin(), next.end(), kInf);
    auto& pk = pick[b];
    std::fill(pk.begin(), pk.end(), kNone);
    for (std::uint32_t k = 0; k < fronts[b].size(); ++k) {
      const std::size_t w = units_of(fronts[b][k].cost);
      if (w > capacity) continue;
      const double v = fronts[b][k].value;
      for (std::size_t c = w; c <= capacity; ++c) {
        if (dp[c - w] == kInf) continue;
        const double cand = dp[c - w] + v;
        if (cand < next[c]) {
          next[c] = cand;
          pk[c] = k;
        }
      }
    }
    dp.swap(next);
  }
  if (dp[capacity] == kInf) {
    throw InfeasibleError("budget is feasible only within the cost discretization slack; raise dp_units",
                          min_cost(m, costs) / total_params(m));
  }

  Allocation out;
  out.choice.assign(m.n_layers, 0);
  std::size_t c = capacity;
  for (std::size_t b = blocks.size(); b-- > 0;) {
    const std::uint32_t k = pick[b][c];
    const auto& cand = fronts[b][k];
    for (std::size_t a = 0; a < blocks[b].size(); ++a) out.choice[blocks[b][a]] = cand.choice[a];
    c -= units_of(cand.cost);
  }
  out.objective = m.quadratic_form(out.choice);
  out.cost_bits = choice_cost(m, costs, out.choice);
  out.c_target = c_target;
  out.exactness = std::any_of(used_beam.begin(), used_beam.end(), [](bool v) { return v; })
                      ? "beam"
                      : "pareto-dp";
  if (!(out.cost_bits <= c_target)) throw Error("solve: internal error, allocation exceeds the budget");
  return out;
}

BitReport report_avg_bits(std::span<const LayerShape> shapes, std::span<const double> layer_ratios,
                          const QuantSpec& spec) {
  if (shapes.size() != layer_ratios.size()) throw InvalidArgument("report_avg_bits: length mismatch");
  double params = 0.0, bits = 0.0, groups = 0.0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto [c_out, c_in] = shapes[l];
    const std::size_t n_high = high_channel_count(layer_ratios[l], c_out);
    params += static_cast<double>(c_out * c_in);
    bits += layer_cost(c_out, c_in, layer_ratios[l], spec);
    groups += static_cast<double>(n_high + (c_out - n_high) * spec.groups_per_row(c_in));
  }
  BitReport r;
  r.code_bits_avg = bits / params;
  r.effective_bits_avg = (bits + 32.0 * groups) / params;
  return r;
}

std::vector<LayerShape> layer_shapes(const SensitivityMatrix& m) {
  std::vector<LayerShape> out;
  for (std::size_t l = 0; l < m.n_layers; ++l) out.push_back({m.c_out.at(l), m.c_in.at(l)});
  return out;
}

nlohmann::json allocation_to_json(const Allocation& a, const SensitivityMatrix& m,
                                  const ChannelImportance& importance, double target_avg_bits) {
  std::vector<double> ratios;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    const auto id = LayerId::from_index(l);
    const double r = m.ratios[a.choice[l]];
    ratios.push_back(r);
    const auto part = partition(importance, id, r);
    layers.push_back({{"block", id.block},
                      {"kind", to_string(id.kind)},
                      {"option", a.choice[l]},
                      {"ratio", r},
                      {"n_high", part.n_high()},
                      {"high_channels", part.high_channels}});
  }
  const auto bits = report_avg_bits(layer_shapes(m), ratios, m.spec);
  return {{"target_avg_bits", target_avg_bits},
          {"c_target_bits", a.c_target},
          {"exactness", a.exactness},
          {"objective", a.objective},
          {"cost_bits", a.cost_bits},
          {"code_bits_avg", bits.code_bits_avg},
          {"effective_bits_avg", bits.effective_bits_avg},
          {"spec", m.spec},
          {"ratios", m.ratios},
          {"layers", std::move(layers)}};
}

std::vector<ChannelPartition> partitions_from_json(const nlohmann::json& j) {
  std::vector<ChannelPartition> out;
  for (const auto& l : j.at("layers")) {
    ChannelPartition p;
    p.layer = {l.at("block").get<std::size_t>(), parse_layer_kind(l.at("kind").get<std::string>())};
    p.ratio = l.at("ratio").get<double>();
    p.high_channels = l.at("high_channels").get<std::vector<std::size_t>>();
    if (p.layer.index() != out.size())
      throw InvalidArgument("allocation file lists layers out of canonical order");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace tqpt
