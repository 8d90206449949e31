#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "support.hpp"
#include "tqpt/allocator.hpp"

using namespace tqpt;

namespace {

SensitivityMatrix single_layer(std::vector<double> diag) {
  SensitivityMatrix m;
  for (std::size_t o = 0; o < diag.size(); ++o) m.ratios.push_back(0.1 * static_cast<double>(o + 1));
  m.n_layers = 1;
  m.block_of = {0};
  m.layer_params = {10};
  m.c_out = {2};
  m.c_in = {5};
  m.values.assign(diag.size() * diag.size(), 0.0);
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

// Budget discretization of one bit, so integer costs are represented exactly.
AllocatorOptions unit_bits(double c_target) {
  AllocatorOptions o;
  o.dp_units = static_cast<std::size_t>(c_target);
  return o;
}

// Multiple-choice knapsack over integer costs for a diagonal-only matrix,
// written as a textbook table DP.
double separable_optimum(const SensitivityMatrix& m, const std::vector<double>& costs, std::size_t budget) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> best(budget + 1, 0.0);
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    std::vector<double> next(budget + 1, inf);
    for (std::size_t c = 0; c <= budget; ++c)
      for (std::size_t o = 0; o < m.n_options(); ++o) {
        const auto w = static_cast<std::size_t>(costs[m.index(l, o)]);
        if (w <= c && best[c - w] < inf) next[c] = std::min(next[c], best[c - w] + m(m.index(l, o), m.index(l, o)));
      }
    best = next;
  }
  return best[budget];
}

double cost_of(const SensitivityMatrix& m, const std::vector<double>& costs, const std::vector<std::size_t>& choice) {
  double c = 0.0;
  for (std::size_t l = 0; l < choice.size(); ++l) c += costs[m.index(l, choice[l])];
  return c;
}

}  // namespace

TEST(LayerCost, CountsWholeRows) {
  QuantSpec spec;
  EXPECT_EQ(layer_cost(4, 4, 0.5, spec), 2 * 4 * 3 + 2 * 4 * 2);
  EXPECT_EQ(layer_cost(64, 64, 0.02, spec), (1 * 3 + 63 * 2) * 64);
  EXPECT_EQ(layer_cost(256, 64, 0.2, spec), (51 * 3 + 205 * 2) * 64);
}

TEST(Allocator, SingleLayerFollowsBudget) {
  const auto m = single_layer({4.0, 1.0});
  const std::vector<double> costs{10.0, 20.0};
  EXPECT_EQ(solve(m, costs, 20.0).choice, std::vector<std::size_t>{1});
  EXPECT_EQ(solve(m, costs, 15.0).choice, std::vector<std::size_t>{0});
  EXPECT_EQ(solve_exact(m, costs, 20.0).choice, std::vector<std::size_t>{1});
  EXPECT_EQ(solve_exact(m, costs, 15.0).choice, std::vector<std::size_t>{0});
}

TEST(Allocator, InfeasibleBudgetReportsMinimumBits) {
  const auto m = single_layer({4.0, 1.0});
  const std::vector<double> costs{10.0, 20.0};
  try {
    solve(m, costs, 5.0);
    FAIL() << "expected InfeasibleError";
  } catch (const InfeasibleError& e) {
    EXPECT_DOUBLE_EQ(e.min_avg_bits(), 1.0);
  }
  EXPECT_THROW(solve_exact(m, costs, 5.0), InfeasibleError);
}

TEST(Allocator, MatchesExhaustiveSearchOnIntegerCosts) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t layers = 2 + rng.below(7);  // 2..8
    const std::size_t options = 2 + rng.below(2);
    const std::size_t per_block = 1 + rng.below(layers);
    const double shift = trial % 2 == 0 ? 0.5 : -0.5;
    const auto inst = test::random_alloc_instance(layers, per_block, options, rng, shift);
    double lo = 0.0, hi = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
      double mn = 1e9, mx = 0.0;
      for (std::size_t o = 0; o < options; ++o) {
        mn = std::min(mn, inst.costs[inst.m.index(l, o)]);
        mx = std::max(mx, inst.costs[inst.m.index(l, o)]);
      }
      lo += mn;
      hi += mx;
    }
    const double budget = std::floor(lo + rng.uniform() * (hi - lo));
    const auto exact = solve_exact(inst.m, inst.costs, budget);
    const auto fast = solve(inst.m, inst.costs, budget, unit_bits(budget));
    EXPECT_NEAR(fast.objective, exact.objective, 1e-12 * (1.0 + std::abs(exact.objective))) << "trial " << trial;
    EXPECT_LE(fast.cost_bits, budget);
    EXPECT_EQ(fast.cost_bits, cost_of(inst.m, inst.costs, fast.choice));
    EXPECT_EQ(fast.objective, inst.m.quadratic_form(fast.choice));
  }
}

TEST(Allocator, FractionalCostsStayFeasibleAndNearOptimal) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto inst = test::random_alloc_instance(6, 3, 3, rng, 0.3);
    for (auto& c : inst.costs) c += rng.uniform();
    double lo = 0.0, hi = 0.0;
    for (std::size_t l = 0; l < 6; ++l) {
      const auto first = inst.costs.begin() + static_cast<std::ptrdiff_t>(3 * l);
      lo += *std::min_element(first, first + 3);
      hi += *std::max_element(first, first + 3);
    }
    const double budget = lo + 0.5 * (hi - lo);
    AllocatorOptions opt;
    opt.dp_units = 1000;
    const auto fast = solve(inst.m, inst.costs, budget, opt);
    EXPECT_LE(fast.cost_bits, budget);
    // Every block's cost is rounded up by less than one unit, so the result is
    // no worse than the exact optimum at a budget lowered by that slack.
    const double slack = 2.0 * budget / 1000.0;
    try {
      const auto tight = solve_exact(inst.m, inst.costs, budget - slack);
      EXPECT_LE(fast.objective, tight.objective + 1e-12);
    } catch (const InfeasibleError&) {
    }
    const auto exact = solve_exact(inst.m, inst.costs, budget);
    EXPECT_GE(fast.objective, exact.objective - 1e-12);
  }
}

TEST(Allocator, SeparableInstancesMatchKnapsackDp) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t layers = 24;
    auto inst = test::random_alloc_instance(layers, 1, 4, rng, 1.0);
    const std::size_t budget = 20 * layers / 2;
    const double want = separable_optimum(inst.m, inst.costs, budget);
    const auto got = solve(inst.m, inst.costs, static_cast<double>(budget), unit_bits(static_cast<double>(budget)));
    EXPECT_NEAR(got.objective, want, 1e-12 * (1.0 + std::abs(want)));
  }
}

TEST(Allocator, SlackBudgetGivesUnconstrainedMinimum) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto inst = test::random_alloc_instance(6, 2, 3, rng, -0.2);
    const auto got = solve(inst.m, inst.costs, 1e6);
    const auto exact = solve_exact(inst.m, inst.costs, 1e6);
    EXPECT_EQ(got.objective, exact.objective);
  }
}

TEST(Allocator, ObjectiveIsMonotoneInBudget) {
  Rng rng(17);
  const auto inst = test::random_alloc_instance(8, 4, 3, rng, 0.0);
  double prev = std::numeric_limits<double>::infinity();
  for (double budget = 60; budget <= 160; budget += 5) {
    try {
      const auto a = solve(inst.m, inst.costs, budget, unit_bits(budget));
      EXPECT_LE(a.objective, prev + 1e-12) << budget;
      prev = a.objective;
    } catch (const InfeasibleError&) {
      EXPECT_EQ(prev, std::numeric_limits<double>::infinity());
    }
  }
}

TEST(Allocator, ScalingMatrixKeepsChoice) {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto inst = test::random_alloc_instance(6, 3, 3, rng, 0.4);
    const auto a = solve(inst.m, inst.costs, 60.0, unit_bits(60.0));
    for (auto& v : inst.m.values) v *= 4.0;  // power of two keeps every sum exact
    const auto b = solve(inst.m, inst.costs, 60.0, unit_bits(60.0));
    EXPECT_EQ(a.choice, b.choice);
    EXPECT_EQ(4.0 * a.objective, b.objective);
  }
}

TEST(Allocator, DeterministicAcrossCalls) {
  Rng rng(1);
  const auto inst = test::random_alloc_instance(24, 6, 5, rng, 0.0);
  const auto a = solve(inst.m, inst.costs, 250.0);
  const auto b = solve(inst.m, inst.costs, 250.0);
  EXPECT_EQ(a.choice, b.choice);
  EXPECT_EQ(a.objective, b.objective);
  EXPECT_EQ(a.exactness, "pareto-dp");
}

TEST(Allocator, BeamSearchFallbackStaysFeasible) {
  Rng rng(4);
  const auto inst = test::random_alloc_instance(6, 6, 5, rng, 0.1);
  AllocatorOptions opt;
  opt.block_enum_cap = 100;
  opt.beam_width = 16;
  const auto a = solve(inst.m, inst.costs, 60.0, opt);
  EXPECT_EQ(a.exactness, "beam");
  EXPECT_LE(a.cost_bits, 60.0);
  EXPECT_GE(a.objective, solve_exact(inst.m, inst.costs, 60.0).objective - 1e-12);
}

TEST(Allocator, ExactSolverRefusesLargeInstances) {
  Rng rng(2);
  const auto inst = test::random_alloc_instance(12, 6, 5, rng, 0.0);
  EXPECT_THROW(solve_exact(inst.m, inst.costs, 200.0, 1000), InvalidArgument);
}

TEST(Allocator, RejectsMismatchedCosts) {
  const auto m = single_layer({1.0, 2.0});
  EXPECT_THROW(solve(m, std::vector<double>{1.0}, 10.0), InvalidArgument);
}

TEST(MaxUniformRatio, IsTheLargestRatioWithinBudget) {
  SensitivityMatrix m;
  m.ratios = {0.1, 0.2};
  m.n_layers = 3;
  m.block_of = {0, 0, 0};
  m.c_out = {64, 256, 64};
  m.c_in = {64, 64, 256};
  for (std::size_t l = 0; l < 3; ++l) m.layer_params.push_back(m.c_out[l] * m.c_in[l]);
  auto cost_at = [&](double r) {
    double c = 0.0;
    for (std::size_t l = 0; l < 3; ++l) c += layer_cost(m.c_out[l], m.c_in[l], r, m.spec);
    return c;
  };
  for (double target : {2.0, 2.003, 2.05, 2.1, 2.2, 2.37, 2.9, 3.0}) {
    const double budget = budget_bits(m, target);
    const double r = max_uniform_ratio(m, budget);
    EXPECT_LE(cost_at(r), budget) << target;
    for (int k = 1; k <= 4096; ++k) {
      const double other = k / 4096.0;
      // Ratios just above r round to the same row counts; none may buy more rows.
      if (other > r && cost_at(other) <= budget) {
        EXPECT_EQ(cost_at(other), cost_at(r)) << target << " " << other;
      }
    }
  }
  EXPECT_EQ(max_uniform_ratio(m, budget_bits(m, 3.0)), 1.0);
  EXPECT_EQ(max_uniform_ratio(m, budget_bits(m, 2.0)), 0.0);
  EXPECT_THROW(max_uniform_ratio(m, budget_bits(m, 1.9)), InfeasibleError);
}

TEST(BitReport, UniformRatioMatchesRowCount) {
  QuantSpec spec;
  const std::vector<LayerShape> shapes{{64, 64}, {64, 64}, {256, 64}, {64, 256}};
  const std::vector<double> ratios(4, 0.2);
  const auto r = report_avg_bits(shapes, ratios, spec);
  double bits = 0.0, params = 0.0;
  for (const auto& s : shapes) {
    const double high = std::max(1.0, std::round(0.2 * static_cast<double>(s.c_out)));
    bits += (high * 3 + (static_cast<double>(s.c_out) - high) * 2) * static_cast<double>(s.c_in);
    params += static_cast<double>(s.c_out * s.c_in);
  }
  EXPECT_DOUBLE_EQ(r.code_bits_avg, bits / params);
  EXPECT_NEAR(r.code_bits_avg, 2.2, 0.005);
  EXPECT_GT(r.effective_bits_avg, r.code_bits_avg);
}

TEST(BitReport, GroupsChargeScaleAndZeroPoint) {
  QuantSpec spec;
  spec.group_size = 16;
  const std::vector<LayerShape> shapes{{4, 32}};
  const auto r = report_avg_bits(shapes, std::vector<double>{0.25}, spec);
  // one high row (1 group) + three normal rows × 2 groups = 7 groups of 32 bits
  EXPECT_DOUBLE_EQ(r.code_bits_avg, (32.0 * 3 + 96.0 * 2) / 128.0);
  EXPECT_DOUBLE_EQ(r.effective_bits_avg, (32.0 * 3 + 96.0 * 2 + 7 * 32.0) / 128.0);
}

TEST(AllocationJson, PartitionsRoundTrip) {
  auto m = single_layer({3.0, 1.0});
  m.c_out = {4};
  m.c_in = {2};
  m.layer_params = {8};
  m.ratios = {0.25, 0.5};
  ChannelImportance imp;
  imp.scores = {{0.1, 0.9, 0.5, 0.2}};
  const auto costs = option_costs(m);
  const auto a = solve(m, costs, budget_bits(m, 2.5));
  const auto j = allocation_to_json(a, m, imp, 2.5);
  EXPECT_EQ(j.at("layers")[0].at("ratio").get<double>(), 0.5);
  const auto parts = partitions_from_json(j);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_EQ(parts[0].high_channels, (std::vector<std::size_t>{1, 2}));
  EXPECT_DOUBLE_EQ(j.at("code_bits_avg").get<double>(), 2.5);
}
