#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "support.hpp"
#include "tqpt/ops.hpp"
#include "tqpt/optim.hpp"

using namespace tqpt;
using test::random_tensor;

TEST(Tensor, ShapeAndStorageAgree) {
  Tensor t({3, 4}, 1.5f);
  EXPECT_EQ(t.size(), 12u);
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_THROW(t.reshape({5}), ShapeError);
  t.reshape({12});
  EXPECT_EQ(t.cols(), 12u);
}

TEST(Tensor, GradientBufferMatchesData) {
  Tensor t({2, 3});
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(t.grad(), InvalidArgument);
  t.enable_grad();
  EXPECT_EQ(t.grad().size(), t.size());
  t.grad()[4] = 2.0f;
  t.zero_grad();
  EXPECT_EQ(t.grad()[4], 0.0f);
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor b({2, 2}, {1.25f, -2.0f, 3.5f, 0.5f});
  EXPECT_EQ(matmul(eye, b), b);
}

TEST(Matmul, ScalarChainRule) {
  const Tensor a({1, 1}, {2.0f}), b({1, 1}, {3.0f}), dc({1, 1}, {1.0f});
  EXPECT_EQ(matmul(a, b)[0], 6.0f);
  Tensor da, db;
  matmul_backward(a, b, dc, &da, &db);
  EXPECT_EQ(da[0], 3.0f);
  EXPECT_EQ(db[0], 2.0f);
}

TEST(Matmul, BackwardAccumulates) {
  const Tensor a({1, 1}, {2.0f}), b({1, 1}, {3.0f}), dc({1, 1}, {1.0f});
  Tensor da({1, 1}, {10.0f});
  matmul_backward<float>(a, b, dc, &da, nullptr);
  EXPECT_EQ(da[0], 13.0f);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  const Tensor a({2, 3}), b({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, FiniteDifferences) {
  Rng rng(3);
  const Tensor64 b = random_tensor<double>({4, 2}, rng);
  const Tensor64 w = random_tensor<double>({3, 2}, rng);
  GradObjective<double> f = [&](const Tensor64& a, Tensor64* g) {
    const Tensor64 c = matmul(a, b);
    double loss = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) loss += w[i] * c[i];
    if (g) {
      *g = Tensor64();
      matmul_backward<double>(a, b, w, g, nullptr);
    }
    return loss;
  };
  EXPECT_LT(grad_check(f, random_tensor<double>({3, 4}, rng)), 1e-3);
}

TEST(Matmul, FloatPathMatchesDoubleClosely) {
  Rng rng(11);
  const Tensor64 a = random_tensor<double>({17, 33}, rng), b = random_tensor<double>({33, 9}, rng);
  const Tensor64 ref = matmul(a, b);
  const Tensor got = matmul(a.cast<float>(), b.cast<float>());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-5);
}

TEST(Linear, MatchesMatmulWithTransposedWeight) {
  Rng rng(5);
  const Tensor64 x = random_tensor<double>({5, 3}, rng), w = random_tensor<double>({4, 3}, rng);
  Tensor64 wt({3, 4});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) wt(c, r) = w(r, c);
  const Tensor64 y = linear(x, w), ref = matmul(x, wt);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
}

TEST(LayerNorm, ConstantRowGivesBias) {
  const Tensor x({1, 3}, {4.0f, 4.0f, 4.0f});
  const Tensor gain({3}, {2.0f, 3.0f, 4.0f}), bias({3}, {0.5f, -1.0f, 7.0f});
  const Tensor y = layernorm(x, gain, bias, 1e-5);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], bias[i]);
}

TEST(LayerNorm, NormalizedInputPassesThrough) {
  const Tensor x({1, 2}, {1.0f, -1.0f});
  const Tensor gain({2}, 1.0f), bias({2}, 0.0f);
  const Tensor y = layernorm(x, gain, bias, 1e-8);
  EXPECT_NEAR(y[0], 1.0f, 1e-6);
  EXPECT_NEAR(y[1], -1.0f, 1e-6);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  Rng rng(8);
  const Tensor x = random_tensor<float>({6, 32}, rng, 3.0);
  const Tensor y = layernorm(x, Tensor({32}, 1.0f), Tensor({32}, 0.0f), 1e-9);
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 32; ++c) mean += y(r, c);
    mean /= 32;
    for (std::size_t c = 0; c < 32; ++c) var += (y(r, c) - mean) * (y(r, c) - mean);
    var /= 32;
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
}

TEST(LayerNorm, RejectsNonPositiveEps) {
  const Tensor x({1, 2}, {1.0f, 2.0f}), g({2}, 1.0f), b({2}, 0.0f);
  EXPECT_THROW(layernorm(x, g, b, 0.0), InvalidArgument);
  EXPECT_THROW(layernorm(x, g, b, -1e-5), InvalidArgument);
}

TEST(Attention, SingleTokenReturnsValueRow) {
  Rng rng(2);
  const Tensor q = random_tensor<float>({1, 8}, rng), k = random_tensor<float>({1, 8}, rng),
               v = random_tensor<float>({1, 8}, rng);
  EXPECT_EQ(causal_attention(q, k, v, 2), v);
}

TEST(Attention, IdenticalKeysGiveUniformCausalWeights) {
  Rng rng(4);
  const std::size_t t = 5;
  const Tensor q = random_tensor<float>({t, 4}, rng), v = random_tensor<float>({t, 4}, rng);
  Tensor k({t, 4});
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < 4; ++c) k(r, c) = 0.3f * static_cast<float>(c) - 0.2f;
  AttentionCache<float> cache;
  causal_attention(q, k, v, 2, &cache);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < t; ++c) {
        const float p = cache.probs[(h * t + r) * t + c];
        if (c > r) {
          EXPECT_EQ(p, 0.0f);
        } else {
          EXPECT_NEAR(p, 1.0 / static_cast<double>(r + 1), 1e-6);
        }
      }
}

TEST(Attention, RowsSumToOneAndStayCausal) {
  Rng rng(6);
  const std::size_t t = 9;
  const Tensor q = random_tensor<float>({t, 12}, rng, 2.0), k = random_tensor<float>({t, 12}, rng, 2.0),
               v = random_tensor<float>({t, 12}, rng);
  AttentionCache<float> cache;
  const Tensor out = causal_attention(q, k, v, 3, &cache);
  for (std::size_t row = 0; row < 3 * t; ++row) {
    double s = 0.0;
    for (std::size_t c = 0; c < t; ++c) s += cache.probs[row * t + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  // Editing the last position leaves every earlier output row untouched.
  Tensor k2 = k, v2 = v;
  for (std::size_t c = 0; c < 12; ++c) {
    k2(t - 1, c) += 1.0f;
    v2(t - 1, c) -= 2.0f;
  }
  const Tensor out2 = causal_attention(q, k2, v2, 3);
  for (std::size_t r = 0; r + 1 < t; ++r)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(out(r, c), out2(r, c));
}

TEST(Attention, WidthMustDivideHeads) {
  const Tensor q({2, 6});
  EXPECT_THROW(causal_attention(q, q, q, 4), InvalidArgument);
}

TEST(Attention, FiniteDifferencesFourTokensTwoHeads) {
  Rng rng(12);
  const Tensor64 k = random_tensor<double>({4, 6}, rng), v = random_tensor<double>({4, 6}, rng);
  const Tensor64 w = random_tensor<double>({4, 6}, rng);
  GradObjective<double> f = [&](const Tensor64& q, Tensor64* g) {
    AttentionCache<double> cache;
    const Tensor64 o = causal_attention(q, k, v, 2, &cache);
    double loss = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) loss += w[i] * o[i];
    if (g) {
      *g = Tensor64();
      causal_attention_backward<double>(q, k, v, 2, cache, w, g, nullptr, nullptr);
    }
    return loss;
  };
  EXPECT_LT(grad_check(f, random_tensor<double>({4, 6}, rng)), 1e-3);
}

TEST(Gelu, KnownValues) {
  const Tensor x({3}, {0.0f, 1.0f, -1.0f});
  const Tensor y = gelu(x);
  EXPECT_EQ(y[0], 0.0f);
  // tanh approximation: 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))
  const double ref = 0.5 * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * 1.044715));
  EXPECT_NEAR(y[1], ref, 1e-6);
  EXPECT_NEAR(y[2], -1.0 + ref, 1e-6);
}

TEST(Softmax, RowsSumToOneUnderLargeLogits) {
  const Tensor x({2, 3}, {1000.0f, 999.0f, -1000.0f, 0.0f, 0.0f, 0.0f});
  const Tensor p = softmax_rows(x);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(p(r, 0) + p(r, 1) + p(r, 2), 1.0, 1e-6);
  EXPECT_NEAR(p(1, 0), 1.0 / 3.0, 1e-7);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  const Tensor logits({4, 7}, 0.25f);
  const std::vector<std::int32_t> targets{0, 3, 6, 2};
  EXPECT_NEAR(cross_entropy(logits, targets), std::log(7.0), 1e-6);
}

TEST(CrossEntropy, LargeMarginDrivesLossToZero) {
  double prev = INFINITY;
  for (float margin : {1.0f, 5.0f, 20.0f, 60.0f}) {
    Tensor logits({1, 3}, 0.0f);
    logits[1] = margin;
    const double loss = cross_entropy(logits, std::vector<std::int32_t>{1});
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(CrossEntropy, RejectsOutOfRangeTarget) {
  const Tensor logits({2, 3});
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{0, 3}), InvalidArgument);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{-1, 0}), InvalidArgument);
}

TEST(CrossEntropy, PrefixTargetsLeaveTrailingRowsWithoutGradient) {
  Rng rng(9);
  const Tensor logits = random_tensor<float>({3, 5}, rng);
  Tensor d;
  cross_entropy(logits, std::vector<std::int32_t>{1, 4}, &d);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(d(2, c), 0.0f);
}

TEST(CrossEntropy, FiniteDifferences) {
  Rng rng(10);
  const std::vector<std::int32_t> targets{2, 0, 4};
  GradObjective<double> f = [&](const Tensor64& x, Tensor64* g) { return cross_entropy(x, targets, g); };
  EXPECT_LT(grad_check(f, random_tensor<double>({3, 5}, rng, 2.0)), 1e-3);
}

TEST(Adam, ZeroGradientWithoutDecayIsNoOp) {
  Tensor p({3}, {1.0f, -2.0f, 0.5f});
  p.enable_grad();
  AdamState st({}, 3);
  const Tensor before = p;
  for (int i = 0; i < 5; ++i) adam_step(p, st);
  EXPECT_EQ(p, before);
}

TEST(Adam, ConstantGradientDescends) {
  Tensor p({2}, {0.0f, 0.0f});
  p.enable_grad();
  p.grad()[0] = 0.7f;
  p.grad()[1] = -0.2f;
  AdamState st({.lr = 0.01}, 2);
  for (int i = 0; i < 100; ++i) adam_step(p, st);
  EXPECT_LT(p[0], -0.5f);
  EXPECT_GT(p[1], 0.5f);
}

TEST(Adam, OneStepHandComputed) {
  // m̂ = g = 1, v̂ = g² = 1 after bias correction, so the step is lr / (1 + eps).
  Tensor64 p({1}, {1.0});
  p.enable_grad();
  p.grad()[0] = 1.0;
  AdamState st({.lr = 1e-3}, 1);
  adam_step(p, st);
  EXPECT_NEAR(p[0], 0.999, 1e-6);
  EXPECT_NEAR(p[0], 1.0 - 1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, WeightDecayIsAdditiveL2) {
  Tensor64 a({1}, {2.0}), b({1}, {2.0});
  a.enable_grad();
  b.enable_grad();
  a.grad()[0] = 0.3;
  b.grad()[0] = 0.3 + 0.1 * 2.0;
  AdamState sa({.lr = 0.05, .weight_decay = 0.1}, 1), sb({.lr = 0.05}, 1);
  adam_step(a, sa);
  adam_step(b, sb);
  EXPECT_EQ(a[0], b[0]);
}

TEST(Adam, MissingGradientIsError) {
  Tensor p({2});
  AdamState st({}, 2);
  EXPECT_THROW(adam_step(p, st), InvalidArgument);
}

TEST(GradCheck, QuadraticIsExact) {
  GradObjective<double> f = [](const Tensor64& x, Tensor64* g) {
    if (g) {
      *g = Tensor64(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] = 2.0 * x[i];
    }
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * x[i];
    return s;
  };
  EXPECT_LT(grad_check(f, Tensor64({2}, {1.0, 2.0})), 1e-6);
}

TEST(GradCheck, ReportsWrongGradient) {
  GradObjective<double> f = [](const Tensor64& x, Tensor64* g) {
    if (g) *g = Tensor64(x.shape(), 1.0);
    return x[0] * x[0];
  };
  EXPECT_GT(grad_check(f, Tensor64({1}, {3.0})), 0.5);
}

TEST(Determinism, RepeatedCallsAreBitwiseEqual) {
  Rng rng(21);
  const Tensor a = random_tensor<float>({37, 64}, rng), b = random_tensor<float>({64, 29}, rng);
  const Tensor q = random_tensor<float>({16, 8}, rng), k = random_tensor<float>({16, 8}, rng);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
  EXPECT_EQ(causal_attention(q, k, q, 2), causal_attention(q, k, q, 2));
  EXPECT_EQ(gelu(a), gelu(a));
}

TEST(FiniteChecks, NaNIsReportedWhenEnabled) {
  const bool was = finite_checks_enabled();
  set_finite_checks(true);
  Tensor t({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_THROW(check_finite(t, "test"), NumericError);
  EXPECT_THROW(gelu(t), NumericError);
  set_finite_checks(was);
}
