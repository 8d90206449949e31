#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tqpt/tensor.hpp"

namespace tqpt {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Moment buffers for one parameter tensor.
struct AdamState {
  AdamOptions options;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(AdamOptions opts, std::size_t n) : options(opts), m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam update using `param.grad()`. Weight decay enters as an
/// additive L2 term `weight_decay * param` on the gradient.
template <typename T>
void adam_step(BasicTensor<T>& param, AdamState& state);

/// Same update for a parameter held as a raw span with its gradient alongside.
template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState& state);

/// Scalar objective that also reports its analytic gradient when `grad` is
/// non-null (the gradient tensor is resized by the callee).
template <typename T>
using GradObjective = std::function<double(const BasicTensor<T>& x, BasicTensor<T>* grad)>;

/// Max over coordinates of |g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|) with
/// central differences of step `eps`. The objective must be smooth at `x`;
/// kinks such as |x| at 0 are not supported inputs.
template <typename T>
double grad_check(const GradObjective<T>& f, const BasicTensor<T>& x, double eps = 1e-3);

}  // namespace tqpt
