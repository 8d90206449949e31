#include "tqpt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace tqpt {

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState& state) {
  if (grad.size() != param.size()) {
    throw ShapeError("adam: gradient has " + std::to_string(grad.size()) + " entries for " +
                     std::to_string(param.size()) + " parameters");
  }
  if (state.m.size() != param.size()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  const auto& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]) + o.weight_decay * static_cast<double>(param[i]);
    state.m[i] = o.beta1 * state.m[i] + (1.0 - o.beta1) * g;
    state.v[i] = o.beta2 * state.v[i] + (1.0 - o.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] = static_cast<T>(param[i] - o.lr * mhat / (std::sqrt(vhat) + o.eps));
  }
}

template <typename T>
void adam_step(BasicTensor<T>& param, AdamState& state) {
  if (!param.has_grad()) {
    throw InvalidArgument("adam_step: parameter " + to_string(param.shape()) + " has no gradient");
  }
  std::span<const T> g = std::as_const(param).grad();
  adam_step(param.data(), g, state);
}

template <typename T>
double grad_check(const GradObjective<T>& f, const BasicTensor<T>& x, double eps) {
  BasicTensor<T> analytic;
  f(x, &analytic);
  if (analytic.size() != x.size()) {
    throw ShapeError("grad_check: objective returned gradient " + to_string(analytic.shape()) +
                     " for input " + to_string(x.shape()));
  }
  BasicTensor<T> probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(orig + eps);
    const double up = f(probe, nullptr);
    probe[i] = static_cast<T>(orig - eps);
    const double down = f(probe, nullptr);
    probe[i] = orig;
    const double fd = (up - down) / (2.0 * eps);
    const double ad = analytic[i];
    const double rel = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState&);
template void adam_step<float>(BasicTensor<float>&, AdamState&);
template void adam_step<double>(BasicTensor<double>&, AdamState&);
template double grad_check<float>(const GradObjective<float>&, const BasicTensor<float>&, double);
template double grad_check<double>(const GradObjective<double>&, const BasicTensor<double>&, double);

}  // namespace tqpt
