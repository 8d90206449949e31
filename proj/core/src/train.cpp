#include "tqpt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tqpt/optim.hpp"
#include "tqpt/parallel.hpp"

namespace tqpt {

double batch_gradient(const Model& model, const std::vector<std::vector<std::int32_t>>& batch,
                      ParamRegistry<float>& grads) {
  if (batch.empty()) throw InvalidArgument("batch_gradient: empty batch");
  const std::size_t n = batch.size();
  std::vector<ParamRegistry<float>> slots(n);
  std::vector<double> losses(n);
  parallel_for(n, [&](std::size_t i) {
    slots[i] = ParamRegistry<float>(model.config());
    losses[i] = model.sequence_loss(batch[i], &slots[i]);
  });

  grads = ParamRegistry<float>(model.config());
  auto out = grads.named();
  std::vector<std::vector<std::pair<std::string, BasicTensor<float>*>>> views;
  views.reserve(n);
  for (auto& s : slots) views.push_back(s.named());
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> acc;
  for (std::size_t p = 0; p < out.size(); ++p) {
    auto dst = out[p].second->data();
    acc.assign(dst.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto src = views[i][p].second->data();
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += src[j];
    }
    for (std::size_t j = 0; j < acc.size(); ++j) dst[j] = static_cast<float>(acc[j] * inv);
  }
  double loss = 0.0;
  for (double l : losses) loss += l;
  return loss * inv;
}

double gradient_norm(const Model& model, const CalibrationSet& calib) {
  calib.validate(model.config());
  ParamRegistry<float> grads;
  batch_gradient(model, calib.sequences, grads);
  double sq = 0.0;
  for (const auto& [name, t] : std::as_const(grads).named())
    for (float g : t->data()) sq += static_cast<double>(g) * g;
  return std::sqrt(sq);
}

TrainResult train(Model& model, std::span<const std::int32_t> tokens, const TrainOptions& options,
                  const std::function<void(std::size_t, double)>& on_step) {
  if (tokens.empty()) throw InvalidArgument("train: empty corpus");
  TrainResult result;
  if (options.steps == 0) return result;
  if (options.batch_size == 0) throw InvalidArgument("train: batch_size must be >= 1");
  const auto& cfg = model.config();
  const std::size_t seq = options.seq_len == 0 ? cfg.max_seq_len : options.seq_len;
  if (seq > cfg.max_seq_len) throw InvalidArgument("train: seq_len exceeds max_seq_len");
  const std::size_t window = std::min(seq, tokens.size());
  if (window < 2) throw InvalidArgument("train: corpus needs at least two tokens");

  Rng rng = Rng::substream(options.seed, "train");
  AdamOptions adam{.lr = options.lr, .weight_decay = options.weight_decay};
  auto params = model.params().named();
  std::vector<AdamState> states;
  states.reserve(params.size());
  for (const auto& [name, t] : params) states.emplace_back(adam, t->size());

  const std::size_t starts = tokens.size() - window + 1;
  std::vector<std::vector<std::int32_t>> batch(options.batch_size);
  ParamRegistry<float> grads;
  for (std::size_t step = 0; step < options.steps; ++step) {
    for (auto& seqv : batch) {
      const std::size_t s = rng.below(starts);
      seqv.assign(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                  tokens.begin() + static_cast<std::ptrdiff_t>(s + window));
    }
    const double loss = batch_gradient(model, batch, grads);
    if (!std::isfinite(loss)) throw DivergenceError("train: non-finite loss", step);
    result.loss_curve.push_back(loss);
    if (on_step) on_step(step, loss);

    auto gview = grads.named();
    double scale = 1.0;
    if (options.grad_clip > 0.0) {
      double sq = 0.0;
      for (const auto& [name, g] : gview)
        for (float v : g->data()) sq += static_cast<double>(v) * v;
      const double norm = std::sqrt(sq);
      if (norm > options.grad_clip) scale = options.grad_clip / norm;
    }

    double lr = options.lr;
    if (step < options.warmup_steps) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(options.warmup_steps);
    } else {
      const double span = static_cast<double>(std::max<std::size_t>(1, options.steps - options.warmup_steps));
      const double progress = static_cast<double>(step - options.warmup_steps) / span;
      const double floor = options.min_lr_fraction;
      lr *= floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }

    std::vector<float> scaled;
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto g = gview[p].second->data();
      scaled.assign(g.begin(), g.end());
      if (scale != 1.0)
        for (auto& v : scaled) v = static_cast<float>(v * scale);
      states[p].options.lr = lr;
      adam_step<float>(params[p].second->data(), scaled, states[p]);
    }
  }
  return result;
}

}  // namespace tqpt
