#include "tqpt/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "tqpt/parallel.hpp"
#include "tqpt/rng.hpp"

namespace tqpt {

namespace {

constexpr double kHardLatent = 10.0;  // h(±10) is exactly 1 / 0 after the clip
constexpr double kMinRange = 1e-8;

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double block_loss_and_grad(const Tensor& y, const Tensor& target, Tensor* dy) {
  const double inv_t = 1.0 / static_cast<double>(y.rows());
  if (dy) *dy = Tensor(y.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = static_cast<double>(y[i]) - static_cast<double>(target[i]);
    s += d * d;
    if (dy) (*dy)[i] = static_cast<float>(2.0 * d * inv_t);
  }
  return s * inv_t;
}

}  // namespace

// --- primitives ----------------------------------------------------------------

double rectified_sigmoid(double v) { return std::clamp(1.2 * sigmoid(v) - 0.1, 0.0, 1.0); }

double rectified_sigmoid_grad(double v) {
  const double s = sigmoid(v);
  const double h = 1.2 * s - 0.1;
  if (h <= 0.0 || h >= 1.0) return 0.0;
  return 1.2 * s * (1.0 - s);
}

double rectified_sigmoid_inverse(double h) {
  const double s = (std::clamp(h, 0.0, 1.0) + 0.1) / 1.2;
  return std::log(s / (1.0 - s));
}

void adaround_forward(std::span<const float> w, const GridParams& grid, std::span<const double> h,
                      std::span<float> out) {
  const double s = grid.scale;
  const double qmax = max_code(grid.bits);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double fl = std::floor(static_cast<double>(w[i]) / s);
    const double q = std::clamp(fl + h[i] + grid.zero_point, 0.0, qmax);
    out[i] = grid.scale * static_cast<float>(q - grid.zero_point);
  }
}

double reg_loss(std::span<const float> v, double gamma, std::span<double> dv, double weight) {
  if (!(gamma > 0.0)) throw InvalidArgument("reg_loss: gamma must be positive");
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double h = rectified_sigmoid(v[i]);
    const double a = std::abs(2.0 * h - 1.0);
    total += 1.0 - std::pow(a, gamma);
    if (!dv.empty() && a > 0.0) {
      const double sign = 2.0 * h - 1.0 > 0.0 ? 1.0 : -1.0;
      const double dh = -gamma * std::pow(a, gamma - 1.0) * sign * 2.0;
      dv[i] += weight * dh * rectified_sigmoid_grad(v[i]);
    }
  }
  return total;
}

ClipRange clip_range(std::span<const float> w) {
  ClipRange r;
  if (w.empty()) return r;
  const auto [mn, mx] = std::minmax_element(w.begin(), w.end());
  r.constant = *mn == *mx && *mn != 0.0f;
  r.lo = std::min(*mn, 0.0f);
  r.hi = std::max(*mx, 0.0f);
  return r;
}

GridParams clip_grid(std::span<const float> w, const ClipRange& r, double alpha, double beta, int bits) {
  if (r.constant) return rtn_grid(w, bits, false);
  return grid_for_range(beta * r.lo, alpha * r.hi, bits);
}

void clip_forward(std::span<const float> w, const ClipRange& r, double alpha, double beta, int bits,
                  std::span<float> out) {
  const GridParams g = clip_grid(w, r, alpha, beta, bits);
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = dequantize(quantize_code(w[i], g), g);
}

void clip_backward(std::span<const float> w, const ClipRange& r, double alpha, double beta, int bits,
                   std::span<const float> dout, double& dalpha, double& dbeta) {
  if (r.constant) return;
  const GridParams g = clip_grid(w, r, alpha, beta, bits);
  const double s = g.scale;
  const double z = g.zero_point;
  const double qmax = max_code(bits);
  double ds = 0.0, dbeta_direct = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double u = static_cast<double>(w[i]) / s;
    const double q = std::round(u) + z;
    if (q < 0.0 || q > qmax) {
      const double c = q < 0.0 ? 0.0 : qmax;
      ds += dout[i] * ((c - z) - beta * r.lo / s);
      dbeta_direct += dout[i] * r.lo;
    } else {
      ds += dout[i] * ((q - z) - u);
    }
  }
  dalpha += ds * r.hi / qmax;
  dbeta += ds * (-r.lo / qmax) + dbeta_direct;
}

std::string_view to_string(QuantMethod m) noexcept {
  switch (m) {
    case QuantMethod::rtn: return "rtn";
    case QuantMethod::clip: return "clip";
    case QuantMethod::hybrid: return "hybrid";
  }
  return "?";
}

QuantMethod parse_quant_method(std::string_view name) {
  if (name == "rtn") return QuantMethod::rtn;
  if (name == "clip") return QuantMethod::clip;
  if (name == "hybrid") return QuantMethod::hybrid;
  throw InvalidArgument("unknown quantization method '" + std::string(name) + "'");
}

// --- LayerQuantizer ---------------------------------------------------------------

LayerQuantizer::LayerQuantizer(LayerId id, const Tensor& w, std::span<const std::size_t> high_rows,
                               const QuantSpec& spec, QuantMethod method)
    : id_(id), w_(w), spec_(spec), method_(method), high_rows_(high_rows.begin(), high_rows.end()) {
  if (spec.identity) return;
  const std::size_t rows = w.rows(), cols = w.cols();
  spec.validate_for(cols);
  if (spec.symmetric && method != QuantMethod::rtn && method != QuantMethod::hybrid) {
    throw InvalidArgument("learnable clipping needs the asymmetric grid");
  }
  if (spec.symmetric && method == QuantMethod::hybrid) {
    throw InvalidArgument("hybrid quantization clips normal rows and needs the asymmetric grid");
  }
  std::vector<bool> is_high(rows, false);
  for (auto r : high_rows_) {
    if (r >= rows) throw InvalidArgument("high channel " + std::to_string(r) + " out of range for " + id.name());
    is_high[r] = true;
  }
  const std::size_t gs = spec.group_size == 0 ? cols : spec.group_size;
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const float> row(w.row(r), cols);
    if (is_high[r] && method != QuantMethod::clip) {
      Entry e{r, 0, cols, spec.b_high, true, rtn_grid(row, spec.b_high, spec.symmetric), {}, v_.size()};
      const double qmax = max_code(spec.b_high);
      for (float x : row) {
        const double u = static_cast<double>(x) / static_cast<double>(e.grid.scale);
        // When floor(u) + zp lies outside [0, qmax - 1] both rounding choices
        // clamp to the same code, so the decision is pinned to nearest rounding
        // and excluded from optimization.
        const double base = std::floor(u) + e.grid.zero_point;
        if (base < 0.0 || base > qmax - 1.0) {
          const bool up = std::round(u) - std::floor(u) > 0.5;
          pinned_.push_back(v_.size());
          v_.push_back(static_cast<float>(up ? kHardLatent : -kHardLatent));
        } else {
          v_.push_back(static_cast<float>(rectified_sigmoid_inverse(u - std::floor(u))));
        }
      }
      entries_.push_back(e);
    } else if (is_high[r]) {
      entries_.push_back({r, 0, cols, spec.b_high, false, {}, clip_range(row), alpha_.size()});
      alpha_.push_back(1.0f);
      beta_.push_back(1.0f);
    } else {
      for (std::size_t c = 0; c < cols; c += gs) {
        entries_.push_back({r, c, gs, spec.b_normal, false, {}, clip_range(row.subspan(c, gs)), alpha_.size()});
        alpha_.push_back(1.0f);
        beta_.push_back(1.0f);
      }
    }
  }
  dv_.assign(v_.size(), 0.0);
  dalpha_.assign(alpha_.size(), 0.0);
  dbeta_.assign(beta_.size(), 0.0);
  v_state_ = AdamState({}, v_.size());
  alpha_state_ = AdamState({}, alpha_.size());
  beta_state_ = AdamState({}, beta_.size());
  if (method == QuantMethod::rtn) reset_to_rtn();
}

double LayerQuantizer::soft_h(std::size_t i) const { return rectified_sigmoid(v_[i]); }

Tensor LayerQuantizer::materialize() const {
  Tensor out = w_;
  std::vector<double> h;
  for (const auto& e : entries_) {
    std::span<const float> src(w_.row(e.row) + e.col, e.len);
    std::span<float> dst(out.row(e.row) + e.col, e.len);
    if (e.rounding) {
      h.resize(e.len);
      for (std::size_t i = 0; i < e.len; ++i) h[i] = soft_h(e.param + i);
      adaround_forward(src, e.grid, h, dst);
    } else {
      clip_forward(src, e.range, alpha_[e.param], beta_[e.param], e.bits, dst);
    }
  }
  return out;
}

void LayerQuantizer::backward(const Tensor& dw) {
  if (frozen_) return;
  if (dw.shape() != w_.shape()) throw ShapeError("quantizer gradient shape mismatch for " + id_.name());
  for (const auto& e : entries_) {
    std::span<const float> src(w_.row(e.row) + e.col, e.len);
    std::span<const float> g(dw.row(e.row) + e.col, e.len);
    if (e.rounding) {
      const double s = e.grid.scale;
      const double qmax = max_code(e.bits);
      for (std::size_t i = 0; i < e.len; ++i) {
        const std::size_t k = e.param + i;
        const double fl = std::floor(static_cast<double>(src[i]) / s);
        const double q = fl + soft_h(k) + e.grid.zero_point;
        if (q < 0.0 || q > qmax) continue;
        dv_[k] += static_cast<double>(g[i]) * s * rectified_sigmoid_grad(v_[k]);
      }
    } else {
      clip_backward(src, e.range, alpha_[e.param], beta_[e.param], e.bits, g, dalpha_[e.param],
                    dbeta_[e.param]);
    }
  }
}

double LayerQuantizer::add_reg(double gamma, double weight) {
  if (frozen_) return reg(gamma);
  const double loss = reg_loss(v_, gamma, dv_, weight);
  for (auto k : pinned_) dv_[k] = 0.0;
  return loss;
}

double LayerQuantizer::reg(double gamma) const { return reg_loss(v_, gamma); }

void LayerQuantizer::zero_grad() {
  std::fill(dv_.begin(), dv_.end(), 0.0);
  std::fill(dalpha_.begin(), dalpha_.end(), 0.0);
  std::fill(dbeta_.begin(), dbeta_.end(), 0.0);
}

void LayerQuantizer::project(std::size_t k) {
  for (const auto& e : entries_) {
    if (e.rounding || e.param != k || e.range.constant) continue;
    const double lo = e.range.lo, hi = e.range.hi;
    const double range = alpha_[k] * hi - beta_[k] * lo;
    if (range >= kMinRange) return;
    if (hi > 0.0) {
      alpha_[k] = static_cast<float>((kMinRange + beta_[k] * lo) / hi);
    } else if (lo < 0.0) {
      beta_[k] = static_cast<float>((alpha_[k] * hi - kMinRange) / lo);
    }
    return;
  }
}

void LayerQuantizer::step(const AdamOptions& options) {
  if (frozen_ || method_ == QuantMethod::rtn) return;
  auto run = [&](std::vector<float>& p, const std::vector<double>& g, AdamState& st) {
    if (p.empty()) return;
    std::vector<float> gf(g.begin(), g.end());
    st.options = options;
    adam_step<float>(p, gf, st);
  };
  if (!pinned_.empty()) {
    std::vector<float> keep(pinned_.size());
    for (std::size_t i = 0; i < pinned_.size(); ++i) keep[i] = v_[pinned_[i]];
    run(v_, dv_, v_state_);
    for (std::size_t i = 0; i < pinned_.size(); ++i) v_[pinned_[i]] = keep[i];
  } else {
    run(v_, dv_, v_state_);
  }
  run(alpha_, dalpha_, alpha_state_);
  run(beta_, dbeta_, beta_state_);
  for (std::size_t k = 0; k < alpha_.size(); ++k) {
    if (alpha_[k] * 0.0f != 0.0f || beta_[k] * 0.0f != 0.0f)
      throw DivergenceError("clipping factor of " + id_.name() + " became non-finite", alpha_state_.step);
  }
  // Projection is cheap relative to a block pass; it scans entries per factor
  // only when the range collapses.
  for (const auto& e : entries_) {
    if (e.rounding || e.range.constant) continue;
    if (alpha_[e.param] * e.range.hi - beta_[e.param] * e.range.lo < kMinRange) project(e.param);
  }
}

std::size_t LayerQuantizer::near_binary(double tol) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < v_.size(); ++i) {
    const double h = soft_h(i);
    if (h <= tol || h >= 1.0 - tol) ++n;
  }
  return n;
}

void LayerQuantizer::freeze() {
  for (auto& v : v_) v = static_cast<float>(rectified_sigmoid(v) >= 0.5 ? kHardLatent : -kHardLatent);
  frozen_ = true;
}

void LayerQuantizer::reset_to_rtn() {
  for (const auto& e : entries_) {
    if (!e.rounding) continue;
    for (std::size_t i = 0; i < e.len; ++i) {
      const double u = static_cast<double>(w_(e.row, e.col + i)) / static_cast<double>(e.grid.scale);
      const bool up = std::round(u) - std::floor(u) > 0.5;
      v_[e.param + i] = static_cast<float>(up ? kHardLatent : -kHardLatent);
    }
  }
  std::fill(alpha_.begin(), alpha_.end(), 1.0f);
  std::fill(beta_.begin(), beta_.end(), 1.0f);
  frozen_ = true;
}

LayerQuantRecord LayerQuantizer::record() const {
  LayerQuantRecord r;
  r.layer = id_;
  r.high_channels = high_rows_;
  std::sort(r.high_channels.begin(), r.high_channels.end());
  for (const auto& e : entries_) {
    std::span<const float> src(w_.row(e.row) + e.col, e.len);
    const GridParams g = e.rounding ? e.grid : clip_grid(src, e.range, alpha_[e.param], beta_[e.param], e.bits);
    r.scales.push_back(g.scale);
    r.zero_points.push_back(g.zero_point);
    r.alpha.push_back(e.rounding ? 1.0f : alpha_[e.param]);
    r.beta.push_back(e.rounding ? 1.0f : beta_[e.param]);
  }
  return r;
}

// --- schedules and block optimization --------------------------------------------------

double anneal_gamma(const QuantizerOptions& o, std::size_t it) {
  const auto warm = static_cast<std::size_t>(std::floor(o.warmup_fraction * static_cast<double>(o.iters)));
  if (it < warm || o.iters <= warm + 1) return o.gamma_start;
  const double t = static_cast<double>(it - warm) / static_cast<double>(o.iters - warm - 1);
  return o.gamma_start + (o.gamma_end - o.gamma_start) * std::min(t, 1.0);
}

double anneal_reg_weight(const QuantizerOptions& o, std::size_t it) {
  const auto warm = static_cast<std::size_t>(std::floor(o.warmup_fraction * static_cast<double>(o.iters)));
  return it < warm ? 0.0 : o.reg_weight;
}

void to_json(nlohmann::json& j, const BlockReport& r) {
  j = nlohmann::json{{"block", r.block},
                     {"rtn_loss", r.rtn_loss},
                     {"final_loss", r.final_loss},
                     {"near_binary_fraction", r.near_binary_fraction},
                     {"rounding_params", r.rounding_params},
                     {"reverted", r.reverted},
                     {"iterations", r.iterations}};
}

double block_recon_loss(const BlockParams<float>& params, const ModelConfig& cfg,
                        const std::vector<Tensor>& inputs, const std::vector<Tensor>& targets) {
  if (inputs.empty() || inputs.size() != targets.size())
    throw InvalidArgument("block_recon_loss: inputs and targets must be nonempty and paired");
  std::vector<double> losses(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t n) {
    losses[n] = block_loss_and_grad(block_forward(params, cfg, inputs[n]), targets[n], nullptr);
  });
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(inputs.size());
}

BlockReport optimize_block(std::size_t block, const BlockParams<float>& fp, const ModelConfig& cfg,
                           std::array<LayerQuantizer*, kLayersPerBlock> layers,
                           const std::vector<Tensor>& inputs, const std::vector<Tensor>& targets,
                           const QuantizerOptions& options) {
  if (inputs.empty() || inputs.size() != targets.size())
    throw InvalidArgument("optimize_block: inputs and targets must be nonempty and paired");
  auto current = [&]() {
    BlockParams<float> p = fp;
    for (std::size_t k = 0; k < kLayersPerBlock; ++k) p.weight(kLayerKinds[k]) = layers[k]->materialize();
    return p;
  };

  BlockReport report;
  report.block = block;
  for (auto* l : layers) report.rounding_params += l->n_rounding();
  {
    std::array<LayerQuantizer, kLayersPerBlock> rtn{*layers[0], *layers[1], *layers[2],
                                                    *layers[3], *layers[4], *layers[5]};
    BlockParams<float> p = fp;
    for (std::size_t k = 0; k < kLayersPerBlock; ++k) {
      rtn[k].reset_to_rtn();
      p.weight(kLayerKinds[k]) = rtn[k].materialize();
    }
    report.rtn_loss = block_recon_loss(p, cfg, inputs, targets);
  }

  const bool learn = options.method != QuantMethod::rtn && options.iters > 0;
  Rng rng(options.seed);
  AdamOptions adam{.lr = options.lr, .weight_decay = options.weight_decay};
  for (std::size_t it = 0; learn && it < options.iters; ++it) {
    const std::size_t n = rng.below(inputs.size());
    const double gamma = anneal_gamma(options, it);
    const double lambda = anneal_reg_weight(options, it);
    for (auto* l : layers) l->zero_grad();

    const BlockParams<float> p = current();
    BlockCache<float> cache;
    const Tensor y = block_forward(p, cfg, inputs[n], &cache);
    Tensor dy;
    const double loss = block_loss_and_grad(y, targets[n], &dy);
    if (!std::isfinite(loss))
      throw DivergenceError("block " + std::to_string(block) + " reconstruction loss is not finite", it);

    BlockParams<float> grads;
    block_backward<float>(p, cfg, cache, dy, &grads, nullptr);
    for (std::size_t k = 0; k < kLayersPerBlock; ++k) {
      layers[k]->backward(grads.weight(kLayerKinds[k]));
      if (lambda > 0.0) layers[k]->add_reg(gamma, lambda);
      layers[k]->step(adam);
    }
    report.iterations = it + 1;
  }

  std::size_t near = 0;
  for (auto* l : layers) near += l->near_binary(1e-3);
  report.near_binary_fraction =
      report.rounding_params == 0 ? 1.0 : static_cast<double>(near) / static_cast<double>(report.rounding_params);

  for (auto* l : layers) l->freeze();
  report.final_loss = block_recon_loss(current(), cfg, inputs, targets);
  if (!std::isfinite(report.final_loss))
    throw DivergenceError("block " + std::to_string(block) + " final loss is not finite", report.iterations);
  if (options.revert_on_regression && report.final_loss > report.rtn_loss) {
    for (auto* l : layers) l->reset_to_rtn();
    report.final_loss = block_recon_loss(current(), cfg, inputs, targets);
    report.reverted = true;
  }
  return report;
}

// --- whole model ---------------------------------------------------------------------------

QuantizedModel quantize_model(const Model& model, std::span<const ChannelPartition> partitions,
                              const QuantSpec& spec, const CalibrationSet& calib,
                              const QuantizerOptions& options, const BlockProgress& progress) {
  const auto& cfg = model.config();
  calib.validate(cfg);
  spec.validate();
  const std::size_t n_layers = model.params().n_layers();
  if (partitions.size() != n_layers) {
    throw InvalidArgument("allocation covers " + std::to_string(partitions.size()) +
                          " layers, model has " + std::to_string(n_layers));
  }
  for (std::size_t l = 0; l < n_layers; ++l)
    if (partitions[l].layer.index() != l)
      throw InvalidArgument("allocation layers are not in canonical order");

  const std::size_t n_seq = calib.size();
  const std::size_t n_blocks = cfg.n_blocks;
  // fp_act[b][n]: full-precision input of block b (b = n_blocks is the final output).
  std::vector<std::vector<Tensor>> fp_act(n_blocks + 1, std::vector<Tensor>(n_seq));
  parallel_for(n_seq, [&](std::size_t n) {
    Tensor x = model.embed(calib.sequences[n]);
    for (std::size_t b = 0; b < n_blocks; ++b) {
      fp_act[b][n] = x;
      x = block_forward(model.params().blocks[b], cfg, x);
    }
    fp_act[n_blocks][n] = std::move(x);
  });

  QuantizedModel qm;
  qm.model = model;
  qm.spec = spec;
  qm.method = options.method;
  std::vector<Tensor> xq = fp_act[0];
  Rng streams = Rng::substream(options.seed, "quantizer-init");

  for (std::size_t b = 0; b < n_blocks; ++b) {
    std::vector<LayerQuantizer> quantizers;
    quantizers.reserve(kLayersPerBlock);
    for (std::size_t k = 0; k < kLayersPerBlock; ++k) {
      const LayerId id{b, kLayerKinds[k]};
      quantizers.emplace_back(id, model.params().weight(id), partitions[id.index()].high_channels, spec,
                              options.method);
    }
    std::array<LayerQuantizer*, kLayersPerBlock> ptrs{};
    for (std::size_t k = 0; k < kLayersPerBlock; ++k) ptrs[k] = &quantizers[k];

    QuantizerOptions block_opts = options;
    block_opts.seed = streams.next();
    const auto& inputs = options.quantized_inputs ? xq : fp_act[b];
    BlockReport report = optimize_block(b, model.params().blocks[b], cfg, ptrs, inputs, fp_act[b + 1], block_opts);

    auto& qb = qm.model.params().blocks[b];
    for (std::size_t k = 0; k < kLayersPerBlock; ++k) {
      qb.weight(kLayerKinds[k]) = quantizers[k].materialize();
      qm.layers.push_back(quantizers[k].record());
    }
    if (options.quantized_inputs && b + 1 < n_blocks) {
      parallel_for(n_seq, [&](std::size_t n) { xq[n] = block_forward(qb, cfg, xq[n]); });
    }
    qm.blocks.push_back(report);
    if (progress) progress(report);
  }
  return qm;
}

std::size_t grid_violations(const QuantizedModel& qm) {
  if (qm.spec.identity) return 0;
  std::size_t bad = 0;
  for (const auto& rec : qm.layers) {
    const Tensor& w = qm.model.params().weight(rec.layer);
    const std::size_t rows = w.rows(), cols = w.cols();
    std::vector<bool> is_high(rows, false);
    for (auto r : rec.high_channels) is_high[r] = true;
    std::size_t e = 0;
    auto check = [&](std::size_t r, std::size_t c0, std::size_t len, int bits) {
      if (e >= rec.scales.size()) {
        bad += len;
        return;
      }
      const GridParams g{rec.scales[e], rec.zero_points[e], bits};
      ++e;
      for (std::size_t c = c0; c < c0 + len; ++c) {
        const float x = w(r, c);
        const double q = std::round(static_cast<double>(x) / g.scale) + g.zero_point;
        const bool in_range = q >= 0.0 && q <= max_code(bits);
        if (!in_range || dequantize(static_cast<std::int32_t>(q), g) != x) ++bad;
      }
    };
    const std::size_t gs = qm.spec.group_size == 0 ? cols : qm.spec.group_size;
    for (std::size_t r = 0; r < rows; ++r) {
      if (is_high[r]) {
        check(r, 0, cols, qm.spec.b_high);
      } else {
        for (std::size_t c = 0; c < cols; c += gs) check(r, c, gs, qm.spec.b_normal);
      }
    }
    if (e != rec.scales.size()) ++bad;
  }
  return bad;
}

CheckpointContents to_checkpoint(const QuantizedModel& qm) {
  CheckpointContents c;
  c.model = qm.model;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& rec : qm.layers) {
    const std::string base = "quant." + rec.layer.name();
    const Shape n{rec.scales.size()};
    c.sidecars.push_back({base + ".scales", n, rec.scales});
    c.sidecars.push_back({base + ".zero_points", n, rec.zero_points});
    c.sidecars.push_back({base + ".alpha", n, rec.alpha});
    c.sidecars.push_back({base + ".beta", n, rec.beta});
    layers.push_back({{"name", rec.layer.name()},
                      {"block", rec.layer.block},
                      {"kind", to_string(rec.layer.kind)},
                      {"b_high", qm.spec.b_high},
                      {"b_normal", qm.spec.b_normal},
                      {"group_size", qm.spec.group_size},
                      {"high_channels", rec.high_channels},
                      {"scales", base + ".scales"},
                      {"zero_points", base + ".zero_points"},
                      {"alpha", base + ".alpha"},
                      {"beta", base + ".beta"}});
  }
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : qm.blocks) blocks.push_back(b);
  c.quant = {{"method", to_string(qm.method)}, {"spec", qm.spec}, {"layers", std::move(layers)},
             {"blocks", std::move(blocks)}};
  return c;
}

QuantizedModel from_checkpoint(const CheckpointContents& contents) {
  if (contents.quant.is_null()) throw InvalidArgument("checkpoint carries no quantization metadata");
  QuantizedModel qm;
  qm.model = contents.model;
  try {
    const auto& q = contents.quant;
    qm.method = parse_quant_method(q.at("method").get<std::string>());
    qm.spec = q.at("spec").get<QuantSpec>();
    auto f32 = [&](const std::string& name) {
      const auto* s = contents.find(name);
      if (!s || !std::holds_alternative<std::vector<float>>(s->values))
        throw CheckpointError(CheckpointError::Kind::malformed_manifest, "missing f32 array " + name);
      return std::get<std::vector<float>>(s->values);
    };
    auto i32 = [&](const std::string& name) {
      const auto* s = contents.find(name);
      if (!s || !std::holds_alternative<std::vector<std::int32_t>>(s->values))
        throw CheckpointError(CheckpointError::Kind::malformed_manifest, "missing i32 array " + name);
      return std::get<std::vector<std::int32_t>>(s->values);
    };
    for (const auto& l : q.at("layers")) {
      LayerQuantRecord rec;
      rec.layer = {l.at("block").get<std::size_t>(), parse_layer_kind(l.at("kind").get<std::string>())};
      rec.high_channels = l.at("high_channels").get<std::vector<std::size_t>>();
      rec.scales = f32(l.at("scales").get<std::string>());
      rec.zero_points = i32(l.at("zero_points").get<std::string>());
      rec.alpha = f32(l.at("alpha").get<std::string>());
      rec.beta = f32(l.at("beta").get<std::string>());
      qm.layers.push_back(std::move(rec));
    }
    if (q.contains("blocks")) {
      for (const auto& b : q.at("blocks")) {
        BlockReport r;
        r.block = b.at("block").get<std::size_t>();
        r.rtn_loss = b.at("rtn_loss").get<double>();
        r.final_loss = b.at("final_loss").get<double>();
        r.near_binary_fraction = b.at("near_binary_fraction").get<double>();
        r.rounding_params = b.at("rounding_params").get<std::size_t>();
        r.reverted = b.at("reverted").get<bool>();
        r.iterations = b.at("iterations").get<std::size_t>();
        qm.blocks.push_back(r);
      }
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::malformed_manifest, std::string("quant section: ") + e.what());
  }
  return qm;
}

}  // namespace tqpt
