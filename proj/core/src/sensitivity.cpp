#include "tqpt/sensitivity.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "tqpt/parallel.hpp"

namespace tqpt {

namespace {

void check_ratios(std::span<const double> ratios) {
  if (ratios.empty()) throw InvalidArgument("ratio set is empty");
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] > 0.0 && ratios[i] <= 1.0))
      throw InvalidArgument("ratio " + std::to_string(ratios[i]) + " outside (0, 1]");
    if (i > 0 && !(ratios[i] > ratios[i - 1]))
      throw InvalidArgument("ratio set must be strictly increasing");
  }
}

double sq_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

}  // namespace

// --- matrix ------------------------------------------------------------------

std::vector<std::vector<std::size_t>> SensitivityMatrix::blocks() const {
  std::vector<std::size_t> ids(block_of.begin(), block_of.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::vector<std::vector<std::size_t>> out(ids.size());
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto pos = std::lower_bound(ids.begin(), ids.end(), block_of[l]) - ids.begin();
    out[static_cast<std::size_t>(pos)].push_back(l);
  }
  return out;
}

double SensitivityMatrix::block_form(std::span<const std::size_t> block_layers,
                                     std::span<const std::size_t> block_choice) const {
  double s = 0.0;
  for (std::size_t a = 0; a < block_layers.size(); ++a) {
    const std::size_t i = index(block_layers[a], block_choice[a]);
    for (std::size_t b = 0; b < block_layers.size(); ++b)
      s += (*this)(i, index(block_layers[b], block_choice[b]));
  }
  return s;
}

double SensitivityMatrix::quadratic_form(std::span<const std::size_t> choice) const {
  if (choice.size() != n_layers) throw InvalidArgument("choice vector length differs from layer count");
  double total = 0.0;
  std::vector<std::size_t> sub;
  for (const auto& layers : blocks()) {
    sub.clear();
    for (auto l : layers) sub.push_back(choice[l]);
    total += block_form(layers, sub);
  }
  return total;
}

double SensitivityMatrix::monotone_diagonal_fraction() const {
  if (n_layers == 0) return 1.0;
  std::size_t ok = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    bool mono = true;
    for (std::size_t m = 1; m < n_options(); ++m)
      if ((*this)(index(l, m), index(l, m)) > (*this)(index(l, m - 1), index(l, m - 1))) mono = false;
    ok += mono ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(n_layers);
}

void SensitivityMatrix::check_invariants() const {
  const std::size_t n = dim();
  if (values.size() != n * n) throw InvalidArgument("sensitivity matrix has wrong value count");
  if (block_of.size() != n_layers) throw InvalidArgument("sensitivity matrix block map is incomplete");
  double maxabs = 0.0;
  for (double v : values) maxabs = std::max(maxabs, std::abs(v));
  const double tol = 1e-9 * maxabs;
  for (std::size_t i = 0; i < n; ++i) {
    if ((*this)(i, i) < -tol) throw InvalidArgument("sensitivity diagonal entry is negative");
    for (std::size_t j = 0; j < n; ++j) {
      if ((*this)(i, j) != (*this)(j, i)) throw InvalidArgument("sensitivity matrix is not symmetric");
      if (block_of[i / n_options()] != block_of[j / n_options()] && (*this)(i, j) != 0.0)
        throw InvalidArgument("sensitivity matrix has a nonzero cross-block entry");
    }
  }
}

void to_json(nlohmann::json& j, const SensitivityMatrix& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    const auto id = LayerId::from_index(l);
    layers.push_back({{"block", m.block_of[l]}, {"kind", to_string(id.kind)}});
  }
  j = nlohmann::json{{"dim", m.dim()},
                     {"ratios", m.ratios},
                     {"b_high", m.spec.b_high},
                     {"b_normal", m.spec.b_normal},
                     {"spec", m.spec},
                     {"layer_index", std::move(layers)},
                     {"values", m.values},
                     {"layer_params", m.layer_params},
                     {"c_out", m.c_out},
                     {"c_in", m.c_in}};
}

void from_json(const nlohmann::json& j, SensitivityMatrix& m) {
  m.ratios = j.at("ratios").get<std::vector<double>>();
  if (j.contains("spec")) {
    m.spec = j.at("spec").get<QuantSpec>();
  } else {
    m.spec = QuantSpec{};
    m.spec.b_high = j.at("b_high").get<int>();
    m.spec.b_normal = j.at("b_normal").get<int>();
  }
  const auto& layers = j.at("layer_index");
  m.n_layers = layers.size();
  m.block_of.clear();
  for (const auto& l : layers) m.block_of.push_back(l.at("block").get<std::size_t>());
  m.values = j.at("values").get<std::vector<double>>();
  m.layer_params = j.at("layer_params").get<std::vector<std::size_t>>();
  m.c_out = j.value("c_out", std::vector<std::size_t>{});
  m.c_in = j.value("c_in", std::vector<std::size_t>{});
  if (j.at("dim").get<std::size_t>() != m.dim() || m.values.size() != m.dim() * m.dim())
    throw InvalidArgument("sensitivity file: dim does not match ratios × layers");
  if (m.layer_params.size() != m.n_layers)
    throw InvalidArgument("sensitivity file: layer_params length differs from layer count");
}

// --- assembly ----------------------------------------------------------------

void assemble_sensitivity(SensitivityMatrix& m, const JointLoss& loss, EvalCounts* counts) {
  if (m.block_of.size() != m.n_layers) throw InvalidArgument("block_of must list every layer");
  if (m.n_options() == 0) throw InvalidArgument("sensitivity needs at least one ratio option");
  const std::size_t n = m.dim();
  const std::size_t opts = m.n_options();
  m.values.assign(n * n, 0.0);
  EvalCounts local;

  const double base = loss({});
  local.baseline = 1;

  std::vector<double> single(n);
  parallel_for(n, [&](std::size_t i) {
    const PerturbationKey key{i / opts, i % opts};
    single[i] = loss(std::span<const PerturbationKey>(&key, 1));
  });
  local.diagonal = n;
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 2.0 * (single[i] - base);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t l1 = 0; l1 < m.n_layers; ++l1)
    for (std::size_t l2 = l1 + 1; l2 < m.n_layers; ++l2) {
      if (m.block_of[l1] != m.block_of[l2]) continue;
      for (std::size_t a = 0; a < opts; ++a)
        for (std::size_t b = 0; b < opts; ++b) pairs.emplace_back(m.index(l1, a), m.index(l2, b));
    }
  std::vector<double> joint(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t p) {
    const auto [i, j] = pairs[p];
    const std::array<PerturbationKey, 2> keys{PerturbationKey{i / opts, i % opts},
                                              PerturbationKey{j / opts, j % opts}};
    joint[p] = loss(keys);
  });
  local.joint = pairs.size();
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    const double v = joint[p] + base - single[i] - single[j];
    m(i, j) = v;
    m(j, i) = v;
  }
  if (counts) *counts = local;
}

Tensor build_delta(const Tensor& w, std::span<const std::size_t> high_rows, const QuantSpec& spec) {
  Tensor q = rtn_layer(w, high_rows, spec);
  for (std::size_t i = 0; i < q.size(); ++i) q[i] -= w[i];
  return q;
}

// --- reconstruction loss -------------------------------------------------------

double recon_loss(const Model& model, std::span<const WeightOverride> overrides,
                  const CalibrationSet& calib) {
  calib.validate(model.config());
  Model perturbed = model;
  for (const auto& o : overrides) {
    auto& w = perturbed.params().weight(o.layer);
    if (o.weight->shape() != w.shape())
      throw ShapeError("override for " + o.layer.name() + " has shape " + to_string(o.weight->shape()));
    w = *o.weight;
  }
  double total = 0.0;
  for (const auto& seq : calib.sequences) total += sq_diff(model.forward(seq), perturbed.forward(seq));
  return total / static_cast<double>(calib.size());
}

ReconstructionEvaluator::ReconstructionEvaluator(const Model& model, const CalibrationSet& calib)
    : model_(model) {
  calib.validate(model.config());
  seqs_.resize(calib.size());
  parallel_for(calib.size(), [&](std::size_t n) {
    ForwardCache<float> cache;
    auto& s = seqs_[n];
    s.logits = model.forward(calib.sequences[n], &cache);
    s.blocks.reserve(cache.blocks.size());
    for (auto& c : cache.blocks) {
      s.blocks.push_back({std::move(c.x_in), std::move(c.a), std::move(c.q), std::move(c.k),
                          std::move(c.v), std::move(c.att), std::move(c.x_mid), std::move(c.b),
                          std::move(c.g)});
    }
  });
}

double ReconstructionEvaluator::loss(std::span<const WeightOverride> overrides) const {
  if (overrides.empty()) return 0.0;
  const auto& cfg = model_.config();
  const auto& params = model_.params();
  const std::size_t n_blocks = params.blocks.size();

  std::vector<std::array<const Tensor*, kLayersPerBlock>> ovr(n_blocks);
  for (auto& a : ovr) a.fill(nullptr);
  std::size_t first = n_blocks;
  for (const auto& o : overrides) {
    if (o.layer.block >= n_blocks) throw InvalidArgument("override for unknown layer " + o.layer.name());
    if (o.weight->shape() != params.weight(o.layer).shape())
      throw ShapeError("override for " + o.layer.name() + " has shape " + to_string(o.weight->shape()));
    auto& slot = ovr[o.layer.block][static_cast<std::size_t>(o.layer.kind)];
    if (slot) throw InvalidArgument("two overrides for layer " + o.layer.name());
    slot = o.weight;
    first = std::min(first, o.layer.block);
  }

  // Effective parameters of every touched block after the first one.
  std::vector<BlockParams<float>> effective(n_blocks);
  std::vector<bool> touched(n_blocks, false);
  for (std::size_t b = first + 1; b < n_blocks; ++b) {
    for (std::size_t k = 0; k < kLayersPerBlock; ++k) {
      if (!ovr[b][k]) continue;
      if (!touched[b]) effective[b] = params.blocks[b];
      touched[b] = true;
      effective[b].weight(kLayerKinds[k]) = *ovr[b][k];
    }
  }

  const auto& fp = params.blocks[first];
  const auto& o = ovr[first];
  auto w = [&](LayerKind k) -> const Tensor& {
    const auto i = static_cast<std::size_t>(k);
    return o[i] ? *o[i] : fp.weight(k);
  };
  std::size_t start = kLayersPerBlock;
  for (std::size_t k = 0; k < kLayersPerBlock; ++k)
    if (o[k]) {
      start = k;
      break;
    }
  const auto start_kind = kLayerKinds[start];

  double total = 0.0;
  for (const auto& s : seqs_) {
    const BlockState& c = s.blocks[first];
    Tensor x_mid;
    Tensor g;
    if (start <= static_cast<std::size_t>(LayerKind::v_proj)) {
      const Tensor q = o[0] ? linear(c.a, *o[0]) : c.q;
      const Tensor k = o[1] ? linear(c.a, *o[1]) : c.k;
      const Tensor v = o[2] ? linear(c.a, *o[2]) : c.v;
      const Tensor att = causal_attention(q, k, v, cfg.n_heads);
      x_mid = linear(att, w(LayerKind::o_proj));
      add_inplace(x_mid, c.x_in);
    } else if (start_kind == LayerKind::o_proj) {
      x_mid = linear(c.att, w(LayerKind::o_proj));
      add_inplace(x_mid, c.x_in);
    } else {
      x_mid = c.x_mid;
    }
    if (start_kind == LayerKind::down_proj) {
      g = c.g;
    } else {
      const Tensor b = start_kind == LayerKind::up_proj
                           ? c.b
                           : layernorm(x_mid, fp.ln2_gain, fp.ln2_bias, cfg.layernorm_eps);
      g = gelu(linear(b, w(LayerKind::up_proj)));
    }
    Tensor x = linear(g, w(LayerKind::down_proj));
    add_inplace(x, x_mid);
    for (std::size_t b = first + 1; b < n_blocks; ++b)
      x = block_forward(touched[b] ? effective[b] : params.blocks[b], cfg, x);
    total += sq_diff(s.logits, model_.head_forward(x));
  }
  return total / static_cast<double>(seqs_.size());
}

// --- end-to-end ------------------------------------------------------------------

SensitivityMatrix build_sensitivity(const Model& model, const ChannelImportance& importance,
                                    const CalibrationSet& calib, std::span<const double> ratios,
                                    const QuantSpec& spec, EvalCounts* counts) {
  check_ratios(ratios);
  spec.validate();
  const auto& params = model.params();
  const auto layers = params.layers();
  if (importance.n_layers() != layers.size())
    throw InvalidArgument("importance covers " + std::to_string(importance.n_layers()) +
                          " layers, model has " + std::to_string(layers.size()));

  SensitivityMatrix m;
  m.ratios.assign(ratios.begin(), ratios.end());
  m.spec = spec;
  m.n_layers = layers.size();
  for (const auto& id : layers) {
    const auto& wt = params.weight(id);
    spec.validate_for(wt.cols());
    m.block_of.push_back(id.block);
    m.layer_params.push_back(wt.size());
    m.c_out.push_back(wt.rows());
    m.c_in.push_back(wt.cols());
  }

  // θ_FP + Δ_{l,m} for every key, i.e. the RTN-probed weights.
  std::vector<Tensor> probed(m.dim());
  parallel_for(m.dim(), [&](std::size_t i) {
    const auto id = layers[i / m.n_options()];
    const auto part = partition(importance, id, m.ratios[i % m.n_options()]);
    probed[i] = rtn_layer(params.weight(id), part.high_channels, spec);
  });

  const ReconstructionEvaluator eval(model, calib);
  assemble_sensitivity(
      m,
      [&](std::span<const PerturbationKey> keys) {
        std::vector<WeightOverride> ovr;
        ovr.reserve(keys.size());
        for (const auto& k : keys) ovr.push_back({layers[k.layer], &probed[m.index(k.layer, k.option)]});
        return eval.loss(ovr);
      },
      counts);
  return m;
}

}  // namespace tqpt
