#include "tqpt/model.hpp"

#include <cmath>

#include "tqpt/rng.hpp"

namespace tqpt {

namespace {

constexpr std::array<std::string_view, kLayersPerBlock> kKindNames = {
    "q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj"};

template <typename T>
void accumulate_embedding(BasicTensor<T>& table, std::size_t row, const T* src, std::size_t d) {
  T* dst = table.row(row);
  for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
}

}  // namespace

std::string_view to_string(LayerKind kind) noexcept {
  return kKindNames[static_cast<std::size_t>(kind)];
}

LayerKind parse_layer_kind(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == name) return kLayerKinds[i];
  }
  throw InvalidArgument("unknown layer kind '" + std::string(name) + "'");
}

std::string LayerId::name() const {
  return "blocks." + std::to_string(block) + "." + std::string(to_string(kind));
}

// --- config ------------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v < 1) throw InvalidArgument(std::string("model config: ") + field + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_blocks, "n_blocks");
  positive(d_ff, "d_ff");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) {
    throw InvalidArgument("model config: d_model " + std::to_string(d_model) +
                          " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_ff < d_model) throw InvalidArgument("model config: d_ff must be >= d_model");
  if (!(layernorm_eps > 0.0)) throw InvalidArgument("model config: layernorm_eps must be > 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"n_heads", c.n_heads},       {"n_blocks", c.n_blocks},
                     {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
                     {"layernorm_eps", c.layernorm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_blocks = j.value("n_blocks", d.n_blocks);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.layernorm_eps = j.value("layernorm_eps", d.layernorm_eps);
}

// --- parameters --------------------------------------------------------------

template <typename T>
BasicTensor<T>& BlockParams<T>::weight(LayerKind kind) {
  switch (kind) {
    case LayerKind::q_proj: return wq;
    case LayerKind::k_proj: return wk;
    case LayerKind::v_proj: return wv;
    case LayerKind::o_proj: return wo;
    case LayerKind::up_proj: return w_up;
    case LayerKind::down_proj: return w_down;
  }
  throw InvalidArgument("invalid layer kind");
}

template <typename T>
const BasicTensor<T>& BlockParams<T>::weight(LayerKind kind) const {
  return const_cast<BlockParams*>(this)->weight(kind);
}

template <typename T>
ParamRegistry<T>::ParamRegistry(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  tok_emb = BasicTensor<T>({cfg.vocab_size, d});
  pos_emb = BasicTensor<T>({cfg.max_seq_len, d});
  blocks.resize(cfg.n_blocks);
  for (auto& b : blocks) {
    b.ln1_gain = BasicTensor<T>({d});
    b.ln1_bias = BasicTensor<T>({d});
    b.wq = BasicTensor<T>({d, d});
    b.wk = BasicTensor<T>({d, d});
    b.wv = BasicTensor<T>({d, d});
    b.wo = BasicTensor<T>({d, d});
    b.ln2_gain = BasicTensor<T>({d});
    b.ln2_bias = BasicTensor<T>({d});
    b.w_up = BasicTensor<T>({cfg.d_ff, d});
    b.w_down = BasicTensor<T>({d, cfg.d_ff});
  }
  lnf_gain = BasicTensor<T>({d});
  lnf_bias = BasicTensor<T>({d});
  head = BasicTensor<T>({cfg.vocab_size, d});
}

template <typename T>
BasicTensor<T>& ParamRegistry<T>::weight(LayerId id) {
  if (id.block >= blocks.size()) {
    throw InvalidArgument("layer " + id.name() + " is outside a " + std::to_string(blocks.size()) +
                          "-block model");
  }
  return blocks[id.block].weight(id.kind);
}

template <typename T>
const BasicTensor<T>& ParamRegistry<T>::weight(LayerId id) const {
  return const_cast<ParamRegistry*>(this)->weight(id);
}

template <typename T>
std::vector<LayerId> ParamRegistry<T>::layers() const {
  std::vector<LayerId> out;
  out.reserve(n_layers());
  for (std::size_t l = 0; l < n_layers(); ++l) out.push_back(LayerId::from_index(l));
  return out;
}

template <typename T>
std::size_t ParamRegistry<T>::quantizable_params() const {
  std::size_t n = 0;
  for (const auto& id : layers()) n += n_params(id);
  return n;
}

template <typename T>
std::size_t ParamRegistry<T>::total_params() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> ParamRegistry<T>::named() {
  std::vector<std::pair<std::string, BasicTensor<T>*>> out;
  out.emplace_back("tok_emb", &tok_emb);
  out.emplace_back("pos_emb", &pos_emb);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto& b = blocks[i];
    out.emplace_back(p + "ln1_gain", &b.ln1_gain);
    out.emplace_back(p + "ln1_bias", &b.ln1_bias);
    for (LayerKind k : kLayerKinds) {
      if (k == LayerKind::up_proj) {
        out.emplace_back(p + "ln2_gain", &b.ln2_gain);
        out.emplace_back(p + "ln2_bias", &b.ln2_bias);
      }
      out.emplace_back(p + std::string(to_string(k)), &b.weight(k));
    }
  }
  out.emplace_back("lnf_gain", &lnf_gain);
  out.emplace_back("lnf_bias", &lnf_bias);
  out.emplace_back("head", &head);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const BasicTensor<T>*>> ParamRegistry<T>::named() const {
  auto mut = const_cast<ParamRegistry*>(this)->named();
  std::vector<std::pair<std::string, const BasicTensor<T>*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(std::move(n), t);
  return out;
}

template <typename T>
void ParamRegistry<T>::set_zero() {
  for (auto& [name, t] : named()) t->fill(T{0});
}

template <typename T>
template <typename U>
ParamRegistry<U> ParamRegistry<T>::cast() const {
  ParamRegistry<U> out;
  out.tok_emb = tok_emb.template cast<U>();
  out.pos_emb = pos_emb.template cast<U>();
  out.blocks.resize(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& s = blocks[i];
    auto& d = out.blocks[i];
    d.ln1_gain = s.ln1_gain.template cast<U>();
    d.ln1_bias = s.ln1_bias.template cast<U>();
    d.wq = s.wq.template cast<U>();
    d.wk = s.wk.template cast<U>();
    d.wv = s.wv.template cast<U>();
    d.wo = s.wo.template cast<U>();
    d.ln2_gain = s.ln2_gain.template cast<U>();
    d.ln2_bias = s.ln2_bias.template cast<U>();
    d.w_up = s.w_up.template cast<U>();
    d.w_down = s.w_down.template cast<U>();
  }
  out.lnf_gain = lnf_gain.template cast<U>();
  out.lnf_bias = lnf_bias.template cast<U>();
  out.head = head.template cast<U>();
  return out;
}

// --- block -------------------------------------------------------------------

template <typename T>
BasicTensor<T> block_forward(const BlockParams<T>& p, const ModelConfig& cfg,
                             const BasicTensor<T>& x, BlockCache<T>* cache) {
  BlockCache<T> local;
  BlockCache<T>& c = cache ? *cache : local;
  c.x_in = x;
  c.a = layernorm(x, p.ln1_gain, p.ln1_bias, cfg.layernorm_eps, &c.ln1);
  c.q = linear(c.a, p.wq);
  c.k = linear(c.a, p.wk);
  c.v = linear(c.a, p.wv);
  c.att = causal_attention(c.q, c.k, c.v, cfg.n_heads, &c.attn);
  c.x_mid = linear(c.att, p.wo);
  add_inplace(c.x_mid, x);
  c.b = layernorm(c.x_mid, p.ln2_gain, p.ln2_bias, cfg.layernorm_eps, &c.ln2);
  c.u = linear(c.b, p.w_up);
  c.g = gelu(c.u);
  BasicTensor<T> y = linear(c.g, p.w_down);
  add_inplace(y, c.x_mid);
  return y;
}

template <typename T>
void block_backward(const BlockParams<T>& p, const ModelConfig& cfg, const BlockCache<T>& c,
                    const BasicTensor<T>& dy, BlockParams<T>* grads, BasicTensor<T>* dx) {
  auto gp = [&](BasicTensor<T> BlockParams<T>::*field) -> BasicTensor<T>* {
    return grads ? &(grads->*field) : nullptr;
  };

  // MLP branch.
  BasicTensor<T> dg, du, db;
  linear_backward(c.g, p.w_down, dy, &dg, gp(&BlockParams<T>::w_down));
  gelu_backward(c.u, dg, &du);
  linear_backward(c.b, p.w_up, du, &db, gp(&BlockParams<T>::w_up));
  BasicTensor<T> dx_mid = dy;
  layernorm_backward(c.ln2, p.ln2_gain, db, &dx_mid, gp(&BlockParams<T>::ln2_gain),
                     gp(&BlockParams<T>::ln2_bias));

  // Attention branch.
  BasicTensor<T> datt, dq, dk, dv;
  linear_backward(c.att, p.wo, dx_mid, &datt, gp(&BlockParams<T>::wo));
  causal_attention_backward(c.q, c.k, c.v, cfg.n_heads, c.attn, datt, &dq, &dk, &dv);
  const bool need_da = dx != nullptr || grads != nullptr;
  BasicTensor<T> da;
  BasicTensor<T>* da_ptr = need_da ? &da : nullptr;
  linear_backward(c.a, p.wq, dq, da_ptr, gp(&BlockParams<T>::wq));
  linear_backward(c.a, p.wk, dk, da_ptr, gp(&BlockParams<T>::wk));
  linear_backward(c.a, p.wv, dv, da_ptr, gp(&BlockParams<T>::wv));
  if (!need_da) return;
  if (dx) {
    if (dx->empty()) *dx = BasicTensor<T>::zeros_like(dy);
    add_inplace(*dx, dx_mid);
  }
  layernorm_backward(c.ln1, p.ln1_gain, da, dx, gp(&BlockParams<T>::ln1_gain),
                     gp(&BlockParams<T>::ln1_bias));
}

// --- model -------------------------------------------------------------------

template <typename T>
BasicModel<T>::BasicModel(ModelConfig cfg) : cfg_(cfg), params_(cfg) {
  for (auto& b : params_.blocks) {
    b.ln1_gain.fill(T{1});
    b.ln2_gain.fill(T{1});
  }
  params_.lnf_gain.fill(T{1});
}

template <typename T>
BasicModel<T> BasicModel<T>::initialized(const ModelConfig& cfg, std::uint64_t seed) {
  BasicModel m(cfg);
  Rng rng(seed);
  const float std_main = 0.02f;
  const float std_resid = 0.02f / std::sqrt(2.0f * static_cast<float>(cfg.n_blocks));
  auto draw = [&](BasicTensor<T>& t, float stddev) {
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0f, stddev));
  };
  auto& p = m.params_;
  draw(p.tok_emb, std_main);
  draw(p.pos_emb, std_main);
  for (auto& b : p.blocks) {
    draw(b.wq, std_main);
    draw(b.wk, std_main);
    draw(b.wv, std_main);
    draw(b.wo, std_resid);
    draw(b.w_up, std_main);
    draw(b.w_down, std_resid);
  }
  draw(p.head, std_main);
  return m;
}

template <typename T>
void BasicModel<T>::check_tokens(std::span<const std::int32_t> tokens) const {
  if (tokens.empty()) throw InvalidArgument("forward: empty token sequence");
  if (tokens.size() > cfg_.max_seq_len) {
    throw InvalidArgument("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg_.vocab_size) {
      throw InvalidArgument("forward: token id " + std::to_string(tokens[i]) + " at position " +
                            std::to_string(i) + " is outside [0, " +
                            std::to_string(cfg_.vocab_size) + ")");
    }
  }
}

template <typename T>
BasicTensor<T> BasicModel<T>::embed(std::span<const std::int32_t> tokens) const {
  check_tokens(tokens);
  const std::size_t d = cfg_.d_model;
  BasicTensor<T> x({tokens.size(), d});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const T* te = params_.tok_emb.row(static_cast<std::size_t>(tokens[t]));
    const T* pe = params_.pos_emb.row(t);
    T* out = x.row(t);
    for (std::size_t c = 0; c < d; ++c) out[c] = te[c] + pe[c];
  }
  return x;
}

template <typename T>
BasicTensor<T> BasicModel<T>::head_forward(const BasicTensor<T>& x, ForwardCache<T>* cache) const {
  LayerNormCache<T> local;
  LayerNormCache<T>* ln = cache ? &cache->lnf : &local;
  BasicTensor<T> y = layernorm(x, params_.lnf_gain, params_.lnf_bias, cfg_.layernorm_eps, ln);
  BasicTensor<T> logits = linear(y, params_.head);
  if (cache) {
    cache->x_final = x;
    cache->y = std::move(y);
  }
  return logits;
}

template <typename T>
BasicTensor<T> BasicModel<T>::forward(std::span<const std::int32_t> tokens,
                                      ForwardCache<T>* cache) const {
  BasicTensor<T> x = embed(tokens);
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->blocks.resize(params_.blocks.size());
  }
  for (std::size_t i = 0; i < params_.blocks.size(); ++i) {
    x = block_forward(params_.blocks[i], cfg_, x, cache ? &cache->blocks[i] : nullptr);
  }
  return head_forward(x, cache);
}

template <typename T>
void BasicModel<T>::backward(const ForwardCache<T>& cache, const BasicTensor<T>& dlogits,
                             ParamRegistry<T>& grads) const {
  if (grads.blocks.size() != params_.blocks.size()) grads = ParamRegistry<T>(cfg_);

  BasicTensor<T> dy;
  linear_backward(cache.y, params_.head, dlogits, &dy, &grads.head);
  BasicTensor<T> dx;
  layernorm_backward(cache.lnf, params_.lnf_gain, dy, &dx, &grads.lnf_gain, &grads.lnf_bias);

  for (std::size_t i = params_.blocks.size(); i-- > 0;) {
    BasicTensor<T> dprev;
    block_backward(params_.blocks[i], cfg_, cache.blocks[i], dx, &grads.blocks[i], &dprev);
    dx = std::move(dprev);
  }

  const std::size_t d = cfg_.d_model;
  for (std::size_t t = 0; t < cache.tokens.size(); ++t) {
    accumulate_embedding(grads.tok_emb, static_cast<std::size_t>(cache.tokens[t]), dx.row(t), d);
    accumulate_embedding(grads.pos_emb, t, dx.row(t), d);
  }
}

template <typename T>
double BasicModel<T>::sequence_loss(std::span<const std::int32_t> tokens,
                                    ParamRegistry<T>* grads) const {
  if (tokens.size() < 2) throw InvalidArgument("sequence_loss: need at least two tokens");
  ForwardCache<T> cache;
  BasicTensor<T> logits = forward(tokens, grads ? &cache : nullptr);
  std::span<const std::int32_t> targets = tokens.subspan(1);
  if (!grads) return cross_entropy(logits, targets);
  BasicTensor<T> dlogits;
  const double loss = cross_entropy(logits, targets, &dlogits);
  backward(cache, dlogits, *grads);
  return loss;
}

template struct BlockParams<float>;
template struct BlockParams<double>;
template struct ParamRegistry<float>;
template struct ParamRegistry<double>;
template ParamRegistry<double> ParamRegistry<float>::cast<double>() const;
template ParamRegistry<float> ParamRegistry<double>::cast<float>() const;
template ParamRegistry<float> ParamRegistry<float>::cast<float>() const;
template ParamRegistry<double> ParamRegistry<double>::cast<double>() const;
template class BasicModel<float>;
template class BasicModel<double>;

template BasicTensor<float> block_forward<float>(const BlockParams<float>&, const ModelConfig&,
                                                 const BasicTensor<float>&, BlockCache<float>*);
template BasicTensor<double> block_forward<double>(const BlockParams<double>&, const ModelConfig&,
                                                   const BasicTensor<double>&, BlockCache<double>*);
template void block_backward<float>(const BlockParams<float>&, const ModelConfig&,
                                    const BlockCache<float>&, const BasicTensor<float>&,
                                    BlockParams<float>*, BasicTensor<float>*);
template void block_backward<double>(const BlockParams<double>&, const ModelConfig&,
                                     const BlockCache<double>&, const BasicTensor<double>&,
                                     BlockParams<double>*, BasicTensor<double>*);

}  // namespace tqpt
