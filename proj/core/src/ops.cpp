#include "tqpt/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include <Eigen/Core>

namespace tqpt {

namespace {

#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

template <typename T>
void sweep(const BasicTensor<T>& t, std::string_view op) {
  if (g_finite_checks.load(std::memory_order_relaxed)) check_finite(t, op);
}

template <typename T>
void require_rank2(const BasicTensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + " must be rank 2, got " + to_string(t.shape()));
  }
}

template <typename T>
void prepare_grad(BasicTensor<T>* g, const Shape& shape, const char* what) {
  if (g == nullptr) return;
  if (g->empty()) {
    *g = BasicTensor<T>(shape);
  } else if (g->shape() != shape) {
    throw ShapeError(std::string("gradient for ") + what + " has shape " + to_string(g->shape()) +
                     ", expected " + to_string(shape));
  }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[M×N] (+)= op(A)·op(B) on row-major buffers, where op transposes when the
// flag is set (A is stored [K×M], B is stored [N×K]). Eigen runs
// single-threaded here, so the blocking and therefore the rounding depend only
// on the shapes.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t kdim,
          std::size_t n, bool accumulate) {
  const auto rows = static_cast<Eigen::Index>(m);
  const auto inner = static_cast<Eigen::Index>(kdim);
  const auto cols = static_cast<Eigen::Index>(n);
  Eigen::Map<const RowMatrix<T>> lhs(a, trans_a ? inner : rows, trans_a ? rows : inner);
  Eigen::Map<const RowMatrix<T>> rhs(b, trans_b ? cols : inner, trans_b ? inner : cols);
  Eigen::Map<RowMatrix<T>> out(c, rows, cols);
  auto run = [&](const auto& l, const auto& r) {
    if (accumulate) {
      out.noalias() += l * r;
    } else {
      out.noalias() = l * r;
    }
  };
  if (trans_a && trans_b) {
    run(lhs.transpose(), rhs.transpose());
  } else if (trans_a) {
    run(lhs.transpose(), rhs);
  } else if (trans_b) {
    run(lhs, rhs.transpose());
  } else {
    run(lhs, rhs);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

void set_finite_checks(bool enabled) noexcept { g_finite_checks.store(enabled); }
bool finite_checks_enabled() noexcept { return g_finite_checks.load(); }

template <typename T>
void check_finite(const BasicTensor<T>& t, std::string_view op) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError("non-finite value at flat index " + std::to_string(i) + " after " +
                         std::string(op) + " (shape " + to_string(t.shape()) + ")");
    }
  }
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul lhs");
  require_rank2(b, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " · " +
                     to_string(b.shape()));
  }
  BasicTensor<T> c({a.rows(), b.cols()});
  gemm(a.data().data(), false, b.data().data(), false, c.data().data(), a.rows(), a.cols(), b.cols(), false);
  sweep(c, "matmul");
  return c;
}

template <typename T>
void matmul_backward(const BasicTensor<T>& a, const BasicTensor<T>& b, const BasicTensor<T>& dc,
                     BasicTensor<T>* da, BasicTensor<T>* db) {
  if (dc.shape() != Shape{a.rows(), b.cols()}) {
    throw ShapeError("matmul upstream gradient " + to_string(dc.shape()) + " does not match " +
                     to_string(a.shape()) + " · " + to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (da) {
    prepare_grad(da, a.shape(), "matmul lhs");
    gemm(dc.data().data(), false, b.data().data(), true, da->data().data(), m, n, k, true);
  }
  if (db) {
    prepare_grad(db, b.shape(), "matmul rhs");
    gemm(a.data().data(), true, dc.data().data(), false, db->data().data(), k, m, n, true);
  }
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  require_rank2(x, "linear input");
  require_rank2(w, "linear weight");
  if (x.cols() != w.cols()) {
    throw ShapeError("linear input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  }
  BasicTensor<T> y({x.rows(), w.rows()});
  gemm(x.data().data(), false, w.data().data(), true, y.data().data(), x.rows(), x.cols(), w.rows(), false);
  sweep(y, "linear");
  return y;
}

template <typename T>
void linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy,
                     BasicTensor<T>* dx, BasicTensor<T>* dw) {
  if (dy.shape() != Shape{x.rows(), w.rows()}) {
    throw ShapeError("linear upstream gradient " + to_string(dy.shape()) + " does not match " +
                     to_string(x.shape()) + " · " + to_string(w.shape()) + "ᵀ");
  }
  const std::size_t t = x.rows(), in = x.cols(), out = w.rows();
  if (dx) {
    prepare_grad(dx, x.shape(), "linear input");
    gemm(dy.data().data(), false, w.data().data(), false, dx->data().data(), t, out, in, true);
  }
  if (dw) {
    prepare_grad(dw, w.shape(), "linear weight");
    gemm(dy.data().data(), true, x.data().data(), false, dw->data().data(), out, t, in, true);
  }
}

template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                         const BasicTensor<T>& bias, double eps, LayerNormCache<T>* cache) {
  if (!(eps > 0.0)) throw InvalidArgument("layernorm eps must be positive, got " + std::to_string(eps));
  const std::size_t n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layernorm input " + to_string(x.shape()) + " incompatible with gain " +
                     to_string(gain.shape()) + " / bias " + to_string(bias.shape()));
  }
  const std::size_t rows = x.rows();
  BasicTensor<T> y(x.shape());
  BasicTensor<T> xhat(x.shape());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.row(r);
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    T* hr = xhat.row(r);
    T* yr = y.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (xr[c] - mean) * rs;
      hr[c] = static_cast<T>(h);
      yr[c] = static_cast<T>(h * gain[c] + bias[c]);
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  sweep(y, "layernorm");
  return y;
}

template <typename T>
void layernorm_backward(const LayerNormCache<T>& cache, const BasicTensor<T>& gain,
                        const BasicTensor<T>& dy, BasicTensor<T>* dx, BasicTensor<T>* dgain,
                        BasicTensor<T>* dbias) {
  const auto& xhat = cache.xhat;
  if (dy.shape() != xhat.shape()) {
    throw ShapeError("layernorm upstream gradient " + to_string(dy.shape()) +
                     " does not match input " + to_string(xhat.shape()));
  }
  const std::size_t rows = xhat.rows(), n = xhat.cols();
  prepare_grad(dx, xhat.shape(), "layernorm input");
  prepare_grad(dgain, gain.shape(), "layernorm gain");
  prepare_grad(dbias, gain.shape(), "layernorm bias");

  std::vector<double> g_acc(n, 0.0), b_acc(n, 0.0), dxhat(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* hr = xhat.row(r);
    const T* dr = dy.row(r);
    double mean_d = 0.0, mean_dh = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      g_acc[c] += static_cast<double>(dr[c]) * hr[c];
      b_acc[c] += dr[c];
      dxhat[c] = static_cast<double>(dr[c]) * gain[c];
      mean_d += dxhat[c];
      mean_dh += dxhat[c] * hr[c];
    }
    if (dx) {
      mean_d /= static_cast<double>(n);
      mean_dh /= static_cast<double>(n);
      T* out = dx->row(r);
      const double rs = cache.rstd[r];
      for (std::size_t c = 0; c < n; ++c)
        out[c] = static_cast<T>(out[c] + rs * (dxhat[c] - mean_d - hr[c] * mean_dh));
    }
  }
  if (dgain)
    for (std::size_t c = 0; c < n; ++c) (*dgain)[c] = static_cast<T>((*dgain)[c] + g_acc[c]);
  if (dbias)
    for (std::size_t c = 0; c < n; ++c) (*dbias)[c] = static_cast<T>((*dbias)[c] + b_acc[c]);
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  BasicTensor<T> y(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<const Array> v(x.data().data(), n);
  Eigen::Map<Array> out(y.data().data(), n);
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  out = T(0.5) * v * (T(1) + (c * (v + a * v * v * v)).tanh());
  sweep(y, "gelu");
  return y;
}

template <typename T>
void gelu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy, BasicTensor<T>* dx) {
  if (dy.shape() != x.shape()) {
    throw ShapeError("gelu upstream gradient " + to_string(dy.shape()) + " does not match " +
                     to_string(x.shape()));
  }
  prepare_grad(dx, x.shape(), "gelu input");
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<const Array> v(x.data().data(), n);
  Eigen::Map<const Array> g(dy.data().data(), n);
  Eigen::Map<Array> out(dx->data().data(), n);
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  const Array t = (c * (v + a * v * v * v)).tanh();
  out += g * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v));
}

template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  const std::size_t rows = x.rows(), n = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.row(r);
    double m = xr[0];
    for (std::size_t c = 1; c < n; ++c) m = std::max(m, static_cast<double>(xr[c]));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(xr[c] - m);
    T* yr = y.row(r);
    for (std::size_t c = 0; c < n; ++c) yr[c] = static_cast<T>(std::exp(xr[c] - m) / z);
  }
  return y;
}

namespace {

// Columns [off, off + w) of a row-major [rows × cols] matrix.
template <typename T>
AlignedVector<T> column_slice(const BasicTensor<T>& x, std::size_t off, std::size_t w) {
  AlignedVector<T> out(x.rows() * w);
  for (std::size_t r = 0; r < x.rows(); ++r) std::copy_n(x.row(r) + off, w, out.data() + r * w);
  return out;
}

template <typename T>
void add_column_slice(BasicTensor<T>& x, std::size_t off, std::size_t w, const AlignedVector<T>& src) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T* dst = x.row(r) + off;
    for (std::size_t i = 0; i < w; ++i) dst[i] += src[r * w + i];
  }
}

}  // namespace

template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                const BasicTensor<T>& v, std::size_t n_heads,
                                AttentionCache<T>* cache) {
  require_rank2(q, "attention q");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("attention q/k/v shapes differ: " + to_string(q.shape()) + ", " +
                     to_string(k.shape()) + ", " + to_string(v.shape()));
  }
  const std::size_t t_len = q.rows(), d = q.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw InvalidArgument("attention width " + std::to_string(d) + " is not divisible by " +
                          std::to_string(n_heads) + " heads");
  }
  if (t_len == 0) throw InvalidArgument("attention needs at least one position");
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  BasicTensor<T> out({t_len, d});
  BasicTensor<T> probs;
  if (cache) probs = BasicTensor<T>({n_heads, t_len, t_len});
  AlignedVector<T> scores(t_len * t_len), p_head(t_len * t_len), o_head(t_len * dh);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    const auto qh = column_slice(q, off, dh);
    const auto kh = column_slice(k, off, dh);
    const auto vh = column_slice(v, off, dh);
    gemm(qh.data(), false, kh.data(), true, scores.data(), t_len, dh, t_len, false);
    T* ph = cache ? probs.data().data() + h * t_len * t_len : p_head.data();
    for (std::size_t t = 0; t < t_len; ++t) {
      const T* st = scores.data() + t * t_len;
      T* pt = ph + t * t_len;
      const T ts = static_cast<T>(scale);
      T mx = st[0];
      for (std::size_t j = 1; j <= t; ++j) mx = std::max(mx, st[j]);
      double z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        pt[j] = static_cast<T>(std::exp(st[j] * ts - mx * ts));
        z += static_cast<double>(pt[j]);
      }
      for (std::size_t j = 0; j <= t; ++j) pt[j] = static_cast<T>(pt[j] / z);
      std::fill(pt + t + 1, pt + t_len, T{0});
    }
    gemm(ph, false, vh.data(), false, o_head.data(), t_len, t_len, dh, false);
    for (std::size_t t = 0; t < t_len; ++t) std::copy_n(o_head.data() + t * dh, dh, out.row(t) + off);
  }
  if (cache) cache->probs = std::move(probs);
  sweep(out, "causal_attention");
  return out;
}

template <typename T>
void causal_attention_backward(const BasicTensor<T>& q, const BasicTensor<T>& k,
                               const BasicTensor<T>& v, std::size_t n_heads,
                               const AttentionCache<T>& cache, const BasicTensor<T>& dout,
                               BasicTensor<T>* dq, BasicTensor<T>* dk, BasicTensor<T>* dv) {
  const std::size_t t_len = q.rows(), d = q.cols();
  if (dout.shape() != q.shape()) {
    throw ShapeError("attention upstream gradient " + to_string(dout.shape()) +
                     " does not match " + to_string(q.shape()));
  }
  if (cache.probs.shape() != Shape{n_heads, t_len, t_len}) {
    throw ShapeError("attention cache " + to_string(cache.probs.shape()) + " does not match " +
                     std::to_string(n_heads) + " heads over " + std::to_string(t_len) + " positions");
  }
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  prepare_grad(dq, q.shape(), "attention q");
  prepare_grad(dk, k.shape(), "attention k");
  prepare_grad(dv, v.shape(), "attention v");

  AlignedVector<T> dp(t_len * t_len), ds(t_len * t_len), g(t_len * dh);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    const T* ph = cache.probs.data().data() + h * t_len * t_len;
    const auto doh = column_slice(dout, off, dh);
    const auto vh = column_slice(v, off, dh);
    gemm(doh.data(), false, vh.data(), true, dp.data(), t_len, dh, t_len, false);
    if (dv) {
      gemm(ph, true, doh.data(), false, g.data(), t_len, t_len, dh, false);
      add_column_slice(*dv, off, dh, g);
    }
    for (std::size_t t = 0; t < t_len; ++t) {
      const T* pr = ph + t * t_len;
      const T* dpr = dp.data() + t * t_len;
      double dot = 0.0;
      for (std::size_t j = 0; j <= t; ++j) dot += static_cast<double>(pr[j]) * dpr[j];
      T* dsr = ds.data() + t * t_len;
      for (std::size_t j = 0; j <= t; ++j)
        dsr[j] = static_cast<T>(static_cast<double>(pr[j]) * (dpr[j] - dot) * scale);
      for (std::size_t j = t + 1; j < t_len; ++j) dsr[j] = T{0};
    }
    if (dq) {
      const auto kh = column_slice(k, off, dh);
      gemm(ds.data(), false, kh.data(), false, g.data(), t_len, t_len, dh, false);
      add_column_slice(*dq, off, dh, g);
    }
    if (dk) {
      const auto qh = column_slice(q, off, dh);
      gemm(ds.data(), true, qh.data(), false, g.data(), t_len, t_len, dh, false);
      add_column_slice(*dk, off, dh, g);
    }
  }
}

template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                     BasicTensor<T>* dlogits) {
  require_rank2(logits, "cross_entropy logits");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() > rows) {
    throw ShapeError("cross_entropy got " + std::to_string(targets.size()) + " targets for logits " +
                     to_string(logits.shape()));
  }
  if (targets.empty()) throw InvalidArgument("cross_entropy needs at least one target");
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw InvalidArgument("target id " + std::to_string(targets[r]) + " at position " +
                            std::to_string(r) + " outside [0, " + std::to_string(vocab) + ")");
    }
  }
  if (dlogits) *dlogits = BasicTensor<T>(logits.shape());
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  double total = 0.0;
  std::vector<double> e(vocab);
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const T* lr = logits.row(r);
    double m = lr[0];
    for (std::size_t c = 1; c < vocab; ++c) m = std::max(m, static_cast<double>(lr[c]));
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      e[c] = std::exp(lr[c] - m);
      z += e[c];
    }
    const auto tgt = static_cast<std::size_t>(targets[r]);
    total += (m + std::log(z)) - lr[tgt];
    if (dlogits) {
      T* dr = dlogits->row(r);
      for (std::size_t c = 0; c < vocab; ++c) {
        const double p = e[c] / z - (c == tgt ? 1.0 : 0.0);
        dr[c] = static_cast<T>(p * inv_n);
      }
    }
  }
  const double loss = total * inv_n;
  if (finite_checks_enabled() && !std::isfinite(loss)) {
    throw NumericError("non-finite cross-entropy");
  }
  return loss;
}

#define TQPT_INSTANTIATE_OPS(T)                                                                   \
  template void check_finite<T>(const BasicTensor<T>&, std::string_view);                         \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template void matmul_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                   const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*);      \
  template BasicTensor<T> linear<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template void linear_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                   const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*);      \
  template BasicTensor<T> layernorm<T>(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                       const BasicTensor<T>&, double, LayerNormCache<T>*);        \
  template void layernorm_backward<T>(const LayerNormCache<T>&, const BasicTensor<T>&,            \
                                      const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*,    \
                                      BasicTensor<T>*);                                           \
  template BasicTensor<T> gelu<T>(const BasicTensor<T>&);                                         \
  template void gelu_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&, BasicTensor<T>*);  \
  template void add_inplace<T>(BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> softmax_rows<T>(const BasicTensor<T>&);                                 \
  template BasicTensor<T> causal_attention<T>(const BasicTensor<T>&, const BasicTensor<T>&,       \
                                              const BasicTensor<T>&, std::size_t,                 \
                                              AttentionCache<T>*);                                \
  template void causal_attention_backward<T>(                                                     \
      const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, std::size_t,           \
      const AttentionCache<T>&, const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*,          \
      BasicTensor<T>*);                                                                           \
  template double cross_entropy<T>(const BasicTensor<T>&, std::span<const std::int32_t>,          \
                                   BasicTensor<T>*);

TQPT_INSTANTIATE_OPS(float)
TQPT_INSTANTIATE_OPS(double)

#undef TQPT_INSTANTIATE_OPS

}  // namespace tqpt
