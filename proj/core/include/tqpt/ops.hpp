#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "tqpt/tensor.hpp"

// Dense primitives with hand-written reverse-mode gradients.
//
// Matrix products go through single-threaded Eigen kernels, which accumulate
// in the storage type with a fixed blocking per shape. Row reductions
// (layernorm statistics, softmax sums, losses) run left to right in a 64-bit
// accumulator. Repeated calls are therefore bitwise identical. Backward
// functions *accumulate* into the gradient outputs they are given; an empty
// output tensor is first resized to zeros.

namespace tqpt {

/// Enables the post-op NaN/Inf sweep. On by default in debug builds.
void set_finite_checks(bool enabled) noexcept;
bool finite_checks_enabled() noexcept;

template <typename T>
void check_finite(const BasicTensor<T>& t, std::string_view op);

// --- matrix products -------------------------------------------------------

/// C[M×N] = A[M×K] · B[K×N].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// dA += dC·Bᵀ, dB += Aᵀ·dC. Either output may be null.
template <typename T>
void matmul_backward(const BasicTensor<T>& a, const BasicTensor<T>& b, const BasicTensor<T>& dc,
                     BasicTensor<T>* da, BasicTensor<T>* db);

/// y[T×out] = x[T×in] · Wᵀ with W stored [out×in] (one row per output channel).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w);

/// dx += dy·W, dW += dyᵀ·x.
template <typename T>
void linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy,
                     BasicTensor<T>* dx, BasicTensor<T>* dw);

// --- normalization / activations ------------------------------------------

template <typename T>
struct LayerNormCache {
  BasicTensor<T> xhat;
  std::vector<double> rstd;
};

template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                         const BasicTensor<T>& bias, double eps, LayerNormCache<T>* cache = nullptr);

template <typename T>
void layernorm_backward(const LayerNormCache<T>& cache, const BasicTensor<T>& gain,
                        const BasicTensor<T>& dy, BasicTensor<T>* dx, BasicTensor<T>* dgain,
                        BasicTensor<T>* dbias);

/// tanh-approximated GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

template <typename T>
void gelu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy, BasicTensor<T>* dx);

template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b);

/// Row-wise softmax over the last axis with max subtraction.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);

// --- attention --------------------------------------------------------------

template <typename T>
struct AttentionCache {
  /// Post-softmax weights, [heads × T × T]; entries above the diagonal are 0.
  BasicTensor<T> probs;
};

/// Multi-head causal self-attention over already-projected q, k, v [T×d].
template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                const BasicTensor<T>& v, std::size_t n_heads,
                                AttentionCache<T>* cache = nullptr);

template <typename T>
void causal_attention_backward(const BasicTensor<T>& q, const BasicTensor<T>& k,
                               const BasicTensor<T>& v, std::size_t n_heads,
                               const AttentionCache<T>& cache, const BasicTensor<T>& dout,
                               BasicTensor<T>* dq, BasicTensor<T>* dk, BasicTensor<T>* dv);

// --- loss --------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[target]. `targets` may cover only a
/// prefix of the rows; the remaining rows contribute neither loss nor gradient.
/// When `dlogits` is given it is overwritten with the gradient.
template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                     BasicTensor<T>* dlogits = nullptr);

}  // namespace tqpt
