#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "vitgan/layers.hpp"
#include "vitgan/tensor.hpp"

namespace vitgan {

enum class AttentionKernel { dot_product, l2_tied };

inline const char* attention_kernel_name(AttentionKernel k) {
  return k == AttentionKernel::dot_product ? "dot_product" : "l2_tied";
}

// Multi-head self-attention. The q/k/v projections live in one fused map:
// D->3D for the dot-product kernel, D->2D for the L2 kernel where queries
// and keys share a single projection slot (tied by construction).
template <class T>
struct AttentionParams {
  int heads = 1;
  int head_dim = 1;
  AttentionKernel kernel = AttentionKernel::dot_product;
  LinearLayer<T> qkv;  // D -> 3D or D -> 2D
  LinearLayer<T> out;  // D -> D
};

template <class T>
AttentionParams<T> make_attention(int dim, int heads, AttentionKernel kernel,
                                  Rng rng, SpectralMode mode = SpectralMode::none) {
  if (heads <= 0 || dim % heads != 0)
    throw std::invalid_argument("attention: heads must divide the model dim (" +
                                std::to_string(dim) + " % " + std::to_string(heads) + ")");
  AttentionParams<T> p;
  p.heads = heads;
  p.head_dim = dim / heads;
  p.kernel = kernel;
  const int fused = kernel == AttentionKernel::dot_product ? 3 * dim : 2 * dim;
  p.qkv = make_linear<T>(dim, fused, rng.sub("qkv"), T(1), mode);
  p.out = make_linear<T>(dim, dim, rng.sub("out"), T(1), mode);
  return p;
}

namespace detail {

// [B,L,D] -> [B,H,L,dh]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int heads, int head_dim) {
  const int b = x.dim(0), l = x.dim(1);
  return permute(reshape(x, {b, l, heads, head_dim}), {0, 2, 1, 3});
}

// [B,H,L,dh] -> [B,L,D]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const int b = x.dim(0), h = x.dim(1), l = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, l, h * dh});
}

}  // namespace detail

// Softmaxed attention weights [B,H,L,L] and the per-head values [B,H,L,dh].
// Shared by both kernels and by the row-distribution checks in tests.
template <class T>
std::pair<Tensor<T>, Tensor<T>> attention_weights(const AttentionParams<T>& p,
                                                  const Tensor<T>& x) {
  if (x.ndim() != 3)
    throw std::invalid_argument("attention: expected [B,L,D], got " +
                                shape_str(x.shape()));
  const int d = p.heads * p.head_dim;
  const T inv_sqrt_dh = T(1) / static_cast<T>(std::sqrt(static_cast<double>(p.head_dim)));
  Tensor<T> proj = linear_forward(p.qkv, x);
  Tensor<T> scores;
  Tensor<T> v;
  if (p.kernel == AttentionKernel::dot_product) {
    Tensor<T> q = detail::split_heads(slice(proj, 2, 0, d), p.heads, p.head_dim);
    Tensor<T> k = detail::split_heads(slice(proj, 2, d, d), p.heads, p.head_dim);
    v = detail::split_heads(slice(proj, 2, 2 * d, d), p.heads, p.head_dim);
    scores = scale(matmul(q, transpose(k)), inv_sqrt_dh);
  } else {
    // Tied projection: queries and keys are the same tensor, so
    // scores_ij = -|qk_i - qk_j|^2 / sqrt(dh) = (2 q.k - |q|^2 - |k|^2) / sqrt(dh).
    Tensor<T> qk = detail::split_heads(slice(proj, 2, 0, d), p.heads, p.head_dim);
    v = detail::split_heads(slice(proj, 2, d, d), p.heads, p.head_dim);
    Tensor<T> sq = reduce_sum(mul(qk, qk), -1, true);        // [B,H,L,1]
    Tensor<T> cross = matmul(qk, transpose(qk));             // [B,H,L,L]
    Tensor<T> dist2 = sub(add(sq, transpose(sq)), scale(cross, T(2)));
    scores = scale(neg(dist2), inv_sqrt_dh);
  }
  return {softmax(scores, -1), v};
}

template <class T>
Tensor<T> attention_forward(const AttentionParams<T>& p, const Tensor<T>& x) {
  const bool rank2 = x.ndim() == 2;
  Tensor<T> xb = rank2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  auto [attn, v] = attention_weights(p, xb);
  Tensor<T> ctx = detail::merge_heads(matmul(attn, v));
  Tensor<T> y = linear_forward(p.out, ctx);
  return rank2 ? reshape(y, {y.dim(1), y.dim(2)}) : y;
}

template <class T>
Tensor<T> dot_product_attention(const AttentionParams<T>& p, const Tensor<T>& x) {
  if (p.kernel != AttentionKernel::dot_product)
    throw std::invalid_argument("dot_product_attention: params use the l2 kernel");
  return attention_forward(p, x);
}

template <class T>
Tensor<T> l2_attention(const AttentionParams<T>& p, const Tensor<T>& x) {
  if (p.kernel != AttentionKernel::l2_tied)
    throw std::invalid_argument("l2_attention: params use the dot-product kernel");
  return attention_forward(p, x);
}

// Power-iteration estimate of the largest singular value of the Jacobian of
// f at x0, alternating Jacobian-vector and vector-Jacobian products through
// one recorded tape.
template <class T, class F>
T empirical_lipschitz(F f, const Tensor<T>& x0, int iters, Rng& rng) {
  if (iters < 10)
    throw std::invalid_argument("empirical_lipschitz: need at least 10 iterations");
  Tape<T> tape;
  Tensor<T> x = x0.clone();
  tape.watch(x);
  Tensor<T> y = f(x);
  Rng vr = rng.sub("lipschitz_v");
  Tensor<T> v = Tensor<T>::normal(x.shape(), vr);
  {
    T n = l2_norm_value(v);
    if (n == 0) throw std::runtime_error("empirical_lipschitz: zero start vector");
    v = scale(v.detach(), T(1) / n);
  }
  T sigma = T(0);
  for (int it = 0; it < iters; ++it) {
    Tensor<T> jv = tape.jvp(x, v, y);
    if (!jv.all_finite())
      throw NumericError("empirical_lipschitz: non-finite Jacobian-vector product",
                         "iteration " + std::to_string(it), it);
    T n1 = l2_norm_value(jv);
    if (n1 == 0) return T(0);
    Tensor<T> u = scale(jv.detach(), T(1) / n1);
    Tensor<T> s = sum_all(mul(y, u));
    Tensor<T> jtu = tape.backward(s).grad(x);
    if (!jtu.all_finite())
      throw NumericError("empirical_lipschitz: non-finite vector-Jacobian product",
                         "iteration " + std::to_string(it), it);
    T n2 = l2_norm_value(jtu);
    if (n2 == 0) return T(0);
    v = scale(jtu.detach(), T(1) / n2);
    const T prev = sigma;
    sigma = n2;
    if (it > 0 && std::abs(static_cast<double>(sigma - prev)) <
                      1e-7 * std::max(1.0, std::abs(static_cast<double>(sigma))))
      break;
  }
  return sigma;
}

}  // namespace vitgan
