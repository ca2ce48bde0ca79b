#pragma once

#include <cmath>
#include <stdexcept>

#include "vitgan/rng.hpp"
#include "vitgan/spectral.hpp"
#include "vitgan/tensor.hpp"

namespace vitgan {

// Linear projection with equalized learning rate: the stored weight stays at
// unit scale and gain/sqrt(fan_in) is applied at call time. The spectral
// wrapper (discriminator only) normalizes the stored weight before the gain.
template <class T>
struct LinearLayer {
  SpectralWeight<T> w;  // weight [fan_in, fan_out]
  Tensor<T> bias;       // [fan_out]
  T lr_gain = T(1);
};

template <class T>
LinearLayer<T> make_linear(int fan_in, int fan_out, Rng rng, T gain = T(1),
                           SpectralMode mode = SpectralMode::none,
                           int sigma_iters = 200) {
  if (fan_in <= 0 || fan_out <= 0)
    throw std::invalid_argument("linear: non-positive dimensions");
  LinearLayer<T> l;
  Rng wr = rng.sub("weight");
  l.w = make_spectral(Tensor<T>::normal({fan_in, fan_out}, wr), mode, rng.sub("sn"),
                      sigma_iters);
  l.bias = Tensor<T>::zeros({fan_out});
  l.lr_gain = gain / static_cast<T>(std::sqrt(static_cast<double>(fan_in)));
  return l;
}

template <class T>
Tensor<T> linear_forward(const LinearLayer<T>& l, const Tensor<T>& x) {
  const int fan_in = l.w.weight.dim(0);
  if (x.dim(x.ndim() - 1) != fan_in)
    throw std::invalid_argument("linear_forward: input has trailing dim " +
                                std::to_string(x.dim(x.ndim() - 1)) + ", layer expects " +
                                std::to_string(fan_in));
  Tensor<T> weff = scale(effective_weight(l.w), l.lr_gain);
  return add(matmul(x, weff), l.bias);
}

// ---- layer normalization ---------------------------------------------------

template <class T>
struct LayerNormParams {
  Tensor<T> gamma;  // [D], init 1
  Tensor<T> beta;   // [D], init 0
  T eps = static_cast<T>(1e-5);
};

template <class T>
LayerNormParams<T> make_layernorm(int dim) {
  LayerNormParams<T> p;
  p.gamma = Tensor<T>::ones({dim});
  p.beta = Tensor<T>::zeros({dim});
  return p;
}

// Standardizes each vector along the last axis (population variance).
template <class T>
Tensor<T> normalize_lastdim(const Tensor<T>& x, T eps) {
  Tensor<T> mu = reduce_mean(x, -1, true);
  Tensor<T> c = sub(x, mu);
  Tensor<T> var = reduce_mean(mul(c, c), -1, true);
  return div(c, sqrt(add_scalar(var, eps)));
}

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return add(mul(normalize_lastdim(x, p.eps), p.gamma), p.beta);
}

// ---- MLP block --------------------------------------------------------------

template <class T>
struct MlpBlock {
  LinearLayer<T> fc1;  // D -> hidden, GELU after
  LinearLayer<T> fc2;  // hidden -> D
};

template <class T>
MlpBlock<T> make_mlp(int dim, int hidden, Rng rng,
                     SpectralMode mode = SpectralMode::none) {
  MlpBlock<T> m;
  m.fc1 = make_linear<T>(dim, hidden, rng.sub("fc1"), static_cast<T>(std::sqrt(2.0)), mode);
  m.fc2 = make_linear<T>(hidden, dim, rng.sub("fc2"), T(1), mode);
  return m;
}

template <class T>
Tensor<T> mlp_forward(const MlpBlock<T>& m, const Tensor<T>& x) {
  return linear_forward(m.fc2, gelu(linear_forward(m.fc1, x)));
}

// ---- positional encoding ----------------------------------------------------

// Learned linear projection of normalized coordinates followed by sine.
template <class T>
struct PositionalEncoder {
  Tensor<T> proj;  // [coord_dim, D]
  Tensor<T> bias;  // [D]
};

template <class T>
PositionalEncoder<T> make_positional_encoder(int coord_dim, int dim, Rng rng) {
  PositionalEncoder<T> e;
  Rng pr = rng.sub("proj");
  e.proj = Tensor<T>::normal({coord_dim, dim}, pr);
  e.bias = Tensor<T>::zeros({dim});
  return e;
}

template <class T>
Tensor<T> positional_embed(const PositionalEncoder<T>& enc,
                           const Tensor<T>& coords) {
  for (int64_t i = 0; i < coords.size(); ++i) {
    const double v = static_cast<double>(coords[i]);
    if (v < -1.0 - 1e-6 || v > 1.0 + 1e-6)
      throw std::invalid_argument(
          "positional_embed: coordinate " + std::to_string(v) +
          " outside [-1,1]; caller must normalize");
  }
  return sin(add(matmul(coords, enc.proj), enc.bias));
}

}  // namespace vitgan
