#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "vitgan/rng.hpp"
#include "vitgan/tensor.hpp"

namespace vitgan {

enum class SpectralMode { none, sn, isn };

inline const char* spectral_mode_name(SpectralMode m) {
  switch (m) {
    case SpectralMode::none: return "none";
    case SpectralMode::sn: return "sn";
    case SpectralMode::isn: return "isn";
  }
  return "?";
}

// A weight matrix bundled with spectral-norm state. sigma_init is measured
// once at construction and frozen; u and v persist across steps so one
// power iteration per step tracks a slowly moving spectrum.
template <class T>
struct SpectralWeight {
  Tensor<T> weight;  // [m, n]
  Tensor<T> u;       // [m], unit norm
  Tensor<T> v;       // [n], unit norm
  T sigma_init = T(1);
  SpectralMode mode = SpectralMode::none;
  int iters_per_step = 1;
};

// Runs `iters` rounds of v = W'u/|W'u|, u = Wv/|Wv| in place and returns
// sigma_hat = u'Wv. A zero weight matrix returns 0 and leaves u, v alone.
template <class T>
T power_iter_sigma(SpectralWeight<T>& sw, int iters) {
  const int m = sw.weight.dim(0), n = sw.weight.dim(1);
  const T* w = sw.weight.data();
  std::vector<T> u(sw.u.data(), sw.u.data() + m);
  std::vector<T> v(static_cast<size_t>(n), T(0));
  for (int it = 0; it < iters; ++it) {
    // v = W'u, normalized
    for (int j = 0; j < n; ++j) v[static_cast<size_t>(j)] = T(0);
    for (int i = 0; i < m; ++i) {
      const T ui = u[static_cast<size_t>(i)];
      const T* row = w + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) v[static_cast<size_t>(j)] += ui * row[j];
    }
    double nv = 0;
    for (int j = 0; j < n; ++j) nv += static_cast<double>(v[static_cast<size_t>(j)]) * v[static_cast<size_t>(j)];
    nv = std::sqrt(nv);
    if (nv == 0) return T(0);
    for (int j = 0; j < n; ++j) v[static_cast<size_t>(j)] = static_cast<T>(v[static_cast<size_t>(j)] / nv);
    // u = Wv, normalized
    for (int i = 0; i < m; ++i) {
      const T* row = w + static_cast<int64_t>(i) * n;
      double acc = 0;
      for (int j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * v[static_cast<size_t>(j)];
      u[static_cast<size_t>(i)] = static_cast<T>(acc);
    }
    double nu = 0;
    for (int i = 0; i < m; ++i) nu += static_cast<double>(u[static_cast<size_t>(i)]) * u[static_cast<size_t>(i)];
    nu = std::sqrt(nu);
    if (nu == 0) return T(0);
    for (int i = 0; i < m; ++i) u[static_cast<size_t>(i)] = static_cast<T>(u[static_cast<size_t>(i)] / nu);
  }
  // sigma = u'Wv
  double sigma = 0;
  for (int i = 0; i < m; ++i) {
    const T* row = w + static_cast<int64_t>(i) * n;
    double acc = 0;
    for (int j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * v[static_cast<size_t>(j)];
    sigma += static_cast<double>(u[static_cast<size_t>(i)]) * acc;
  }
  std::copy(u.begin(), u.end(), sw.u.data());
  std::copy(v.begin(), v.end(), sw.v.data());
  return static_cast<T>(sigma);
}

template <class T>
SpectralWeight<T> make_spectral(Tensor<T> weight, SpectralMode mode, Rng rng,
                                int init_iters = 200) {
  if (weight.ndim() != 2)
    throw std::invalid_argument("spectral: weight must be a matrix, got " +
                                shape_str(weight.shape()));
  SpectralWeight<T> sw;
  sw.weight = std::move(weight);
  sw.mode = mode;
  const int m = sw.weight.dim(0), n = sw.weight.dim(1);
  Rng r = rng.sub("power_iter");
  sw.u = Tensor<T>::normal({m}, r);
  double nu = 0;
  for (int i = 0; i < m; ++i) nu += static_cast<double>(sw.u[i]) * sw.u[i];
  nu = std::sqrt(nu);
  if (nu > 0)
    for (int i = 0; i < m; ++i) sw.u.data()[i] = static_cast<T>(sw.u[i] / nu);
  sw.v = Tensor<T>::zeros({n});
  if (mode != SpectralMode::none) {
    T s = power_iter_sigma(sw, init_iters);
    sw.sigma_init = s > T(0) ? s : T(1);
  }
  return sw;
}

// Normalized weight as a tracked expression. sigma_hat = u'Wv is recomputed
// from the persistent u, v (held fixed), so gradients flow through both the
// raw weight and the normalizer. At initialization the isn ratio
// sigma_init/sigma_hat divides a value by itself, making W_init the exact
// fixed point.
template <class T>
Tensor<T> effective_weight(const SpectralWeight<T>& sw) {
  if (sw.mode == SpectralMode::none) return sw.weight;
  const int m = sw.weight.dim(0), n = sw.weight.dim(1);
  Tensor<T> urow = sw.u.viewed_as({1, m});
  Tensor<T> vcol = sw.v.viewed_as({n, 1});
  Tensor<T> sigma = matmul(matmul(urow, sw.weight), vcol);  // [1,1]
  const double sval = static_cast<double>(sigma[0]);
  if (!std::isfinite(sval) || std::abs(sval) < 1e-12)
    throw std::runtime_error("effective_weight: degenerate spectral norm " +
                             std::to_string(sval));
  if (sw.mode == SpectralMode::sn) return div(sw.weight, sigma);
  Tensor<T> ratio = div(Tensor<T>::full({1, 1}, sw.sigma_init), sigma);
  return mul(sw.weight, ratio);
}

namespace detail {

// Cyclic Jacobi eigensolver for a symmetric matrix held in double precision.
// Returns eigenvalues, unsorted. Used as the test oracle and by the
// Frechet-style metric; not a performance path.
inline std::vector<double> jacobi_eigvals(std::vector<double> a, int n,
                                          double tol = 1e-12, int max_sweeps = 100) {
  auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0, diag = 0;
    for (int i = 0; i < n; ++i) {
      diag = std::max(diag, std::abs(at(i, i)));
      for (int j = i + 1; j < n; ++j) off = std::max(off, std::abs(at(i, j)));
    }
    if (off <= tol * std::max(1.0, diag)) break;
    for (int p = 0; p < n - 1; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (std::abs(apq) <= tol * std::max(1.0, diag)) continue;
        const double theta = (at(q, q) - at(p, p)) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1.0 / std::sqrt(t * t + 1);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> vals(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) vals[static_cast<size_t>(i)] = at(i, i);
  return vals;
}

}  // namespace detail

// Largest singular value by Jacobi rotations on the Gram matrix. Exact
// reference for small matrices; independent of the power-iteration path.
template <class T>
double svd_oracle(const Tensor<T>& w) {
  if (w.ndim() != 2)
    throw std::invalid_argument("svd_oracle: expected a matrix, got " +
                                shape_str(w.shape()));
  const int m = w.dim(0), n = w.dim(1);
  if (m > 64 || n > 64)
    throw std::invalid_argument("svd_oracle: matrix too large for the oracle");
  if (!w.all_finite())
    throw std::invalid_argument("svd_oracle: non-finite entries");
  // Gram matrix over the smaller side.
  const bool use_cols = n <= m;
  const int k = use_cols ? n : m;
  std::vector<double> gram(static_cast<size_t>(k) * k, 0.0);
  for (int i = 0; i < k; ++i)
    for (int j = i; j < k; ++j) {
      double acc = 0;
      if (use_cols) {
        for (int r = 0; r < m; ++r)
          acc += static_cast<double>(w.at({r, i})) * static_cast<double>(w.at({r, j}));
      } else {
        for (int c = 0; c < n; ++c)
          acc += static_cast<double>(w.at({i, c})) * static_cast<double>(w.at({j, c}));
      }
      gram[static_cast<size_t>(i) * k + j] = acc;
      gram[static_cast<size_t>(j) * k + i] = acc;
    }
  auto vals = detail::jacobi_eigvals(std::move(gram), k);
  double best = 0;
  for (double v : vals) best = std::max(best, v);
  return std::sqrt(std::max(0.0, best));
}

}  // namespace vitgan
