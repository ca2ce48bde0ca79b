#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace vitgan {

// Differentiable augmentation pipeline.  Every transform is built from
// tracked tensor ops so generator gradients flow through augmented images.
struct AugConfig {
  bool translation = true;
  bool color = true;
  bool cutout = true;
  bool scaling = true;
  double prob = 0.8;  // per image, per enabled transform
};

// Per-image draw.  Parameter fields are always populated (neutral when the
// transform is off) so a fixed config consumes a fixed number of RNG draws
// per image regardless of the Bernoulli outcomes.
struct AugParams {
  bool color_on = false;
  bool translate_on = false;
  bool scale_on = false;
  bool cutout_on = false;
  double brightness = 0.0;  // additive
  double saturation = 1.0;  // about per-pixel channel mean
  double contrast = 1.0;    // about whole-image mean
  int ty = 0, tx = 0;       // integer shift, zero fill
  double factor = 1.0;      // isotropic scale about image center
  int cy = 0, cx = 0;       // cutout top-left corner
};

inline void validate_aug_config(const AugConfig& cfg) {
  if (!(cfg.prob >= 0.0 && cfg.prob <= 1.0))
    throw std::invalid_argument("aug: prob must lie in [0,1]");
}

// Draw order per image is pinned: color (flag, brightness, saturation,
// contrast), translation (flag, ty, tx), scaling (flag, factor), cutout
// (flag, cy, cx).  Disabled transforms consume no draws.
inline std::vector<AugParams> draw_aug_params(int n, int h, int w, const AugConfig& cfg,
                                              Rng& rng) {
  validate_aug_config(cfg);
  if (n < 1 || h < 1 || w < 1)
    throw std::invalid_argument("aug: empty batch or degenerate image");
  std::vector<AugParams> ps(static_cast<size_t>(n));
  const int shift = h / 8;
  const int side = h / 2;
  for (auto& p : ps) {
    if (cfg.color) {
      p.color_on = rng.bernoulli(cfg.prob);
      const double b = rng.uniform(-0.5, 0.5);
      const double s = rng.uniform(0.0, 2.0);
      const double c = rng.uniform(0.5, 1.5);
      if (p.color_on) {
        p.brightness = b;
        p.saturation = s;
        p.contrast = c;
      }
    }
    if (cfg.translation) {
      p.translate_on = rng.bernoulli(cfg.prob);
      const int ty = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * shift + 1))) - shift;
      const int tx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * shift + 1))) - shift;
      if (p.translate_on) {
        p.ty = ty;
        p.tx = tx;
      }
    }
    if (cfg.scaling) {
      p.scale_on = rng.bernoulli(cfg.prob);
      const double f = rng.uniform(0.75, 1.25);
      if (p.scale_on) p.factor = f;
    }
    if (cfg.cutout) {
      p.cutout_on = rng.bernoulli(cfg.prob);
      const int ry = std::max(h - side + 1, 1);
      const int rx = std::max(w - side + 1, 1);
      const int cy = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(ry)));
      const int cx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(rx)));
      if (p.cutout_on) {
        p.cy = cy;
        p.cx = cx;
      }
    }
  }
  return ps;
}

namespace detail {

// Translation and scaling compose into one 4-tap bilinear resample.  Source
// coordinate for output pixel r: (r - c)/f + c - t with c the image center;
// out-of-range taps get index -1 (zero fill).  Identity parameters land on
// integer sources, so untransformed images pass through bit-exactly.
template <class T>
std::shared_ptr<const GatherPlan<T>> geometry_plan(int n, int h, int w, int c,
                                                   const std::vector<AugParams>& ps) {
  auto plan = std::make_shared<GatherPlan<T>>();
  plan->in_shape = {n, h, w, c};
  plan->out_shape = {n, h, w, c};
  plan->taps = 4;
  const int64_t out_n = static_cast<int64_t>(n) * h * w * c;
  plan->idx.assign(static_cast<size_t>(out_n) * 4, -1);
  plan->wgt.assign(static_cast<size_t>(out_n) * 4, T(0));
  const double cy0 = static_cast<double>(h - 1) / 2.0;
  const double cx0 = static_cast<double>(w - 1) / 2.0;
  for (int b = 0; b < n; ++b) {
    const AugParams& p = ps[static_cast<size_t>(b)];
    const double f = p.scale_on ? p.factor : 1.0;
    const double ty = p.translate_on ? static_cast<double>(p.ty) : 0.0;
    const double tx = p.translate_on ? static_cast<double>(p.tx) : 0.0;
    for (int r = 0; r < h; ++r) {
      const double sy = (static_cast<double>(r) - cy0) / f + cy0 - ty;
      const int64_t y0 = static_cast<int64_t>(std::floor(sy));
      const double fy = sy - static_cast<double>(y0);
      for (int col = 0; col < w; ++col) {
        const double sx = (static_cast<double>(col) - cx0) / f + cx0 - tx;
        const int64_t x0 = static_cast<int64_t>(std::floor(sx));
        const double fx = sx - static_cast<double>(x0);
        const double tw[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
        const int64_t tyy[4] = {y0, y0, y0 + 1, y0 + 1};
        const int64_t txx[4] = {x0, x0 + 1, x0, x0 + 1};
        for (int ch = 0; ch < c; ++ch) {
          const int64_t o = (((static_cast<int64_t>(b) * h + r) * w + col) * c + ch) * 4;
          for (int t = 0; t < 4; ++t) {
            if (tyy[t] < 0 || tyy[t] >= h || txx[t] < 0 || txx[t] >= w) continue;
            plan->idx[static_cast<size_t>(o + t)] =
                ((static_cast<int64_t>(b) * h + tyy[t]) * w + txx[t]) * c + ch;
            plan->wgt[static_cast<size_t>(o + t)] = static_cast<T>(tw[t]);
          }
        }
      }
    }
  }
  return plan;
}

}  // namespace detail

// Applies the drawn transforms: color (brightness, then saturation about the
// per-pixel channel mean, then contrast about the image mean), geometry
// (translation + scaling in one bilinear pass), cutout (one zeroed square).
template <class T>
Tensor<T> apply_augment(const Tensor<T>& batch, const std::vector<AugParams>& ps,
                        const AugConfig& cfg) {
  if (batch.ndim() != 4)
    throw std::invalid_argument("apply_augment: expected [batch, h, w, c], got " +
                                shape_str(batch.shape()));
  const int n = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  if (static_cast<int>(ps.size()) != n)
    throw std::invalid_argument("apply_augment: params count does not match batch");
  Tensor<T> x = batch;
  bool any_color = false;
  for (const auto& p : ps) any_color = any_color || p.color_on;
  if (cfg.color && any_color) {
    Tensor<T> bvec = Tensor<T>::zeros({n, 1, 1, 1});
    Tensor<T> svec = Tensor<T>::zeros({n, 1, 1, 1});
    Tensor<T> cvec = Tensor<T>::zeros({n, 1, 1, 1});
    for (int i = 0; i < n; ++i) {
      const AugParams& p = ps[static_cast<size_t>(i)];
      bvec.data()[i] = p.color_on ? static_cast<T>(p.brightness) : T(0);
      svec.data()[i] = p.color_on ? static_cast<T>(p.saturation) : T(1);
      cvec.data()[i] = p.color_on ? static_cast<T>(p.contrast) : T(1);
    }
    x = add(x, bvec);
    Tensor<T> pix_mean = reduce_mean(x, -1, true);  // [n,h,w,1]
    x = add(pix_mean, mul(svec, sub(x, pix_mean)));
    Tensor<T> img_mean =
        reshape(reduce_mean(reshape(x, {n, h * w * c}), -1, true), {n, 1, 1, 1});
    x = add(img_mean, mul(cvec, sub(x, img_mean)));
  }
  if (cfg.translation || cfg.scaling) {
    bool any = false;
    for (const auto& p : ps) any = any || p.translate_on || p.scale_on;
    if (any) x = gather_apply(x, detail::geometry_plan<T>(n, h, w, c, ps));
  }
  if (cfg.cutout) {
    bool any = false;
    for (const auto& p : ps) any = any || p.cutout_on;
    if (any) {
      const int side = h / 2;
      Tensor<T> mask = Tensor<T>::full({n, h, w, 1}, T(1));
      for (int i = 0; i < n; ++i) {
        const AugParams& p = ps[static_cast<size_t>(i)];
        if (!p.cutout_on) continue;
        for (int r = p.cy; r < std::min(p.cy + side, h); ++r)
          for (int col = p.cx; col < std::min(p.cx + side, w); ++col)
            mask.data()[(static_cast<int64_t>(i) * h + r) * w + col] = T(0);
      }
      x = mul(x, mask);
    }
  }
  return x;
}

template <class T>
Tensor<T> diff_augment(const Tensor<T>& batch, const AugConfig& cfg, Rng& rng) {
  if (batch.ndim() != 4)
    throw std::invalid_argument("diff_augment: expected [batch, h, w, c], got " +
                                shape_str(batch.shape()));
  auto ps = draw_aug_params(batch.dim(0), batch.dim(1), batch.dim(2), cfg, rng);
  return apply_augment(batch, ps, cfg);
}

}  // namespace vitgan
