#pragma once

#include <memory>
#include <stdexcept>
#include <string>

#include "vitgan/tensor.hpp"

namespace vitgan {

enum class PadRule { zero, clamp };

// Geometry of the image <-> patch-sequence mapping. Patches tile the image in
// raster order; extraction windows may extend `overlap` pixels past each cell
// edge, giving an effective (P+2o) x (P+2o) window.
struct PatchGrid {
  int image_h = 0, image_w = 0, channels = 0;
  int patch_size = 0;
  int overlap = 0;

  int rows() const { return image_h / patch_size; }
  int cols() const { return image_w / patch_size; }
  int seq_len() const { return rows() * cols(); }
  int ext() const { return patch_size + 2 * overlap; }
  int patch_dim() const { return ext() * ext() * channels; }
  int cell_dim() const { return patch_size * patch_size * channels; }
};

inline PatchGrid make_patch_grid(int h, int w, int c, int p, int o) {
  if (h <= 0 || w <= 0 || c <= 0 || p <= 0 || o < 0)
    throw std::invalid_argument("patch grid: non-positive extents");
  if (h % p != 0 || w % p != 0)
    throw std::invalid_argument("patch grid: image " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by patch size " +
                                std::to_string(p));
  return PatchGrid{h, w, c, p, o};
}

namespace detail {

template <class T>
std::shared_ptr<const GatherPlan<T>> patchify_plan(const PatchGrid& g, PadRule pad) {
  auto plan = std::make_shared<GatherPlan<T>>();
  plan->in_shape = {g.image_h, g.image_w, g.channels};
  plan->out_shape = {g.seq_len(), g.patch_dim()};
  plan->taps = 1;
  const int64_t n = static_cast<int64_t>(g.seq_len()) * g.patch_dim();
  plan->idx.resize(static_cast<size_t>(n));
  plan->wgt.assign(static_cast<size_t>(n), T(1));
  int64_t cursor = 0;
  for (int pr = 0; pr < g.rows(); ++pr)
    for (int pc = 0; pc < g.cols(); ++pc)
      for (int dr = -g.overlap; dr < g.patch_size + g.overlap; ++dr)
        for (int dc = -g.overlap; dc < g.patch_size + g.overlap; ++dc)
          for (int ch = 0; ch < g.channels; ++ch) {
            int r = pr * g.patch_size + dr;
            int c = pc * g.patch_size + dc;
            if (pad == PadRule::clamp) {
              r = std::min(std::max(r, 0), g.image_h - 1);
              c = std::min(std::max(c, 0), g.image_w - 1);
            }
            const bool inside = r >= 0 && r < g.image_h && c >= 0 && c < g.image_w;
            plan->idx[static_cast<size_t>(cursor++)] =
                inside ? (static_cast<int64_t>(r) * g.image_w + c) * g.channels + ch
                       : int64_t(-1);
          }
  return plan;
}

template <class T>
std::shared_ptr<const GatherPlan<T>> depatchify_plan(const PatchGrid& g) {
  auto plan = std::make_shared<GatherPlan<T>>();
  plan->in_shape = {g.seq_len(), g.cell_dim()};
  plan->out_shape = {g.image_h, g.image_w, g.channels};
  plan->taps = 1;
  const int64_t n = static_cast<int64_t>(g.image_h) * g.image_w * g.channels;
  plan->idx.resize(static_cast<size_t>(n));
  plan->wgt.assign(static_cast<size_t>(n), T(1));
  int64_t cursor = 0;
  for (int r = 0; r < g.image_h; ++r)
    for (int c = 0; c < g.image_w; ++c)
      for (int ch = 0; ch < g.channels; ++ch) {
        const int l = (r / g.patch_size) * g.cols() + c / g.patch_size;
        const int dr = r % g.patch_size, dc = c % g.patch_size;
        const int within = (dr * g.patch_size + dc) * g.channels + ch;
        plan->idx[static_cast<size_t>(cursor++)] =
            static_cast<int64_t>(l) * g.cell_dim() + within;
      }
  return plan;
}

}  // namespace detail

// Raster-order patch extraction. Accepts [H,W,C] or [B,H,W,C]; returns
// [L, (P+2o)^2*C] or [B, L, ...]. Differentiable (gradients scatter back).
template <class T>
Tensor<T> patchify(const PatchGrid& g, const Tensor<T>& img,
                   PadRule pad = PadRule::zero) {
  return gather_apply(img, detail::patchify_plan<T>(g, pad));
}

// Inverse of patchify at o=0: reassembles non-overlapping P^2*C patches into
// the image. Bit-exact round trip.
template <class T>
Tensor<T> depatchify(const PatchGrid& g, const Tensor<T>& patches) {
  const int want = g.cell_dim();
  if (patches.dim(patches.ndim() - 1) != want ||
      patches.dim(patches.ndim() - 2) != g.seq_len())
    throw std::invalid_argument(
        "depatchify: expected trailing [" + std::to_string(g.seq_len()) + "," +
        std::to_string(want) + "], got " + shape_str(patches.shape()));
  return gather_apply(patches, detail::depatchify_plan<T>(g));
}

// Normalized (row, col) centers of the patch cells: first cell -1+1/n,
// last cell 1-1/n per axis, raster order.
template <class T>
Tensor<T> patch_positions(const PatchGrid& g) {
  Tensor<T> out({g.seq_len(), 2});
  const int nr = g.rows(), nc = g.cols();
  int64_t cursor = 0;
  for (int r = 0; r < nr; ++r)
    for (int c = 0; c < nc; ++c) {
      out.data()[cursor++] = static_cast<T>((2.0 * r + 1.0) / nr - 1.0);
      out.data()[cursor++] = static_cast<T>((2.0 * c + 1.0) / nc - 1.0);
    }
  return out;
}

// Normalized (row, col) coordinates of the P^2 pixels inside one patch,
// same cell-center convention: endpoints at +-(1-1/P).
template <class T>
Tensor<T> pixel_coords(int p) {
  if (p < 1) throw std::invalid_argument("pixel_coords: patch size must be >= 1");
  Tensor<T> out({p * p, 2});
  int64_t cursor = 0;
  for (int r = 0; r < p; ++r)
    for (int c = 0; c < p; ++c) {
      out.data()[cursor++] = static_cast<T>((2.0 * r + 1.0) / p - 1.0);
      out.data()[cursor++] = static_cast<T>((2.0 * c + 1.0) / p - 1.0);
    }
  return out;
}

}  // namespace vitgan
