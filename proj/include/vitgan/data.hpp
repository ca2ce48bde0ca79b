#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "rng.hpp"
#include "tensor.hpp"

namespace vitgan {

// Synthetic single-channel image families with pinned population statistics,
// built so fidelity metrics have exact, documented targets.
//
//   gaussian_blobs   one Gaussian bump per image, amplitude 1, sigma 1.5 px;
//                    center drawn from a 2-component mixture: component 0 at
//                    (0.3h, 0.3w), component 1 at (0.7h, 0.7w), each with
//                    isotropic jitter of 1 px, equal mixture weights.
//                    pixel = 2*exp(-r^2 / (2*1.5^2)) - 1, so background -1.
//   two_mode_stripes binary stripes of period 4 and width 2 at values +/-0.8;
//                    orientation mode (horizontal/vertical) with equal
//                    probability, integer phase uniform in 0..3.
//   checker_textures checkerboard with cell size 2 or 4 (equal probability),
//                    polarity +/-1 (equal probability), amplitude uniform in
//                    [0.6, 1.0]; pixel = polarity * amplitude * parity.
enum class DatasetKind { gaussian_blobs, two_mode_stripes, checker_textures };

inline const char* dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::gaussian_blobs: return "gaussian_blobs";
    case DatasetKind::two_mode_stripes: return "two_mode_stripes";
    case DatasetKind::checker_textures: return "checker_textures";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "gaussian_blobs") return DatasetKind::gaussian_blobs;
  if (s == "two_mode_stripes") return DatasetKind::two_mode_stripes;
  if (s == "checker_textures") return DatasetKind::checker_textures;
  throw std::invalid_argument("unknown dataset kind: " + s);
}

struct SyntheticDataset {
  DatasetKind kind = DatasetKind::gaussian_blobs;
  int image_h = 8, image_w = 8;  // channels fixed at 1
  uint64_t seed = 1;
};

inline SyntheticDataset make_dataset(DatasetKind kind, int size, uint64_t seed) {
  if (size != 8 && size != 16)
    throw std::invalid_argument("dataset: image size must be 8 or 16, got " +
                                std::to_string(size));
  SyntheticDataset d;
  d.kind = kind;
  d.image_h = d.image_w = size;
  d.seed = seed;
  return d;
}

// Pure function of (seed, index): every call rebuilds the image from its own
// counter stream, so shuffles, restarts, and parallel readers all agree.
template <class T>
Tensor<T> sample_image(const SyntheticDataset& ds, int64_t index) {
  if (index < 0) throw std::invalid_argument("sample_image: negative index");
  const int h = ds.image_h, w = ds.image_w;
  Rng rng = Rng(ds.seed, "data").sub(dataset_kind_name(ds.kind)).sub(std::to_string(index));
  Tensor<T> img = Tensor<T>::zeros({h, w, 1});
  T* p = img.data();
  switch (ds.kind) {
    case DatasetKind::gaussian_blobs: {
      const bool second = rng.bernoulli(0.5);
      const double frac = second ? 0.7 : 0.3;
      const double cy = frac * h + rng.normal();
      const double cx = frac * w + rng.normal();
      const double inv2s2 = 1.0 / (2.0 * 1.5 * 1.5);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
          p[r * w + c] = static_cast<T>(2.0 * std::exp(-d2 * inv2s2) - 1.0);
        }
      break;
    }
    case DatasetKind::two_mode_stripes: {
      const bool vertical = rng.bernoulli(0.5);
      const int phase = static_cast<int>(rng.uniform_int(4));
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const int coord = vertical ? c : r;
          p[r * w + c] = static_cast<T>(((coord + phase) % 4) < 2 ? 0.8 : -0.8);
        }
      break;
    }
    case DatasetKind::checker_textures: {
      const int cell = rng.bernoulli(0.5) ? 2 : 4;
      const double pol = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const double amp = rng.uniform(0.6, 1.0);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const int parity = ((r / cell) + (c / cell)) % 2;
          p[r * w + c] = static_cast<T>(pol * amp * (parity == 0 ? 1.0 : -1.0));
        }
      break;
    }
  }
  return img;
}

template <class T>
Tensor<T> sample_batch(const SyntheticDataset& ds, int64_t start_index, int count) {
  if (count < 1) throw std::invalid_argument("sample_batch: count must be >= 1");
  Tensor<T> out = Tensor<T>::zeros({count, ds.image_h, ds.image_w, 1});
  const int64_t per = static_cast<int64_t>(ds.image_h) * ds.image_w;
  for (int i = 0; i < count; ++i) {
    Tensor<T> img = sample_image<T>(ds, start_index + i);
    std::copy(img.data(), img.data() + per, out.data() + i * per);
  }
  return out;
}

}  // namespace vitgan
