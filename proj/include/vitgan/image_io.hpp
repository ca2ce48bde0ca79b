#pragma once

#include <cfenv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitgan/tensor.hpp"

namespace vitgan {

// Model range [-1,1] -> byte, round half to even (nearbyint under the
// default rounding mode), clamping out-of-range values first.
inline uint8_t quantize_unit(double v) {
  v = std::min(1.0, std::max(-1.0, v));
  const double scaled = (v + 1.0) * 0.5 * 255.0;
  return static_cast<uint8_t>(std::nearbyint(scaled));
}

inline double dequantize_unit(uint8_t b) {
  return static_cast<double>(b) / 255.0 * 2.0 - 1.0;
}

// Binary PGM (P5) for single-channel, PPM (P6) for three-channel images.
template <class T>
void write_image(const std::string& path, const Tensor<T>& img) {
  if (img.ndim() != 3)
    throw std::invalid_argument("write_image: expected [H,W,C], got " +
                                shape_str(img.shape()));
  const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (c != 1 && c != 3)
    throw std::invalid_argument("write_image: supported channel counts are 1 and 3");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_image: cannot open " + path);
  out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w) * c);
  for (int r = 0; r < h; ++r) {
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        row[static_cast<size_t>(x) * c + ch] =
            quantize_unit(static_cast<double>(img.at({r, x, ch})));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write_image: short write to " + path);
}

template <class T>
Tensor<T> read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_image: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6")
    throw std::runtime_error("read_image: unsupported format " + magic + " in " + path);
  const int c = magic == "P5" ? 1 : 3;
  auto next_int = [&in, &path]() {
    // Skip whitespace and '#' comment lines between header fields.
    for (;;) {
      int ch = in.peek();
      if (ch == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(ch)) {
        in.get();
      } else {
        break;
      }
    }
    int v = 0;
    in >> v;
    if (!in) throw std::runtime_error("read_image: truncated header in " + path);
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxv = next_int();
  if (maxv != 255)
    throw std::runtime_error("read_image: only 8-bit images supported");
  in.get();  // single whitespace after header
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h * c);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error("read_image: truncated pixel data in " + path);
  Tensor<T> img({h, w, c});
  for (size_t i = 0; i < raw.size(); ++i)
    img.data()[i] = static_cast<T>(dequantize_unit(raw[i]));
  return img;
}

// Lays a batch [B,H,W,C] out as a grid with `cols` images per row; empty
// cells (when B is not a multiple of cols) are filled with -1 (black).
template <class T>
Tensor<T> tile_images(const Tensor<T>& batch, int cols) {
  if (batch.ndim() != 4)
    throw std::invalid_argument("tile_images: expected [B,H,W,C], got " +
                                shape_str(batch.shape()));
  if (cols <= 0) throw std::invalid_argument("tile_images: cols must be positive");
  const int b = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  const int rows = (b + cols - 1) / cols;
  Tensor<T> out = Tensor<T>::full({rows * h, cols * w, c}, T(-1));
  for (int i = 0; i < b; ++i) {
    const int gr = i / cols, gc = i % cols;
    for (int r = 0; r < h; ++r)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch)
          out.data()[((static_cast<int64_t>(gr) * h + r) * (cols * w) +
                      (static_cast<int64_t>(gc) * w + x)) *
                         c +
                     ch] = batch.at({i, r, x, ch});
  }
  return out;
}

}  // namespace vitgan
