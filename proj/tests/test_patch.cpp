#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "vitgan/gradcheck.hpp"
#include "vitgan/image_io.hpp"
#include "vitgan/patch.hpp"

using vitgan::PadRule;
using vitgan::PatchGrid;
using vitgan::Rng;
using vitgan::Tensor;

using T = double;
using Tn = Tensor<T>;

// Reference patch extractor: reads the image directly instead of going
// through the gather machinery.
static std::vector<T> naive_window(const Tn& img, const PatchGrid& g, int pr,
                                   int pc, PadRule pad) {
  std::vector<T> out;
  for (int dr = -g.overlap; dr < g.patch_size + g.overlap; ++dr)
    for (int dc = -g.overlap; dc < g.patch_size + g.overlap; ++dc)
      for (int ch = 0; ch < g.channels; ++ch) {
        int r = pr * g.patch_size + dr;
        int c = pc * g.patch_size + dc;
        if (pad == PadRule::clamp) {
          r = std::min(std::max(r, 0), g.image_h - 1);
          c = std::min(std::max(c, 0), g.image_w - 1);
        }
        if (r < 0 || r >= g.image_h || c < 0 || c >= g.image_w)
          out.push_back(T(0));
        else
          out.push_back(img.at({r, c, ch}));
      }
  return out;
}

static Tn iota_image(int h, int w, int c) {
  Tn img({h, w, c});
  for (int64_t i = 0; i < img.size(); ++i) img.data()[i] = static_cast<T>(i);
  return img;
}

TEST_CASE("raster decomposition of the 4x4 counting image") {
  auto g = vitgan::make_patch_grid(4, 4, 1, 2, 0);
  REQUIRE(g.seq_len() == 4);
  REQUIRE(g.patch_dim() == 4);
  Tn img = iota_image(4, 4, 1);
  Tn p = vitgan::patchify(g, img);
  REQUIRE(p.shape() == vitgan::Shape({4, 4}));
  const T want[4][4] = {{0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}};
  for (int l = 0; l < 4; ++l)
    for (int j = 0; j < 4; ++j) REQUIRE(p.at({l, j}) == want[l][j]);
}

TEST_CASE("overlapping windows match direct enumeration") {
  Tn img = iota_image(4, 4, 1);
  auto g = vitgan::make_patch_grid(4, 4, 1, 2, 1);
  REQUIRE(g.ext() == 4);
  REQUIRE(g.patch_dim() == 16);
  for (PadRule pad : {PadRule::zero, PadRule::clamp}) {
    Tn p = vitgan::patchify(g, img, pad);
    for (int pr = 0; pr < 2; ++pr)
      for (int pc = 0; pc < 2; ++pc) {
        auto ref = naive_window(img, g, pr, pc, pad);
        const int l = pr * 2 + pc;
        for (int j = 0; j < g.patch_dim(); ++j) REQUIRE(p.at({l, j}) == ref[static_cast<int>(j)]);
      }
  }
  // Patch 0 with zero padding: window rows -1..2, cols -1..2, zero border.
  Tn p0 = vitgan::patchify(g, img, PadRule::zero);
  const T want0[16] = {0, 0, 0, 0, 0, 0, 1, 2, 0, 4, 5, 6, 0, 8, 9, 10};
  for (int j = 0; j < 16; ++j) REQUIRE(p0.at({0, j}) == want0[j]);
}

TEST_CASE("overlapping windows on a random multichannel image") {
  Rng rng(7, "patch");
  Tn img = Tn::normal({6, 9, 3}, rng);
  auto g = vitgan::make_patch_grid(6, 9, 3, 3, 2);
  for (PadRule pad : {PadRule::zero, PadRule::clamp}) {
    Tn p = vitgan::patchify(g, img, pad);
    for (int pr = 0; pr < g.rows(); ++pr)
      for (int pc = 0; pc < g.cols(); ++pc) {
        auto ref = naive_window(img, g, pr, pc, pad);
        const int l = pr * g.cols() + pc;
        for (int j = 0; j < g.patch_dim(); ++j) REQUIRE(p.at({l, j}) == ref[static_cast<size_t>(j)]);
      }
  }
}

TEST_CASE("constant image gives constant patches with zeros only in padding") {
  const T c = 2.75;
  auto g = vitgan::make_patch_grid(4, 4, 1, 2, 1);
  Tn img = Tn::full({4, 4, 1}, c);
  Tn p = vitgan::patchify(g, img, PadRule::zero);
  int zeros = 0, consts = 0;
  for (int64_t i = 0; i < p.size(); ++i) {
    if (p[i] == T(0))
      ++zeros;
    else if (p[i] == c)
      ++consts;
  }
  REQUIRE(zeros + consts == p.size());
  // Interior cells of each window are the constant.
  for (int l = 0; l < g.seq_len(); ++l)
    for (int dr = 1; dr < 3; ++dr)
      for (int dc = 1; dc < 3; ++dc) REQUIRE(p.at({l, dr * 4 + dc}) == c);
  // Clamp padding has no zeros at all.
  Tn pc = vitgan::patchify(g, img, PadRule::clamp);
  for (int64_t i = 0; i < pc.size(); ++i) REQUIRE(pc[i] == c);
}

TEST_CASE("depatchify inverts the non-overlapping decomposition bit-exactly") {
  Rng rng(11, "patch");
  Tn img = Tn::normal({8, 8, 3}, rng);
  auto g = vitgan::make_patch_grid(8, 8, 3, 4, 0);
  Tn back = vitgan::depatchify(g, vitgan::patchify(g, img));
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.size(); ++i) REQUIRE(back[i] == img[i]);
}

TEST_CASE("all-zero patches reassemble to the zero image") {
  auto g = vitgan::make_patch_grid(6, 6, 2, 3, 0);
  Tn z = Tn::zeros({g.seq_len(), g.cell_dim()});
  Tn img = vitgan::depatchify(g, z);
  for (int64_t i = 0; i < img.size(); ++i) REQUIRE(img[i] == T(0));
}

TEST_CASE("a single nonzero patch lands exactly in its cell") {
  auto g = vitgan::make_patch_grid(6, 6, 1, 3, 0);
  const int k = 3;  // cell row 1, col 1
  Tn p = Tn::zeros({g.seq_len(), g.cell_dim()});
  for (int j = 0; j < g.cell_dim(); ++j) p.data()[k * g.cell_dim() + j] = T(1);
  Tn img = vitgan::depatchify(g, p);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c) {
      const bool in_cell = r >= 3 && c >= 3;
      REQUIRE(img.at({r, c, 0}) == (in_cell ? T(1) : T(0)));
    }
}

TEST_CASE("center sub-window of an extended patch is the plain patch") {
  Rng rng(13, "patch");
  Tn img = Tn::normal({8, 8, 2}, rng);
  const int P = 4, o = 2;  // the default overlap is half the patch size
  auto g0 = vitgan::make_patch_grid(8, 8, 2, P, 0);
  auto g1 = vitgan::make_patch_grid(8, 8, 2, P, o);
  Tn plain = vitgan::patchify(g0, img);
  Tn wide = vitgan::patchify(g1, img);
  const int e = g1.ext();
  for (int l = 0; l < g0.seq_len(); ++l)
    for (int dr = 0; dr < P; ++dr)
      for (int dc = 0; dc < P; ++dc)
        for (int ch = 0; ch < 2; ++ch) {
          const int wide_j = (((dr + o) * e) + (dc + o)) * 2 + ch;
          const int plain_j = (dr * P + dc) * 2 + ch;
          REQUIRE(wide.at({l, wide_j}) == plain.at({l, plain_j}));
        }
}

TEST_CASE("non-overlapping patches partition the image mass") {
  Rng rng(17, "patch");
  Tn img = Tn::normal({6, 8, 3}, rng);
  auto g = vitgan::make_patch_grid(6, 8, 3, 2, 0);
  Tn p = vitgan::patchify(g, img);
  T s_img = 0, s_patch = 0;
  for (int64_t i = 0; i < img.size(); ++i) s_img += img[i];
  for (int64_t i = 0; i < p.size(); ++i) s_patch += p[i];
  REQUIRE(s_patch == Catch::Approx(s_img).epsilon(1e-12));
}

TEST_CASE("patchify handles batches and rejects bad shapes") {
  Rng rng(19, "patch");
  auto g = vitgan::make_patch_grid(4, 4, 1, 2, 1);
  Tn batch = Tn::normal({3, 4, 4, 1}, rng);
  Tn p = vitgan::patchify(g, batch);
  REQUIRE(p.shape() == vitgan::Shape({3, g.seq_len(), g.patch_dim()}));
  for (int b = 0; b < 3; ++b) {
    Tn one({4, 4, 1});
    for (int64_t i = 0; i < one.size(); ++i) one.data()[i] = batch.data()[b * 16 + i];
    Tn pb = vitgan::patchify(g, one);
    for (int l = 0; l < g.seq_len(); ++l)
      for (int j = 0; j < g.patch_dim(); ++j) REQUIRE(p.at({b, l, j}) == pb.at({l, j}));
  }
  REQUIRE_THROWS_AS(vitgan::patchify(g, Tn::zeros({5, 4, 1})), std::invalid_argument);
  REQUIRE_THROWS_AS(vitgan::depatchify(g, Tn::zeros({4, 5})), std::invalid_argument);
  REQUIRE_THROWS_AS(vitgan::make_patch_grid(5, 4, 1, 2, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(vitgan::make_patch_grid(4, 4, 1, 2, -1), std::invalid_argument);
}

TEST_CASE("patchify gradient is the per-pixel window multiplicity") {
  auto g = vitgan::make_patch_grid(4, 4, 1, 2, 1);
  Rng rng(23, "patch");
  Tn img = Tn::normal({4, 4, 1}, rng);

  vitgan::Tape<T> tape;
  Tn x = img.clone();
  tape.watch(x);
  Tn loss = vitgan::sum_all(vitgan::patchify(g, x));
  Tn grad = tape.backward(loss).grad(x);

  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      int count = 0;
      for (int pr = 0; pr < 2; ++pr)
        for (int pc = 0; pc < 2; ++pc) {
          const int r0 = pr * 2 - 1, c0 = pc * 2 - 1;
          if (r >= r0 && r < r0 + 4 && c >= c0 && c < c0 + 4) ++count;
        }
      REQUIRE(grad.at({r, c, 0}) == static_cast<T>(count));
    }

  auto fn = [&g](const Tn& t) { return vitgan::sum_all(vitgan::square(vitgan::patchify(g, t))); };
  auto rep = vitgan::gradcheck<T>(fn, img, 1e-6);
  INFO(rep.detail);
  REQUIRE(rep.pass);

  auto g0 = vitgan::make_patch_grid(4, 4, 1, 2, 0);
  Tn patches = vitgan::patchify(g0, img).detach();
  auto fn2 = [&g0](const Tn& t) { return vitgan::sum_all(vitgan::square(vitgan::depatchify(g0, t))); };
  auto rep2 = vitgan::gradcheck<T>(fn2, patches, 1e-6);
  INFO(rep2.detail);
  REQUIRE(rep2.pass);
}

TEST_CASE("patch positions use the cell-center convention") {
  auto g = vitgan::make_patch_grid(4, 4, 1, 2, 0);  // 2x2 grid of patches
  Tn pos = vitgan::patch_positions<T>(g);
  REQUIRE(pos.shape() == vitgan::Shape({4, 2}));
  const T want[4][2] = {{-0.5, -0.5}, {-0.5, 0.5}, {0.5, -0.5}, {0.5, 0.5}};
  for (int l = 0; l < 4; ++l)
    for (int a = 0; a < 2; ++a) REQUIRE(pos.at({l, a}) == Catch::Approx(want[l][a]).margin(1e-12));

  auto g1 = vitgan::make_patch_grid(2, 2, 1, 2, 0);  // single patch
  Tn pos1 = vitgan::patch_positions<T>(g1);
  REQUIRE(pos1.at({0, 0}) == T(0));
  REQUIRE(pos1.at({0, 1}) == T(0));

  // Strictly inside (-1,1), and the set is closed under negation: reading the
  // raster order backwards gives the pointwise negation.
  auto g2 = vitgan::make_patch_grid(12, 8, 1, 2, 0);
  Tn pos2 = vitgan::patch_positions<T>(g2);
  const int L = g2.seq_len();
  for (int l = 0; l < L; ++l)
    for (int a = 0; a < 2; ++a) {
      REQUIRE(std::abs(pos2.at({l, a})) < T(1));
      REQUIRE(pos2.at({l, a}) == Catch::Approx(-pos2.at({L - 1 - l, a})).margin(1e-12));
    }
}

TEST_CASE("pixel coordinates share the convention and are mean-zero") {
  Tn p1 = vitgan::pixel_coords<T>(1);
  REQUIRE(p1.shape() == vitgan::Shape({1, 2}));
  REQUIRE(p1[0] == T(0));
  REQUIRE(p1[1] == T(0));

  Tn p2 = vitgan::pixel_coords<T>(2);
  const T want[4][2] = {{-0.5, -0.5}, {-0.5, 0.5}, {0.5, -0.5}, {0.5, 0.5}};
  for (int i = 0; i < 4; ++i)
    for (int a = 0; a < 2; ++a) REQUIRE(p2.at({i, a}) == Catch::Approx(want[i][a]).margin(1e-12));

  for (int P : {1, 2, 3, 5, 8}) {
    Tn p = vitgan::pixel_coords<T>(P);
    T mr = 0, mc = 0;
    for (int i = 0; i < P * P; ++i) {
      mr += p.at({i, 0});
      mc += p.at({i, 1});
      REQUIRE(std::abs(p.at({i, 0})) <= T(1) - T(1) / P + 1e-12);
      REQUIRE(p.at({i, 0}) == Catch::Approx(-p.at({P * P - 1 - i, 0})).margin(1e-12));
      REQUIRE(p.at({i, 1}) == Catch::Approx(-p.at({P * P - 1 - i, 1})).margin(1e-12));
    }
    REQUIRE(mr == Catch::Approx(0).margin(1e-10));
    REQUIRE(mc == Catch::Approx(0).margin(1e-10));
  }
}

TEST_CASE("byte quantization is a clamped round-to-nearest-even map") {
  REQUIRE(vitgan::quantize_unit(-1.0) == 0);
  REQUIRE(vitgan::quantize_unit(1.0) == 255);
  REQUIRE(vitgan::quantize_unit(-3.0) == 0);
  REQUIRE(vitgan::quantize_unit(7.0) == 255);
  // 0.0 maps to 127.5 exactly; half rounds to the even neighbor 128.
  REQUIRE(vitgan::quantize_unit(0.0) == 128);
  // Reference rounding over a dense sweep.
  for (int i = 0; i <= 5000; ++i) {
    const double v = -1.0 + 2.0 * i / 5000.0;
    const double s = (v + 1.0) * 0.5 * 255.0;
    const double fl = std::floor(s);
    const double fr = s - fl;
    double ref;
    if (fr < 0.5)
      ref = fl;
    else if (fr > 0.5)
      ref = fl + 1;
    else
      ref = std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1;
    REQUIRE(static_cast<double>(vitgan::quantize_unit(v)) == ref);
  }
  // Every byte value survives a dequantize/quantize round trip.
  for (int b = 0; b < 256; ++b)
    REQUIRE(vitgan::quantize_unit(vitgan::dequantize_unit(static_cast<uint8_t>(b))) == b);
}

TEST_CASE("grayscale images round-trip through binary PGM") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "vitgan_test.pgm").string();
  Tn img({16, 16, 1});
  for (int i = 0; i < 256; ++i)
    img.data()[i] = static_cast<T>(vitgan::dequantize_unit(static_cast<uint8_t>(i)));
  vitgan::write_image(path, img);
  Tn back = vitgan::read_image<T>(path);
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.size(); ++i) REQUIRE(back[i] == img[i]);
  std::remove(path.c_str());
}

TEST_CASE("color images round-trip through binary PPM") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "vitgan_test.ppm").string();
  Rng rng(29, "img");
  Tn img = Tn::uniform({6, 5, 3}, rng, -1.0, 1.0);
  vitgan::write_image(path, img);
  Tn back = vitgan::read_image<T>(path);
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.size(); ++i) {
    REQUIRE(vitgan::quantize_unit(back[i]) == vitgan::quantize_unit(img[i]));
    REQUIRE(std::abs(back[i] - img[i]) <= 1.0 / 255.0 + 1e-12);
  }
  std::remove(path.c_str());
}

TEST_CASE("image reader tolerates header comment lines") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "vitgan_comment.pgm").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n# a comment line\n2 2\n255\n";
    const uint8_t px[4] = {0, 128, 255, 64};
    out.write(reinterpret_cast<const char*>(px), 4);
  }
  Tn img = vitgan::read_image<T>(path);
  REQUIRE(img.shape() == vitgan::Shape({2, 2, 1}));
  REQUIRE(vitgan::quantize_unit(img[0]) == 0);
  REQUIRE(vitgan::quantize_unit(img[1]) == 128);
  REQUIRE(vitgan::quantize_unit(img[2]) == 255);
  REQUIRE(vitgan::quantize_unit(img[3]) == 64);
  std::remove(path.c_str());
}

TEST_CASE("tile_images lays a batch out on a grid with black filler") {
  Rng rng(31, "img");
  Tn batch = Tn::uniform({5, 3, 4, 1}, rng, -1.0, 1.0);
  Tn sheet = vitgan::tile_images(batch, 2);
  REQUIRE(sheet.shape() == vitgan::Shape({9, 8, 1}));
  for (int i = 0; i < 5; ++i) {
    const int gr = i / 2, gc = i % 2;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c)
        REQUIRE(sheet.at({gr * 3 + r, gc * 4 + c, 0}) == batch.at({i, r, c, 0}));
  }
  // The sixth cell is filler.
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) REQUIRE(sheet.at({6 + r, 4 + c, 0}) == T(-1));
}
