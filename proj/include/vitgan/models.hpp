#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "vitgan/attention.hpp"
#include "vitgan/layers.hpp"
#include "vitgan/patch.hpp"
#include "vitgan/tensor.hpp"

namespace vitgan {

enum class GenVariant { A, B, C };
enum class OutputMap { linear, inr };

inline const char* variant_name(GenVariant v) {
  switch (v) {
    case GenVariant::A: return "A";
    case GenVariant::B: return "B";
    default: return "C";
  }
}

inline const char* output_map_name(OutputMap m) {
  return m == OutputMap::linear ? "linear" : "inr";
}

// ---- self-modulated layer norm -----------------------------------------------

// Normalization whose scale and shift are affine functions of a conditioning
// vector w. At init (gamma_map weight 0 bias 1, beta_map weight 0 bias 0) it
// is a plain parameter-free layer norm for every w.
template <class T>
struct SlnParams {
  LinearLayer<T> gamma_map;  // D -> D
  LinearLayer<T> beta_map;   // D -> D
  T eps = static_cast<T>(1e-5);
};

template <class T>
SlnParams<T> make_sln(int dim, Rng rng) {
  SlnParams<T> s;
  s.gamma_map = make_linear<T>(dim, dim, rng.sub("gamma"));
  s.beta_map = make_linear<T>(dim, dim, rng.sub("beta"));
  std::fill(s.gamma_map.w.weight.data(),
            s.gamma_map.w.weight.data() + s.gamma_map.w.weight.size(), T(0));
  std::fill(s.beta_map.w.weight.data(),
            s.beta_map.w.weight.data() + s.beta_map.w.weight.size(), T(0));
  std::fill(s.gamma_map.bias.data(), s.gamma_map.bias.data() + dim, T(1));
  return s;
}

template <class T>
Tensor<T> sln_forward(const SlnParams<T>& s, const Tensor<T>& h,
                      const Tensor<T>& w) {
  if (h.ndim() != 3 || w.ndim() != 2 || w.dim(0) != h.dim(0) ||
      w.dim(1) != h.dim(2))
    throw std::invalid_argument("sln: h " + shape_str(h.shape()) + " vs w " +
                                shape_str(w.shape()));
  Tensor<T> g = linear_forward(s.gamma_map, w);  // [B,D]
  Tensor<T> b = linear_forward(s.beta_map, w);
  const int bsz = w.dim(0), d = w.dim(1);
  Tensor<T> norm = normalize_lastdim(h, s.eps);
  return add(mul(norm, reshape(g, {bsz, 1, d})), reshape(b, {bsz, 1, d}));
}

// A block's normalization site: either plain layer norm or the modulated one.
template <class T>
struct NormSite {
  bool modulated = false;
  LayerNormParams<T> ln;
  SlnParams<T> sln;
};

template <class T>
NormSite<T> make_norm_site(int dim, bool modulated, Rng rng) {
  NormSite<T> n;
  n.modulated = modulated;
  if (modulated)
    n.sln = make_sln<T>(dim, rng);
  else
    n.ln = make_layernorm<T>(dim);
  return n;
}

template <class T>
Tensor<T> norm_forward(const NormSite<T>& n, const Tensor<T>& h,
                       const Tensor<T>* w) {
  if (n.modulated) {
    if (!w)
      throw std::invalid_argument(
          "norm_forward: modulated normalization needs the conditioning vector");
    return sln_forward(n.sln, h, *w);
  }
  return layernorm(h, n.ln);
}

// ---- transformer block ---------------------------------------------------------

// Pre-norm residual block: h' = MSA(Norm(h)) + h; out = MLP(Norm(h')) + h'.
template <class T>
struct Block {
  NormSite<T> norm1, norm2;
  AttentionParams<T> attn;
  MlpBlock<T> mlp;
};

template <class T>
Block<T> make_block(int dim, int heads, int mlp_hidden, AttentionKernel kernel,
                    SpectralMode mode, bool modulated, Rng rng) {
  Block<T> b;
  b.norm1 = make_norm_site<T>(dim, modulated, rng.sub("norm1"));
  b.norm2 = make_norm_site<T>(dim, modulated, rng.sub("norm2"));
  b.attn = make_attention<T>(dim, heads, kernel, rng.sub("attn"), mode);
  b.mlp = make_mlp<T>(dim, mlp_hidden, rng.sub("mlp"), mode);
  return b;
}

template <class T>
Tensor<T> block_forward(const Block<T>& b, const Tensor<T>& h,
                        const Tensor<T>* w = nullptr) {
  Tensor<T> a = add(attention_forward(b.attn, norm_forward(b.norm1, h, w)), h);
  return add(mlp_forward(b.mlp, norm_forward(b.norm2, a, w)), a);
}

// ---- latent mapping network --------------------------------------------------

template <class T>
struct MappingNetwork {
  std::vector<LinearLayer<T>> layers;  // z -> w, GELU between layers
};

template <class T>
MappingNetwork<T> make_mapping(int z_dim, int dim, int depth, Rng rng) {
  if (depth < 1) throw std::invalid_argument("mapping: depth must be >= 1");
  MappingNetwork<T> m;
  int in = z_dim;
  for (int i = 0; i < depth; ++i) {
    const T gain = i + 1 < depth ? static_cast<T>(std::sqrt(2.0)) : T(1);
    m.layers.push_back(
        make_linear<T>(in, dim, rng.sub("fc" + std::to_string(i)), gain));
    in = dim;
  }
  return m;
}

template <class T>
Tensor<T> mapping_forward(const MappingNetwork<T>& m, const Tensor<T>& z) {
  Tensor<T> x = z;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    x = linear_forward(m.layers[i], x);
    if (i + 1 < m.layers.size()) x = gelu(x);
  }
  return x;
}

// ---- implicit patch decoder ----------------------------------------------------

// Maps a patch embedding y to P*P pixel values: sinusoidal features of the
// in-patch pixel coordinates pass through a 2-layer MLP (sine first
// activation) whose first-layer weights are modulated per sample by
// s = style(y) on the input dimension, then demodulated per output unit.
template <class T>
struct InrDecoder {
  PositionalEncoder<T> fourier;  // pixel coords -> D features
  LinearLayer<T> style;          // D -> D, bias starts at 1
  LinearLayer<T> fc1;            // D -> hidden (= D), sine activation
  LinearLayer<T> fc2;            // hidden -> C
  Tensor<T> coords;              // [P*P, 2], fixed
  int patch = 0, channels = 0;
  bool demodulate = true;
};

template <class T>
InrDecoder<T> make_inr(int dim, int patch, int channels, Rng rng,
                       bool demodulate = true) {
  InrDecoder<T> d;
  d.fourier = make_positional_encoder<T>(2, dim, rng.sub("fourier"));
  d.style = make_linear<T>(dim, dim, rng.sub("style"));
  // Modulation starts near the identity.
  std::fill(d.style.bias.data(), d.style.bias.data() + dim, T(1));
  d.fc1 = make_linear<T>(dim, dim, rng.sub("fc1"));
  d.fc2 = make_linear<T>(dim, channels, rng.sub("fc2"));
  d.coords = pixel_coords<T>(patch);
  d.patch = patch;
  d.channels = channels;
  d.demodulate = demodulate;
  return d;
}

// y: [..., D] -> [..., P*P*channels], values in (-1, 1).
template <class T>
Tensor<T> inr_decode(const InrDecoder<T>& dec, const Tensor<T>& y) {
  const int d = dec.fc1.w.weight.dim(0);
  const int hidden = dec.fc1.w.weight.dim(1);
  if (y.dim(y.ndim() - 1) != d)
    throw std::invalid_argument("inr_decode: embedding has trailing dim " +
                                std::to_string(y.dim(y.ndim() - 1)) +
                                ", expected " + std::to_string(d));
  const int p2 = dec.patch * dec.patch;
  const int64_t m64 = y.size() / d;
  const int m = static_cast<int>(m64);
  Tensor<T> y2 = y.ndim() == 2 ? y : reshape(y, {m, d});

  Tensor<T> e = positional_embed(dec.fourier, dec.coords);  // [P^2, D]
  Tensor<T> s = linear_forward(dec.style, y2);              // [M, D]
  Tensor<T> es = mul(reshape(e, {1, p2, d}), reshape(s, {m, 1, d}));
  Tensor<T> w1 = scale(effective_weight(dec.fc1.w), dec.fc1.lr_gain);
  Tensor<T> raw = matmul(es, w1);  // [M, P^2, hidden]
  if (dec.demodulate) {
    // Norm of each output unit's modulated weight column.
    Tensor<T> norms =
        sqrt(add_scalar(matmul(square(s), square(w1)), static_cast<T>(1e-8)));
    raw = div(raw, reshape(norms, {m, 1, hidden}));
  }
  Tensor<T> h = sin(add(raw, dec.fc1.bias));
  Tensor<T> px = tanh(linear_forward(dec.fc2, h));  // [M, P^2, C]

  Shape out_shape(y.shape().begin(), y.shape().end() - 1);
  out_shape.push_back(p2 * dec.channels);
  return reshape(px, out_shape);
}

// ---- generator -----------------------------------------------------------------

struct GeneratorConfig {
  GenVariant variant = GenVariant::C;
  OutputMap output_map = OutputMap::inr;
  int image_h = 32, image_w = 32, channels = 1;
  int patch = 4;
  int width = 16, heads = 2, blocks = 4;
  int mlp_hidden = 0;  // 0 -> 4 * width
  int z_dim = 16;
  int mapping_depth = 4;
  AttentionKernel kernel = AttentionKernel::dot_product;
  SpectralMode mode = SpectralMode::none;
  bool demodulate = true;
};

template <class T>
struct Generator {
  GeneratorConfig cfg;
  PatchGrid grid;  // o = 0: generated patches tile the image
  MappingNetwork<T> mapping;
  PositionalEncoder<T> pos_enc;
  std::vector<Block<T>> blocks;
  NormSite<T> final_norm;
  LinearLayer<T> out_linear;  // when output_map == linear
  InrDecoder<T> inr;          // when output_map == inr
};

template <class T>
Generator<T> make_generator(const GeneratorConfig& cfg, Rng rng) {
  Generator<T> g{cfg,
                 make_patch_grid(cfg.image_h, cfg.image_w, cfg.channels,
                                 cfg.patch, 0),
                 {}, {}, {}, {}, {}, {}};
  const int hidden = cfg.mlp_hidden > 0 ? cfg.mlp_hidden : 4 * cfg.width;
  const bool modulated = cfg.variant == GenVariant::C;
  g.mapping = make_mapping<T>(cfg.z_dim, cfg.width, cfg.mapping_depth,
                              rng.sub("mapping"));
  g.pos_enc = make_positional_encoder<T>(2, cfg.width, rng.sub("pos"));
  for (int i = 0; i < cfg.blocks; ++i)
    g.blocks.push_back(make_block<T>(cfg.width, cfg.heads, hidden, cfg.kernel,
                                     cfg.mode, modulated,
                                     rng.sub("block" + std::to_string(i))));
  g.final_norm = make_norm_site<T>(cfg.width, modulated, rng.sub("final"));
  if (cfg.output_map == OutputMap::linear)
    g.out_linear = make_linear<T>(
        cfg.width, cfg.patch * cfg.patch * cfg.channels, rng.sub("out"));
  else
    g.inr = make_inr<T>(cfg.width, cfg.patch, cfg.channels, rng.sub("inr"),
                        cfg.demodulate);
  return g;
}

// z: [B, z_dim] -> image [B, H, W, C] in [-1, 1].
template <class T>
Tensor<T> generator_forward(const Generator<T>& g, const Tensor<T>& z) {
  if (z.ndim() != 2 || z.dim(1) != g.cfg.z_dim)
    throw std::invalid_argument("generator: latent shape " +
                                shape_str(z.shape()) + ", expected [B," +
                                std::to_string(g.cfg.z_dim) + "]");
  const int bsz = z.dim(0);
  const int L = g.grid.seq_len();
  const int d = g.cfg.width;

  Tensor<T> w = mapping_forward(g.mapping, z);  // [B, D]
  Tensor<T> pos =
      positional_embed(g.pos_enc, patch_positions<T>(g.grid));  // [L, D]
  Tensor<T> pos3 = reshape(pos, {1, L, d});

  Tensor<T> h;
  switch (g.cfg.variant) {
    case GenVariant::A:
      h = add(pos3, reshape(w, {bsz, 1, d}));
      break;
    case GenVariant::B:
      h = concat(reshape(w, {bsz, 1, d}),
                 add(pos3, Tensor<T>::zeros({bsz, 1, 1})), 1);
      break;
    case GenVariant::C:
      h = add(pos3, Tensor<T>::zeros({bsz, 1, 1}));
      break;
  }
  const Tensor<T>* wp = g.cfg.variant == GenVariant::C ? &w : nullptr;
  for (const auto& blk : g.blocks) h = block_forward(blk, h, wp);
  Tensor<T> y = norm_forward(g.final_norm, h, wp);
  if (g.cfg.variant == GenVariant::B) y = slice(y, 1, 1, L);

  Tensor<T> patches = g.cfg.output_map == OutputMap::linear
                          ? tanh(linear_forward(g.out_linear, y))
                          : inr_decode(g.inr, y);
  return depatchify(g.grid, patches);
}

// ---- discriminator -------------------------------------------------------------

struct DiscriminatorConfig {
  int image_h = 32, image_w = 32, channels = 1;
  int patch = 4;
  int overlap = -1;  // -1 -> patch/2
  int width = 16, heads = 2, blocks = 4;
  int mlp_hidden = 0;  // 0 -> 4 * width
  AttentionKernel kernel = AttentionKernel::l2_tied;
  SpectralMode mode = SpectralMode::isn;
  PadRule pad = PadRule::zero;
};

template <class T>
struct Discriminator {
  DiscriminatorConfig cfg;
  PatchGrid grid;           // with overlap
  LinearLayer<T> embed;     // patch_dim -> D
  Tensor<T> x_class;        // [D], learnable classification token
  PositionalEncoder<T> pos_enc;
  Tensor<T> coords;         // [L+1, 2]: class token at the center (0,0)
  std::vector<Block<T>> blocks;
  LayerNormParams<T> final_ln;
  LinearLayer<T> head;      // D -> 1
};

template <class T>
Discriminator<T> make_discriminator(const DiscriminatorConfig& cfg, Rng rng) {
  DiscriminatorConfig c = cfg;
  if (c.overlap < 0) c.overlap = c.patch / 2;
  Discriminator<T> d{c,
                     make_patch_grid(c.image_h, c.image_w, c.channels, c.patch,
                                     c.overlap),
                     {}, {}, {}, {}, {}, {}, {}};
  const int hidden = c.mlp_hidden > 0 ? c.mlp_hidden : 4 * c.width;
  d.embed = make_linear<T>(d.grid.patch_dim(), c.width, rng.sub("embed"), T(1),
                           c.mode);
  Rng cls = rng.sub("class");
  d.x_class = Tensor<T>::normal({c.width}, cls);
  d.pos_enc = make_positional_encoder<T>(2, c.width, rng.sub("pos"));
  Tensor<T> pp = patch_positions<T>(d.grid);
  d.coords = concat(Tensor<T>::zeros({1, 2}), pp, 0);
  for (int i = 0; i < c.blocks; ++i)
    d.blocks.push_back(make_block<T>(c.width, c.heads, hidden, c.kernel,
                                     c.mode, false,
                                     rng.sub("block" + std::to_string(i))));
  d.final_ln = make_layernorm<T>(c.width);
  d.head = make_linear<T>(c.width, 1, rng.sub("head"), T(1), c.mode);
  return d;
}

// img: [B, H, W, C] -> logits [B].
template <class T>
Tensor<T> discriminator_forward(const Discriminator<T>& d,
                                const Tensor<T>& img) {
  if (img.ndim() != 4 || img.dim(1) != d.cfg.image_h ||
      img.dim(2) != d.cfg.image_w || img.dim(3) != d.cfg.channels)
    throw std::invalid_argument("discriminator: image shape " +
                                shape_str(img.shape()));
  const int bsz = img.dim(0);
  const int L = d.grid.seq_len();
  const int dim = d.cfg.width;

  Tensor<T> p = patchify(d.grid, img, d.cfg.pad);       // [B, L, patch_dim]
  Tensor<T> tok = linear_forward(d.embed, p);           // [B, L, D]
  Tensor<T> cls = add(reshape(d.x_class, {1, 1, dim}),
                      Tensor<T>::zeros({bsz, 1, 1}));   // [B, 1, D]
  Tensor<T> h = concat(cls, tok, 1);                    // [B, L+1, D]
  Tensor<T> pos = positional_embed(d.pos_enc, d.coords);
  h = add(h, reshape(pos, {1, L + 1, dim}));
  for (const auto& blk : d.blocks) h = block_forward(blk, h);
  Tensor<T> h0 = reshape(slice(h, 1, 0, 1), {bsz, dim});
  Tensor<T> y = layernorm(h0, d.final_ln);
  return reshape(linear_forward(d.head, y), {bsz});
}

// ---- parameter traversal -------------------------------------------------------

// pf(name, Tensor&) visits every trainable tensor; sf(name, SpectralWeight&)
// visits every spectral-wrapped weight (for power-iteration updates and for
// checkpointing the u/v/sigma_init buffers). Names are stable across runs.

template <class T, class PF, class SF>
void visit_linear(const std::string& name, LinearLayer<T>& l, PF&& pf,
                  SF&& sf) {
  pf(name + ".weight", l.w.weight);
  pf(name + ".bias", l.bias);
  if (l.w.mode != SpectralMode::none) sf(name + ".weight", l.w);
}

template <class T, class PF, class SF>
void visit_norm_site(const std::string& name, NormSite<T>& n, PF&& pf,
                     SF&& sf) {
  if (n.modulated) {
    visit_linear(name + ".gamma_map", n.sln.gamma_map, pf, sf);
    visit_linear(name + ".beta_map", n.sln.beta_map, pf, sf);
  } else {
    pf(name + ".gamma", n.ln.gamma);
    pf(name + ".beta", n.ln.beta);
  }
}

template <class T, class PF, class SF>
void visit_block(const std::string& name, Block<T>& b, PF&& pf, SF&& sf) {
  visit_norm_site(name + ".norm1", b.norm1, pf, sf);
  visit_norm_site(name + ".norm2", b.norm2, pf, sf);
  visit_linear(name + ".attn.qkv", b.attn.qkv, pf, sf);
  visit_linear(name + ".attn.out", b.attn.out, pf, sf);
  visit_linear(name + ".mlp.fc1", b.mlp.fc1, pf, sf);
  visit_linear(name + ".mlp.fc2", b.mlp.fc2, pf, sf);
}

template <class T, class PF, class SF>
void visit_params(Generator<T>& g, PF&& pf, SF&& sf) {
  for (size_t i = 0; i < g.mapping.layers.size(); ++i)
    visit_linear("mapping.fc" + std::to_string(i), g.mapping.layers[i], pf, sf);
  pf("pos_enc.proj", g.pos_enc.proj);
  pf("pos_enc.bias", g.pos_enc.bias);
  for (size_t i = 0; i < g.blocks.size(); ++i)
    visit_block("blocks." + std::to_string(i), g.blocks[i], pf, sf);
  visit_norm_site("final_norm", g.final_norm, pf, sf);
  if (g.cfg.output_map == OutputMap::linear) {
    visit_linear("out", g.out_linear, pf, sf);
  } else {
    pf("inr.fourier.proj", g.inr.fourier.proj);
    pf("inr.fourier.bias", g.inr.fourier.bias);
    visit_linear("inr.style", g.inr.style, pf, sf);
    visit_linear("inr.fc1", g.inr.fc1, pf, sf);
    visit_linear("inr.fc2", g.inr.fc2, pf, sf);
  }
}

template <class T, class PF, class SF>
void visit_params(Discriminator<T>& d, PF&& pf, SF&& sf) {
  visit_linear("embed", d.embed, pf, sf);
  pf("x_class", d.x_class);
  pf("pos_enc.proj", d.pos_enc.proj);
  pf("pos_enc.bias", d.pos_enc.bias);
  for (size_t i = 0; i < d.blocks.size(); ++i)
    visit_block("blocks." + std::to_string(i), d.blocks[i], pf, sf);
  pf("final_ln.gamma", d.final_ln.gamma);
  pf("final_ln.beta", d.final_ln.beta);
  visit_linear("head", d.head, pf, sf);
}

}  // namespace vitgan
