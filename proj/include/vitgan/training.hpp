#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "augment.hpp"
#include "models.hpp"
#include "rng.hpp"
#include "spectral.hpp"
#include "tensor.hpp"

namespace vitgan {

struct TrainingConfig {
  int batch_size = 32;
  double lr = 0.002;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  bool use_bcr = true;
  double bcr_lambda_real = 10.0;
  double bcr_lambda_fake = 10.0;
  bool use_diffaug = true;
  AugConfig aug;  // aug.prob plays the augmentation-probability role
  bool use_r1 = false;
  double r1_gamma = 10.0;
  double ema_decay = 0.999;
  int steps = 200;
  uint64_t seed = 1;
};

inline void validate_training_config(const TrainingConfig& c) {
  if (c.batch_size < 1) throw std::invalid_argument("training: batch_size must be >= 1");
  if (!(c.lr >= 0.0)) throw std::invalid_argument("training: lr must be >= 0");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0))
    throw std::invalid_argument("training: adam_beta1 must lie in [0,1)");
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0))
    throw std::invalid_argument("training: adam_beta2 must lie in [0,1)");
  if (!(c.adam_eps > 0.0)) throw std::invalid_argument("training: adam_eps must be > 0");
  if (!(c.bcr_lambda_real >= 0.0 && c.bcr_lambda_fake >= 0.0))
    throw std::invalid_argument("training: bcr lambdas must be >= 0");
  if (!(c.r1_gamma >= 0.0)) throw std::invalid_argument("training: r1_gamma must be >= 0");
  if (!(c.ema_decay >= 0.0 && c.ema_decay <= 1.0))
    throw std::invalid_argument("training: ema_decay must lie in [0,1]");
  if (c.steps < 0) throw std::invalid_argument("training: steps must be >= 0");
  validate_aug_config(c.aug);
}

// Non-saturating logistic GAN losses over raw logits:
//   d = mean softplus(-real) + mean softplus(fake)
//   g = mean softplus(-fake)
template <class T>
struct GanLosses {
  Tensor<T> d_loss, g_loss;
};

template <class T>
GanLosses<T> nonsat_logistic_losses(const Tensor<T>& real_logits,
                                    const Tensor<T>& fake_logits) {
  GanLosses<T> out;
  out.d_loss = add(mean_all(softplus(neg(real_logits))), mean_all(softplus(fake_logits)));
  out.g_loss = mean_all(softplus(neg(fake_logits)));
  return out;
}

// Gradient penalty (gamma/2) * E_x ||d D(x)/d x||^2 for any scoring function
// x -> per-sample logits, computed with a differentiable backward pass so the
// penalty itself back-propagates into the function's parameters on the
// caller's tape.
template <class T, class F>
Tensor<T> r1_penalty(Tape<T>& tape, F&& score, const Tensor<T>& real, double gamma) {
  if (real.ndim() < 2)
    throw std::invalid_argument("r1_penalty: expected a batched input, got " +
                                shape_str(real.shape()));
  Tensor<T> x = real.clone();
  tape.watch(x);
  Tensor<T> logits = score(x);
  GradientMap<T> gm = tape.backward(sum_all(logits), /*create_graph=*/true);
  Tensor<T> gx = gm.grad(x);  // zeros when the score ignores its input
  const int b = real.dim(0);
  const int inner = static_cast<int>(real.size() / b);
  Tensor<T> per_sample = reduce_sum(reshape(mul(gx, gx), {b, inner}), -1, false);
  return scale(mean_all(per_sample), static_cast<T>(gamma / 2.0));
}

// Balanced consistency penalty: ONE augmentation draw is applied to both the
// real and fake batches, and the scoring function is asked to give the same
// logits before and after.
template <class T, class F>
Tensor<T> bcr_penalty(F&& score, const Tensor<T>& real, const Tensor<T>& fake,
                      const AugConfig& aug, double lambda_real, double lambda_fake,
                      Rng rng) {
  if (real.ndim() != 4 || fake.ndim() != 4 || real.shape() != fake.shape())
    throw std::invalid_argument("bcr_penalty: real and fake batches must share shape");
  auto ps = draw_aug_params(real.dim(0), real.dim(1), real.dim(2), aug, rng);
  Tensor<T> dr = sub(score(real), score(apply_augment(real, ps, aug)));
  Tensor<T> df = sub(score(fake), score(apply_augment(fake, ps, aug)));
  return add(scale(mean_all(mul(dr, dr)), static_cast<T>(lambda_real)),
             scale(mean_all(mul(df, df)), static_cast<T>(lambda_fake)));
}

// Adam with bias correction.  Moment slots are keyed by parameter name so an
// optimizer survives parameter-list rebuilds.  A non-finite gradient aborts
// the run with the offending parameter named.
template <class T>
struct AdamSlots {
  Tensor<T> m, v;
};

template <class T>
struct Adam {
  double lr = 0.002;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
  int64_t t = 0;
  std::map<std::string, AdamSlots<T>> slots;
};

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

template <class T>
void adam_step(Adam<T>& opt, const NamedParams<T>& params, const GradientMap<T>& grads,
               int64_t train_step_index) {
  opt.t += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.t));
  for (const auto& [name, p] : params) {
    Tensor<T> g = grads.grad(*p);
    auto& slot = opt.slots[name];
    if (!slot.m.defined()) {
      slot.m = Tensor<T>::zeros(p->shape());
      slot.v = Tensor<T>::zeros(p->shape());
    } else if (slot.m.shape() != p->shape()) {
      throw std::invalid_argument("adam_step: slot shape mismatch for " + name);
    }
    const T* pg = g.data();
    T* pm = slot.m.data();
    T* pv = slot.v.data();
    T* px = p->data();
    const int64_t sz = p->size();
    for (int64_t i = 0; i < sz; ++i) {
      const double gi = static_cast<double>(pg[i]);
      if (!std::isfinite(gi))
        throw NumericError("non-finite gradient in parameter " + name, "adam_step",
                           train_step_index);
      const double m = opt.beta1 * static_cast<double>(pm[i]) + (1.0 - opt.beta1) * gi;
      const double v = opt.beta2 * static_cast<double>(pv[i]) + (1.0 - opt.beta2) * gi * gi;
      pm[i] = static_cast<T>(m);
      pv[i] = static_cast<T>(v);
      px[i] = static_cast<T>(static_cast<double>(px[i]) -
                             opt.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps));
    }
  }
}

// ema <- decay * ema + (1 - decay) * value, in place.
template <class T>
void ema_update(Tensor<T>& ema, const Tensor<T>& value, double decay) {
  if (ema.shape() != value.shape())
    throw std::invalid_argument("ema_update: shape mismatch " + shape_str(ema.shape()) +
                                " vs " + shape_str(value.shape()));
  T* pe = ema.data();
  const T* pv = value.data();
  const int64_t sz = ema.size();
  for (int64_t i = 0; i < sz; ++i)
    pe[i] = static_cast<T>(decay * static_cast<double>(pe[i]) +
                           (1.0 - decay) * static_cast<double>(pv[i]));
}

namespace detail {

// Re-detaches watched parameters when a phase ends (normally or by
// exception): a tensor still pointing at a destroyed tape poisons the next
// watch().  detach() keeps the storage the optimizer just updated in place.
template <class T>
struct WatchGuard {
  std::vector<Tensor<T>*> ts;
  WatchGuard() = default;
  WatchGuard(const WatchGuard&) = delete;
  WatchGuard& operator=(const WatchGuard&) = delete;
  ~WatchGuard() {
    for (auto* t : ts) *t = t->detach();
  }
};

}  // namespace detail

template <class M, class T>
NamedParams<T> collect_params(M& model, NamedParams<T>& out) {
  visit_params(
      model, [&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); },
      [](const std::string&, SpectralWeight<T>&) {});
  return out;
}

// Deep copies: fresh buffers for every trainable tensor and the spectral u/v
// state, so updates to one copy never leak into the other.
template <class T>
Generator<T> clone_generator(const Generator<T>& g) {
  Generator<T> c = g;
  visit_params(
      c, [](const std::string&, Tensor<T>& t) { t = t.clone(); },
      [](const std::string&, SpectralWeight<T>& sw) {
        sw.u = sw.u.clone();
        sw.v = sw.v.clone();
      });
  return c;
}

template <class T>
Discriminator<T> clone_discriminator(const Discriminator<T>& d) {
  Discriminator<T> c = d;
  visit_params(
      c, [](const std::string&, Tensor<T>& t) { t = t.clone(); },
      [](const std::string&, SpectralWeight<T>& sw) {
        sw.u = sw.u.clone();
        sw.v = sw.v.clone();
      });
  return c;
}

// Model-level EMA: walks both traversals in lockstep (same order by
// construction) and blends every trainable tensor.
template <class T>
void ema_update(Generator<T>& ema, Generator<T>& value, double decay) {
  NamedParams<T> pe, pv;
  collect_params(ema, pe);
  collect_params(value, pv);
  if (pe.size() != pv.size())
    throw std::invalid_argument("ema_update: parameter lists differ in size");
  for (size_t i = 0; i < pe.size(); ++i) {
    if (pe[i].first != pv[i].first)
      throw std::invalid_argument("ema_update: parameter name mismatch at " +
                                  pe[i].first);
    ema_update(*pe[i].second, *pv[i].second, decay);
  }
}

struct MetricsRow {
  int64_t step = 0;
  double d_loss = 0, g_loss = 0, bcr = 0;
  double d_grad_norm = 0, g_grad_norm = 0;
  double sigma_min = 0, sigma_max = 0;
};

template <class T>
struct TrainState {
  TrainingConfig cfg;
  Generator<T> gen;
  Generator<T> ema_gen;
  Discriminator<T> disc;
  Adam<T> opt_g, opt_d;
  int64_t step = 0;
  Rng rng;  // stepwise streams branch off this root
  std::vector<MetricsRow> history;
};

template <class T>
TrainState<T> make_train_state(const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg,
                               const TrainingConfig& tcfg) {
  validate_training_config(tcfg);
  if (gcfg.image_h != dcfg.image_h || gcfg.image_w != dcfg.image_w ||
      gcfg.channels != dcfg.channels)
    throw std::invalid_argument("training: generator and discriminator image shapes differ");
  TrainState<T> s;
  s.cfg = tcfg;
  Rng root(tcfg.seed, "train");
  s.gen = make_generator<T>(gcfg, root.sub("init/gen"));
  s.disc = make_discriminator<T>(dcfg, root.sub("init/disc"));
  s.ema_gen = clone_generator(s.gen);
  s.opt_g.lr = s.opt_d.lr = tcfg.lr;
  s.opt_g.beta1 = s.opt_d.beta1 = tcfg.adam_beta1;
  s.opt_g.beta2 = s.opt_d.beta2 = tcfg.adam_beta2;
  s.opt_g.eps = s.opt_d.eps = tcfg.adam_eps;
  s.rng = root.sub("loop");
  return s;
}

namespace detail {

template <class T>
double grad_norm(const NamedParams<T>& params, const GradientMap<T>& grads) {
  double acc = 0;
  for (const auto& [name, p] : params) {
    Tensor<T> g = grads.grad(*p);
    const T* pg = g.data();
    for (int64_t i = 0; i < g.size(); ++i)
      acc += static_cast<double>(pg[i]) * static_cast<double>(pg[i]);
  }
  return std::sqrt(acc);
}

}  // namespace detail

// One adversarial step: refresh spectral estimates, update D on the
// non-saturating loss (+ bCR, + optional R1), then update G on a fresh z
// through the frozen D, then blend the EMA copy.  Each phase records on its
// own tape; fakes always come from the live generator, never the EMA copy.
template <class T>
MetricsRow train_step(TrainState<T>& state, const Tensor<T>& real) {
  const TrainingConfig& cfg = state.cfg;
  const DiscriminatorConfig& dc = state.disc.cfg;
  if (real.ndim() != 4 || real.dim(1) != dc.image_h || real.dim(2) != dc.image_w ||
      real.dim(3) != dc.channels)
    throw std::invalid_argument("train_step: real batch " + shape_str(real.shape()) +
                                " does not match configured image shape");
  const int b = real.dim(0), h = real.dim(1), w = real.dim(2);
  const int64_t step = state.step + 1;
  const std::string tag = std::to_string(step);
  MetricsRow row;
  row.step = step;

  // Spectral refresh before anything touches a tape; u, v stay plain buffers.
  double smin = std::numeric_limits<double>::infinity(), smax = 0;
  bool any_spectral = false;
  auto refresh = [&](const std::string&, SpectralWeight<T>& sw) {
    const double s = static_cast<double>(power_iter_sigma(sw, sw.iters_per_step));
    smin = std::min(smin, s);
    smax = std::max(smax, s);
    any_spectral = true;
  };
  auto skip_param = [](const std::string&, Tensor<T>&) {};
  visit_params(state.disc, skip_param, refresh);
  visit_params(state.gen, skip_param, refresh);
  row.sigma_min = any_spectral ? smin : 0.0;
  row.sigma_max = any_spectral ? smax : 0.0;

  NamedParams<T> dparams, gparams;
  collect_params(state.disc, dparams);
  collect_params(state.gen, gparams);

  // --- discriminator phase ---
  {
    Tape<T> tape;
    detail::WatchGuard<T> guard;  // declared after tape: detaches first on unwind
    for (auto& [name, p] : dparams) {
      tape.watch(*p);
      guard.ts.push_back(p);
    }
    Rng zr = state.rng.sub("z_d/" + tag);
    Tensor<T> z = Tensor<T>::normal({b, state.gen.cfg.z_dim}, zr);
    Tensor<T> fake = generator_forward(state.gen, z);  // G params detached: no tracking
    Tensor<T> real_in = real, fake_in = fake;
    if (cfg.use_diffaug) {
      Rng ar = state.rng.sub("aug_d/" + tag);
      auto pr = draw_aug_params(b, h, w, cfg.aug, ar);
      auto pf = draw_aug_params(b, h, w, cfg.aug, ar);
      real_in = apply_augment(real, pr, cfg.aug);
      fake_in = apply_augment(fake, pf, cfg.aug);
    }
    auto score = [&](const Tensor<T>& img) {
      return discriminator_forward(state.disc, img);
    };
    GanLosses<T> gl = nonsat_logistic_losses(score(real_in), score(fake_in));
    Tensor<T> total = gl.d_loss;
    if (cfg.use_bcr) {
      Tensor<T> pen = bcr_penalty(score, real, fake, cfg.aug, cfg.bcr_lambda_real,
                                  cfg.bcr_lambda_fake, state.rng.sub("bcr/" + tag));
      row.bcr = static_cast<double>(pen.item());
      total = add(total, pen);
    }
    if (cfg.use_r1) total = add(total, r1_penalty(tape, score, real, cfg.r1_gamma));
    GradientMap<T> gm = tape.backward(total);
    row.d_loss = static_cast<double>(gl.d_loss.item());
    row.d_grad_norm = detail::grad_norm(dparams, gm);
    adam_step(state.opt_d, dparams, gm, step);
  }

  // --- generator phase ---
  {
    Tape<T> tape;
    detail::WatchGuard<T> guard;
    for (auto& [name, p] : gparams) {
      tape.watch(*p);
      guard.ts.push_back(p);
    }
    Rng zr = state.rng.sub("z_g/" + tag);
    Tensor<T> z = Tensor<T>::normal({b, state.gen.cfg.z_dim}, zr);
    Tensor<T> fake = generator_forward(state.gen, z);
    Tensor<T> fake_in = fake;
    if (cfg.use_diffaug) {
      Rng ar = state.rng.sub("aug_g/" + tag);
      fake_in = diff_augment(fake, cfg.aug, ar);
    }
    Tensor<T> logits = discriminator_forward(state.disc, fake_in);  // D detached: frozen
    Tensor<T> g_loss = mean_all(softplus(neg(logits)));
    GradientMap<T> gm = tape.backward(g_loss);
    row.g_loss = static_cast<double>(g_loss.item());
    row.g_grad_norm = detail::grad_norm(gparams, gm);
    adam_step(state.opt_g, gparams, gm, step);
  }

  ema_update(state.ema_gen, state.gen, cfg.ema_decay);
  state.step = step;
  state.history.push_back(row);
  return row;
}

// Images from z ~ N(0, I) in [-1, 1]; pass state.ema_gen for evaluation
// samples and state.gen for training-time diagnostics.
template <class T>
Tensor<T> sample_images(const Generator<T>& gen, int n, Rng rng) {
  if (n < 1) throw std::invalid_argument("sample_images: n must be >= 1");
  Tensor<T> z = Tensor<T>::normal({n, gen.cfg.z_dim}, rng);
  return generator_forward(gen, z);
}

}  // namespace vitgan
