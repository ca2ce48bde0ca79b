#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "vitgan/gradcheck.hpp"
#include "vitgan/spectral.hpp"

using vitgan::Rng;
using vitgan::SpectralMode;
using vitgan::SpectralWeight;
using vitgan::Tensor;

using T = double;
using Tn = Tensor<T>;

TEST_CASE("power iteration recovers the top singular value of simple matrices") {
  Rng rng(1, "sw");
  {
    Tn w({2, 2}, {3, 0, 0, 1});
    auto sw = vitgan::make_spectral(w, SpectralMode::sn, rng.sub("a"), 50);
    REQUIRE(vitgan::power_iter_sigma(sw, 50) == Catch::Approx(3.0).margin(1e-6));
  }
  {
    Tn w({2, 2}, {0, 2, 0, 0});
    auto sw = vitgan::make_spectral(w, SpectralMode::sn, rng.sub("b"), 50);
    REQUIRE(vitgan::power_iter_sigma(sw, 50) == Catch::Approx(2.0).margin(1e-6));
  }
}

TEST_CASE("power iteration on a zero matrix returns 0 and leaves u alone") {
  Rng rng(2, "sw");
  auto sw = vitgan::make_spectral(Tn::zeros({3, 4}), SpectralMode::none, rng, 0);
  Tn u_before = sw.u.clone();
  REQUIRE(vitgan::power_iter_sigma(sw, 10) == 0.0);
  for (int i = 0; i < 3; ++i) REQUIRE(sw.u[i] == u_before[i]);
}

TEST_CASE("svd oracle handles identities, diagonals and transposes") {
  Tn eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  REQUIRE(vitgan::svd_oracle(eye) == Catch::Approx(1.0).margin(1e-10));
  Tn d({3, 3}, {5, 0, 0, 0, 2, 0, 0, 0, 1});
  REQUIRE(vitgan::svd_oracle(d) == Catch::Approx(5.0).margin(1e-10));
  Rng rng(3, "m");
  Tn w = Tn::normal({5, 9}, rng);
  REQUIRE(vitgan::svd_oracle(w) ==
          Catch::Approx(vitgan::svd_oracle(vitgan::transpose(w))).margin(1e-10));
}

TEST_CASE("power iteration agrees with the Jacobi oracle on random matrices") {
  Rng rng(7, "batch");
  for (int inst = 0; inst < 20; ++inst) {
    Tn w = Tn::normal({8, 12}, rng);
    auto sw = vitgan::make_spectral(w, SpectralMode::sn, rng.sub(std::to_string(inst)), 200);
    double est = vitgan::power_iter_sigma(sw, 200);
    double truth = vitgan::svd_oracle(w);
    REQUIRE(std::abs(est - truth) / truth <= 1e-3);
  }
}

TEST_CASE("isn returns the original weight exactly at initialization") {
  Rng rng(11, "isn");
  Tn w = Tn::normal({6, 10}, rng);
  auto sw = vitgan::make_spectral(w.clone(), SpectralMode::isn, rng.sub("s"), 200);
  Tn eff = vitgan::effective_weight(sw);
  for (int64_t i = 0; i < w.size(); ++i)
    REQUIRE(std::abs(eff[i] - w[i]) <= 1e-12);
}

TEST_CASE("isn rescales moved weights back to the initial spectral norm") {
  Rng rng(13, "isn2");
  // Start at the identity (sigma_init = 1), then swap in a weight with norm 2.
  Tn eye({2, 2}, {1, 0, 0, 1});
  auto sw = vitgan::make_spectral(eye, SpectralMode::isn, rng, 200);
  REQUIRE(sw.sigma_init == Catch::Approx(1.0).margin(1e-9));
  sw.weight = Tn({2, 2}, {2, 0, 0, 0});
  vitgan::power_iter_sigma(sw, 200);
  Tn eff = vitgan::effective_weight(sw);
  REQUIRE(eff.at({0, 0}) == Catch::Approx(1.0).margin(1e-6));
  REQUIRE(eff.at({0, 1}) == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(eff.at({1, 1}) == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("sn output has unit spectral norm, isn preserves the initial norm") {
  Rng rng(17, "modes");
  for (int inst = 0; inst < 5; ++inst) {
    Tn w = Tn::normal({10, 7}, rng);
    auto sn = vitgan::make_spectral(w.clone(), SpectralMode::sn,
                                    rng.sub("sn" + std::to_string(inst)), 200);
    // Drift the weight, re-estimate, re-measure with the oracle.
    Rng drift = rng.sub("drift" + std::to_string(inst));
    Tn delta = Tn::normal(w.shape(), drift);
    for (int64_t i = 0; i < w.size(); ++i)
      sn.weight.data()[i] += 0.05 * delta[i];
    vitgan::power_iter_sigma(sn, 200);
    double measured = vitgan::svd_oracle(vitgan::effective_weight(sn));
    REQUIRE(measured == Catch::Approx(1.0).margin(1e-3));

    auto isn = vitgan::make_spectral(w.clone(), SpectralMode::isn,
                                     rng.sub("isn" + std::to_string(inst)), 200);
    for (int64_t i = 0; i < w.size(); ++i)
      isn.weight.data()[i] += 0.05 * delta[i];
    vitgan::power_iter_sigma(isn, 200);
    double m2 = vitgan::svd_oracle(vitgan::effective_weight(isn));
    REQUIRE(std::abs(m2 - isn.sigma_init) <= 1e-3 * isn.sigma_init);
  }
}

TEST_CASE("isn is scale equivariant at the measured fixed point") {
  Rng rng(19, "equiv");
  Tn w = Tn::normal({6, 6}, rng);
  auto a = vitgan::make_spectral(w.clone(), SpectralMode::isn, rng.sub("a"), 200);
  Tn scaled = w.clone();
  for (int64_t i = 0; i < w.size(); ++i) scaled.data()[i] *= 3.5;
  // Same sigma_init as `a`, weight scaled by c: effective weights must match.
  a.weight = scaled;
  vitgan::power_iter_sigma(a, 200);
  Tn eff_scaled = vitgan::effective_weight(a);
  for (int64_t i = 0; i < w.size(); ++i)
    REQUIRE(eff_scaled[i] == Catch::Approx(w[i]).margin(1e-5));
}

TEST_CASE("persistent u keeps sigma accurate on a slowly drifting weight") {
  Rng rng(23, "walk");
  Tn w = Tn::normal({12, 12}, rng);
  auto sw = vitgan::make_spectral(w, SpectralMode::sn, rng.sub("s"), 1);
  Rng noise_rng = rng.sub("noise");
  for (int step = 0; step < 60; ++step) {
    Tn noise = Tn::normal(w.shape(), noise_rng);
    for (int64_t i = 0; i < w.size(); ++i)
      sw.weight.data()[i] += 0.01 * noise[i];
    double est = vitgan::power_iter_sigma(sw, 1);
    if (step >= 20) {
      double truth = vitgan::svd_oracle(sw.weight);
      REQUIRE(std::abs(est - truth) / truth <= 0.05);
    }
  }
}

TEST_CASE("gradients flow through the normalizer with u, v held fixed") {
  Rng rng(29, "grad");
  Tn w0 = Tn::normal({4, 5}, rng);
  auto sw = vitgan::make_spectral(w0.clone(), SpectralMode::isn, rng.sub("s"), 200);
  Tn m = Tn::normal({4, 5}, rng);
  auto fn = [&](const Tn& x) {
    SpectralWeight<T> probe = sw;
    probe.weight = x;
    return vitgan::sum_all(vitgan::mul(vitgan::effective_weight(probe), m));
  };
  auto rep = vitgan::gradcheck(fn, w0);
  INFO(rep.detail);
  REQUIRE(rep.pass);

  auto sn = vitgan::make_spectral(w0.clone(), SpectralMode::sn, rng.sub("s2"), 200);
  auto fn2 = [&](const Tn& x) {
    SpectralWeight<T> probe = sn;
    probe.weight = x;
    return vitgan::sum_all(vitgan::mul(vitgan::effective_weight(probe), m));
  };
  auto rep2 = vitgan::gradcheck(fn2, w0);
  INFO(rep2.detail);
  REQUIRE(rep2.pass);
}

TEST_CASE("degenerate spectral norms are rejected") {
  Rng rng(31, "deg");
  auto sw = vitgan::make_spectral(Tn::normal({3, 3}, rng), SpectralMode::sn,
                                  rng.sub("s"), 200);
  sw.weight = Tn::zeros({3, 3});
  REQUIRE_THROWS(vitgan::effective_weight(sw));
}
