#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vitgan/tensor.hpp"

namespace vitgan {

struct GradcheckReport {
  bool pass = true;
  double max_rel = 0.0;   // worst relative error among non-tiny entries
  double max_abs = 0.0;   // worst absolute error overall
  int64_t worst_index = -1;
  std::string detail;
};

// Compares the tape gradient of a scalar-valued function against central
// differences. Entries where both gradients are below abs_floor are accepted
// on absolute error alone.
template <class T, class Fn>
GradcheckReport gradcheck(Fn fn, const Tensor<T>& x0, double tol = 1e-4,
                          double h = 1e-5, double abs_floor = 1e-8) {
  GradcheckReport rep;
  Tensor<T> analytic;
  {
    Tape<T> tape;
    Tensor<T> x = x0.clone();
    tape.watch(x);
    Tensor<T> loss = fn(x);
    if (loss.size() != 1)
      throw std::invalid_argument("gradcheck: function must return a scalar");
    analytic = tape.backward(loss).grad(x);
  }
  const int64_t n = x0.size();
  for (int64_t i = 0; i < n; ++i) {
    Tensor<T> xp = x0.clone();
    Tensor<T> xm = x0.clone();
    xp.data()[i] += static_cast<T>(h);
    xm.data()[i] -= static_cast<T>(h);
    const double fp = static_cast<double>(fn(xp).item());
    const double fm = static_cast<double>(fn(xm).item());
    const double numeric = (fp - fm) / (2.0 * h);
    const double got = static_cast<double>(analytic[i]);
    const double abs_err = std::abs(got - numeric);
    const double denom = std::max(std::abs(got), std::abs(numeric));
    const double rel = denom > 0 ? abs_err / denom : 0.0;
    if (abs_err > rep.max_abs) rep.max_abs = abs_err;
    const bool ok = abs_err <= abs_floor || rel <= tol;
    if (!ok && rel > rep.max_rel) {
      rep.max_rel = rel;
      rep.worst_index = i;
      rep.pass = false;
      rep.detail = "entry " + std::to_string(i) + ": analytic " +
                   std::to_string(got) + " vs numeric " + std::to_string(numeric);
    } else if (ok && rel > rep.max_rel && denom > abs_floor) {
      rep.max_rel = rel;
    }
  }
  return rep;
}

// Checks the forward-mode tangent against a finite-difference directional
// derivative. fn must map a tensor to a tensor (any shape).
template <class T, class Fn>
double jvpcheck(Fn fn, const Tensor<T>& x0, const Tensor<T>& v,
                double h = 1e-5) {
  Tensor<T> tangent;
  Tensor<T> y0;
  {
    Tape<T> tape;
    Tensor<T> x = x0.clone();
    tape.watch(x);
    Tensor<T> y = fn(x);
    y0 = y.detach();
    tangent = tape.jvp(x, v, y);
  }
  Tensor<T> xp = x0.clone();
  Tensor<T> xm = x0.clone();
  for (int64_t i = 0; i < x0.size(); ++i) {
    xp.data()[i] += static_cast<T>(h) * v[i];
    xm.data()[i] -= static_cast<T>(h) * v[i];
  }
  Tensor<T> yp = fn(xp);
  Tensor<T> ym = fn(xm);
  double max_rel = 0.0;
  for (int64_t i = 0; i < y0.size(); ++i) {
    const double fd =
        (static_cast<double>(yp[i]) - static_cast<double>(ym[i])) / (2.0 * h);
    const double got = static_cast<double>(tangent[i]);
    const double abs_err = std::abs(got - fd);
    const double denom = std::max({std::abs(got), std::abs(fd), 1e-8});
    max_rel = std::max(max_rel, abs_err / denom);
  }
  return max_rel;
}

}  // namespace vitgan
