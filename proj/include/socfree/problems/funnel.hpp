// SPDX-License-Identifier: Apache-2.0
//
// Neal's funnel in d dimensions (normalized, so the true log-partition
// function of exp(-U) is exactly 0):
//
//   x_0 ~ N(0, s^2),   x_i | x_0 ~ N(0, e^{x_0})  for i = 1..d-1.
#pragma once

#include <cmath>
#include <functional>

#include "socfree/common.hpp"

namespace socfree {

// A target density exp(-potential(x)), possibly unnormalized.  `score` is
// grad log density = -grad potential; `score_vjp(x, w)` applies the
// symmetric score Jacobian (the negative Hessian of the potential) to w.
struct UnnormalizedTarget {
  int dim = 0;
  std::function<double(const Vec&)> potential;
  std::function<void(const Vec&, Vec&)> score;
  std::function<void(const Vec&, const Vec&, Vec&)> score_vjp;
  std::string tag;
};

struct FunnelTarget {
  int dim = 10;
  double scale = 3.0;  // std of the neck coordinate x_0
};

inline double funnel_potential(const FunnelTarget& f, const Vec& x) {
  constexpr double log_2pi = 1.8378770664093454835606594728112;
  const double x0 = x[0];
  double sq = 0.0;
  for (int i = 1; i < f.dim; ++i) sq += x[i] * x[i];
  return 0.5 * (x0 / f.scale) * (x0 / f.scale) + 0.5 * log_2pi +
         std::log(f.scale) + 0.5 * (f.dim - 1) * (log_2pi + x0) +
         0.5 * std::exp(-x0) * sq;
}

inline double funnel_log_density(const FunnelTarget& f, const Vec& x) {
  return -funnel_potential(f, x);
}

inline void funnel_score(const FunnelTarget& f, const Vec& x, Vec& out) {
  const double e = std::exp(-x[0]);
  double sq = 0.0;
  for (int i = 1; i < f.dim; ++i) sq += x[i] * x[i];
  out.resize(f.dim);
  out[0] = -x[0] / (f.scale * f.scale) - 0.5 * (f.dim - 1) + 0.5 * e * sq;
  for (int i = 1; i < f.dim; ++i) out[i] = -e * x[i];
}

// out = J_score(x) * w  (J_score is symmetric, = -Hessian of the potential).
inline void funnel_score_vjp(const FunnelTarget& f, const Vec& x, const Vec& w,
                             Vec& out) {
  const double e = std::exp(-x[0]);
  double sq = 0.0, xw = 0.0;
  for (int i = 1; i < f.dim; ++i) {
    sq += x[i] * x[i];
    xw += x[i] * w[i];
  }
  out.resize(f.dim);
  out[0] = (-1.0 / (f.scale * f.scale) - 0.5 * e * sq) * w[0] + e * xw;
  for (int i = 1; i < f.dim; ++i) out[i] = e * x[i] * w[0] - e * w[i];
}

inline UnnormalizedTarget funnel_target(const FunnelTarget& f) {
  UnnormalizedTarget t;
  t.dim = f.dim;
  t.potential = [f](const Vec& x) { return funnel_potential(f, x); };
  t.score = [f](const Vec& x, Vec& out) { funnel_score(f, x, out); };
  t.score_vjp = [f](const Vec& x, const Vec& w, Vec& out) {
    funnel_score_vjp(f, x, w, out);
  };
  t.tag = "funnel";
  return t;
}

// Unnormalized isotropic Gaussian exp(-|x - m|^2 / (2 s^2)); its
// log-partition function is (d/2) log(2 pi) + d log s.
inline UnnormalizedTarget gaussian_target(int dim, double stddev = 1.0,
                                          Vec mean = Vec()) {
  UnnormalizedTarget t;
  t.dim = dim;
  const Vec m = mean.size() ? mean : Vec::Zero(dim);
  const double inv_s2 = 1.0 / (stddev * stddev);
  if (stddev == 1.0 && m.isZero(0.0)) {
    // Keep the standard case free of spurious rounding: U(x) = 0.5 |x|^2.
    t.potential = [](const Vec& x) { return 0.5 * x.squaredNorm(); };
    t.score = [](const Vec& x, Vec& out) { out = -x; };
    t.score_vjp = [](const Vec&, const Vec& w, Vec& out) { out = -w; };
  } else {
    t.potential = [m, inv_s2](const Vec& x) {
      return 0.5 * inv_s2 * (x - m).squaredNorm();
    };
    t.score = [m, inv_s2](const Vec& x, Vec& out) { out = -inv_s2 * (x - m); };
    t.score_vjp = [inv_s2](const Vec&, const Vec& w, Vec& out) {
      out = -inv_s2 * w;
    };
  }
  t.tag = "gaussian";
  return t;
}

}  // namespace socfree
