// SPDX-License-Identifier: Apache-2.0
//
// Control-affine stochastic control problem:
//
//   dX_t = (b(t, X_t) + sigma_t u(t, X_t)) dt + sigma_t dW_t,   X_0 ~ mu0,
//   J(u)  = E[ integral (1/2 |u|^2 + f(t, X_t)) dt + g(X_T) ].
//
// The volatility is state-independent and invertible; costs are smooth.
#pragma once

#include <functional>
#include <stdexcept>
#include <string>

#include "socfree/common.hpp"
#include "socfree/rng.hpp"

namespace socfree {

struct InitialLaw {
  enum class Kind { point_mass, diagonal_gaussian };
  Kind kind = Kind::point_mass;
  Vec mean;    // the point, or the Gaussian mean
  Vec stddev;  // per-coordinate std (diagonal_gaussian only)

  static InitialLaw point(Vec x0) {
    InitialLaw law;
    law.kind = Kind::point_mass;
    law.mean = std::move(x0);
    return law;
  }
  static InitialLaw gaussian(Vec mean, Vec stddev) {
    InitialLaw law;
    law.kind = Kind::diagonal_gaussian;
    law.mean = std::move(mean);
    law.stddev = std::move(stddev);
    return law;
  }

  int dim() const { return static_cast<int>(mean.size()); }

  // Point masses consume no randomness, so deterministic problems stay
  // deterministic without a dedicated stream.
  void sample(PhiloxRng& rng, Vec& out) const {
    if (kind == Kind::point_mass) {
      out = mean;
      return;
    }
    out.resize(mean.size());
    for (Eigen::Index j = 0; j < mean.size(); ++j) {
      out[j] = mean[j] + stddev[j] * rng.normal();
    }
  }
};

// State-independent volatility sigma_t.  The identity and constant-matrix
// cases are dispatched without allocation; a time-varying callback is
// supported for generality.
struct Volatility {
  enum class Kind { identity, constant, time_varying };
  Kind kind = Kind::identity;
  Mat sigma;                       // constant case
  std::function<Mat(double)> fn;   // time-varying case

  static Volatility identity() { return Volatility{}; }
  static Volatility constant(Mat s) {
    Volatility v;
    v.kind = Kind::constant;
    v.sigma = std::move(s);
    return v;
  }
  static Volatility time_varying(std::function<Mat(double)> f) {
    Volatility v;
    v.kind = Kind::time_varying;
    v.fn = std::move(f);
    return v;
  }

  bool is_identity() const { return kind == Kind::identity; }

  Mat matrix(double t, int dim) const {
    switch (kind) {
      case Kind::identity: return Mat::Identity(dim, dim);
      case Kind::constant: return sigma;
      default: return fn(t);
    }
  }

  // out = sigma_t * v (out must not alias v)
  void mult(double t, const Vec& v, Vec& out) const {
    switch (kind) {
      case Kind::identity: out = v; break;
      case Kind::constant: out.noalias() = sigma * v; break;
      default: out = fn(t) * v; break;
    }
  }

  // out = sigma_t^T * v
  void mult_transpose(double t, const Vec& v, Vec& out) const {
    switch (kind) {
      case Kind::identity: out = v; break;
      case Kind::constant: out.noalias() = sigma.transpose() * v; break;
      default: out = fn(t).transpose() * v; break;
    }
  }

  // x += sigma_t * v (fused into the Euler update; v may be any vector
  // expression, e.g. a map over Wiener increments)
  template <class V>
  void add_mult(double t, const V& v, Vec& x) const {
    switch (kind) {
      case Kind::identity: x += v; break;
      case Kind::constant: x.noalias() += sigma * v; break;
      default: x += fn(t) * v; break;
    }
  }
};

struct SocProblem {
  int dim = 0;
  double horizon = 1.0;
  InitialLaw initial_law;
  Volatility volatility;

  // Base drift b(t, x); empty means b = 0.
  std::function<void(double, const Vec&, Vec&)> base_drift;
  // out = (d_x b)^T v at (t, x); required by the pathwise estimator when
  // base_drift is set.
  std::function<void(double, const Vec&, const Vec&, Vec&)> base_drift_vjp;

  // Running state cost f(t, x); empty means f = 0.  The gradient is required
  // by the pathwise estimator when f is set.
  std::function<double(double, const Vec&)> running_cost;
  std::function<void(double, const Vec&, Vec&)> running_cost_grad;

  // Terminal cost g(x) and its gradient (gradient needed by the pathwise
  // estimator only).
  std::function<double(const Vec&)> terminal_cost;
  std::function<void(const Vec&, Vec&)> terminal_cost_grad;

  std::string tag;  // short identifier used in artifact metadata

  void validate() const {
    if (dim < 1) throw ConfigError("SocProblem: dim must be >= 1");
    if (!(horizon > 0.0)) throw ConfigError("SocProblem: horizon must be > 0");
    if (!terminal_cost) throw ConfigError("SocProblem: terminal_cost not set");
    if (initial_law.dim() != dim)
      throw ConfigError("SocProblem: initial law dimension mismatch");
    if (initial_law.kind == InitialLaw::Kind::diagonal_gaussian &&
        initial_law.stddev.size() != dim)
      throw ConfigError("SocProblem: initial stddev dimension mismatch");
    // Invertibility probe at a few representative times.
    if (volatility.kind != Volatility::Kind::identity) {
      for (double t : {0.0, 0.5 * horizon, horizon}) {
        const Mat s = volatility.matrix(t, dim);
        if (s.rows() != dim || s.cols() != dim)
          throw ConfigError("SocProblem: volatility must be square d x d");
        Eigen::FullPivLU<Mat> lu(s);
        if (!lu.isInvertible())
          throw ConfigError("SocProblem: volatility is singular at t=" +
                            std::to_string(t));
      }
    }
  }
};

}  // namespace socfree
