// SPDX-License-Identifier: Apache-2.0
//
// Linear Ornstein-Uhlenbeck test problem with a linear terminal cost:
//
//   dX = (A X + sigma0 u) dt + sigma0 dW,   f = 0,   g(x) = gamma . x.
//
// The optimal control is state-independent and known in closed form,
//   u*(t) = -sigma0^T exp(A^T (T - t)) gamma,
// which makes the problem a sharp end-to-end oracle for trainers.
#pragma once

#include <functional>
#include <utility>

#include <unsupported/Eigen/MatrixFunctions>

#include "socfree/problem.hpp"

namespace socfree {

struct LinearOuSpec {
  int dim = 8;
  Mat A;       // drift matrix
  Vec gamma;   // terminal cost direction
  Mat sigma0;  // volatility (invertible)
  double horizon = 1.0;
  InitialLaw mu0;

  static LinearOuSpec standard(int dim) {
    LinearOuSpec s;
    s.dim = dim;
    s.A = 0.2 * Mat::Identity(dim, dim);
    s.gamma = Vec::Ones(dim);
    s.sigma0 = Mat::Identity(dim, dim);
    s.horizon = 1.0;
    s.mu0 = InitialLaw::gaussian(Vec::Zero(dim),
                                 Vec::Constant(dim, std::sqrt(0.5)));
    return s;
  }
};

inline SocProblem make_linear_ou_problem(const LinearOuSpec& spec) {
  SocProblem p;
  p.dim = spec.dim;
  p.horizon = spec.horizon;
  p.initial_law = spec.mu0;
  p.volatility = spec.sigma0.isIdentity(0.0)
                     ? Volatility::identity()
                     : Volatility::constant(spec.sigma0);
  const Mat A = spec.A;
  p.base_drift = [A](double, const Vec& x, Vec& out) { out.noalias() = A * x; };
  p.base_drift_vjp = [A](double, const Vec&, const Vec& v, Vec& out) {
    out.noalias() = A.transpose() * v;
  };
  const Vec gamma = spec.gamma;
  p.terminal_cost = [gamma](const Vec& x) { return gamma.dot(x); };
  p.terminal_cost_grad = [gamma](const Vec&, Vec& out) { out = gamma; };
  p.tag = "linear-ou";
  p.validate();
  return p;
}

// Closed-form optimal control (independent of x).
inline std::function<Vec(double, const Vec&)> linear_ou_optimal_control(
    const LinearOuSpec& spec) {
  const Mat At = spec.A.transpose();
  const Mat s0t = spec.sigma0.transpose();
  const Vec gamma = spec.gamma;
  const double T = spec.horizon;
  return [At, s0t, gamma, T](double t, const Vec&) -> Vec {
    const Mat e = (At * (T - t)).exp();
    return -(s0t * (e * gamma));
  };
}

// Optimal value J(u*) = E[gamma . X_T under u*] + control energy; for the
// linear problem it reduces to a quadrature over the matrix exponential:
//   J* = gamma . exp(A T) E[X_0] - 1/2 integral_0^T |u*(t)|^2 dt.
inline double linear_ou_optimal_value(const LinearOuSpec& spec,
                                      int quad_steps = 4096) {
  const auto ustar = linear_ou_optimal_control(spec);
  const double T = spec.horizon;
  const Vec x_dummy = Vec::Zero(spec.dim);
  // Simpson quadrature of |u*(t)|^2 (smooth integrand).
  if (quad_steps % 2 != 0) ++quad_steps;
  double s = 0.0;
  for (int k = 0; k <= quad_steps; ++k) {
    const double t = T * static_cast<double>(k) / quad_steps;
    const double w = (k == 0 || k == quad_steps) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    s += w * ustar(t, x_dummy).squaredNorm();
  }
  const double energy = s * (T / quad_steps) / 3.0;
  const Mat eAT = (spec.A * T).exp();
  return spec.gamma.dot(eAT * spec.mu0.mean) - 0.5 * energy;
}

}  // namespace socfree
