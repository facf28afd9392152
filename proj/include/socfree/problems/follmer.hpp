// SPDX-License-Identifier: Apache-2.0
//
// Sampling an unnormalized density rho = exp(-U) as stochastic control.
//
// Controlling dX = u dt + dW from X_0 = 0 over [0, 1] with terminal cost
//   g(x) = U(x) - |x|^2 / 2
// gives the optimal value (d/2) log(2 pi) - log Z and, at the optimum,
// X_1 ~ rho / Z.  The (2 pi)^{d/2} prefactor lives in the importance
// weights (see sampling.hpp), never in the terminal cost, so for the
// standard Gaussian target the cost -- and the trained loss -- is
// exactly zero.
#pragma once

#include <cmath>
#include <utility>

#include "socfree/problem.hpp"
#include "socfree/problems/funnel.hpp"

namespace socfree {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct FollmerProblem {
  UnnormalizedTarget target;
  SocProblem soc;

  // (d/2) log(2 pi): the constant relating the controlled path measure to
  // the Wiener reference; added once per weight, never per step.
  double log_prior_constant() const {
    return 0.5 * static_cast<double>(target.dim) * kLog2Pi;
  }
};

inline FollmerProblem follmer_problem(UnnormalizedTarget target,
                                      double horizon = 1.0) {
  if (target.dim < 1 || !target.potential)
    throw ConfigError("follmer_problem: target needs dim and potential");
  FollmerProblem fp;
  fp.target = std::move(target);
  SocProblem& p = fp.soc;
  p.dim = fp.target.dim;
  p.horizon = horizon;
  p.initial_law = InitialLaw::point(Vec::Zero(p.dim));
  p.volatility = Volatility::identity();
  const auto pot = fp.target.potential;
  p.terminal_cost = [pot](const Vec& x) {
    return pot(x) - 0.5 * x.squaredNorm();
  };
  if (fp.target.score) {
    const auto score = fp.target.score;
    p.terminal_cost_grad = [score](const Vec& x, Vec& out) {
      score(x, out);     // grad log rho
      out = -out - x;    // grad g = grad U - x
    };
  }
  p.tag = fp.target.tag.empty() ? "follmer" : "follmer-" + fp.target.tag;
  p.validate();
  return fp;
}

// Tilt the target by a terminal reward r: rho_r = rho * exp(r), i.e.
// U_r = U - r and g_r = g - r.  Used to fine-tune an already trained
// sampler toward the reweighted density.
inline FollmerProblem finetune_problem(
    const FollmerProblem& base, std::function<double(const Vec&)> reward,
    std::function<void(const Vec&, Vec&)> reward_grad = nullptr) {
  if (!reward) throw ConfigError("finetune_problem: reward not set");
  UnnormalizedTarget t = base.target;
  const auto base_pot = base.target.potential;
  t.potential = [base_pot, reward](const Vec& x) {
    return base_pot(x) - reward(x);
  };
  if (base.target.score && reward_grad) {
    const auto base_score = base.target.score;
    t.score = [base_score, reward_grad](const Vec& x, Vec& out) {
      base_score(x, out);
      Vec gr;
      reward_grad(x, gr);
      out += gr;
    };
    t.score_vjp = nullptr;  // tilted curvature not tracked
  } else {
    t.score = nullptr;
    t.score_vjp = nullptr;
  }
  t.tag = base.target.tag + "-finetune";
  return follmer_problem(std::move(t), base.soc.horizon);
}

}  // namespace socfree
