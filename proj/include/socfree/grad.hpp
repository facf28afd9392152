// SPDX-License-Identifier: Apache-2.0
//
// Gradient estimators for J(u_theta) = E[ int (1/2 |u|^2 + f) dt + g(X_T) ].
//
// simfree_gradient - on-policy score-function estimator.  Per evaluated
//   step it needs only two parameter-VJPs of the control; nothing is
//   retained across steps, so per-walker memory is O(d + |theta|)
//   independent of K.  Unbiased for the time-discretized objective at any
//   step count.  Two algebraically identical assemblies are provided
//   (`direct` and `stopgrad_loss`); they differ only in where scalar
//   factors are applied, which makes their near-exact agreement a sharp
//   self-check of the implementation.
//
// vanilla_gradient - pathwise/reparameterized baseline that differentiates
//   through the unrolled Euler scheme (forward pass storing all states, then
//   an adjoint sweep).  Per-walker memory grows linearly in K by design.
//
// offpolicy_objective - importance-weighted evaluation of J(u) along
//   trajectories driven by a different control v (Girsanov reweighting).
#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <vector>

#include "socfree/common.hpp"
#include "socfree/simulate.hpp"

namespace socfree {

enum class SimfreePath { direct, stopgrad_loss };

struct GradOptions {
  SimfreePath path = SimfreePath::direct;
  double divergence_guard = 1e6;
  bool strict = false;
  int threads = 0;
  bool with_second_moment = false;  // per-coordinate E[g_i^2] for std errors
};

struct GradEstimate {
  Vec grad;                      // d J / d theta estimate
  double loss = std::numeric_limits<double>::quiet_NaN();
  double stopgrad_loss = std::numeric_limits<double>::quiet_NaN();
  int n_total = 0;
  int n_kept = 0;
  // Per-walker step records retained by the estimator: 0 for the
  // simulation-free estimator, K for the pathwise one.
  int stored_step_records = 0;
  Vec second_moment;  // per-coordinate mean of squared contributions
  double wall_seconds = 0.0;

  int n_diverged() const { return n_total - n_kept; }
  // Per-coordinate standard error of the gradient mean (needs
  // with_second_moment).
  Vec std_error() const {
    if (second_moment.size() == 0 || n_kept < 2)
      throw std::logic_error("GradEstimate: second moment not accumulated");
    Vec var = (second_moment - grad.cwiseAbs2()) *
              (static_cast<double>(n_kept) / (n_kept - 1.0));
    return (var.cwiseMax(0.0) / static_cast<double>(n_kept)).cwiseSqrt();
  }
};

namespace detail {

inline SimOptions to_sim_options(const GradOptions& o) {
  SimOptions s;
  s.divergence_guard = o.divergence_guard;
  s.strict = o.strict;
  s.threads = o.threads;
  return s;
}

inline void check_batch_shapes(const SocProblem& problem,
                               const ControlPolicy& policy,
                               const TimeGrid& grid, const WienerPath& wiener) {
  if (policy.dim() != problem.dim)
    throw ConfigError("gradient: policy/problem dimension mismatch");
  if (wiener.dim != problem.dim)
    throw ConfigError("gradient: wiener dimension mismatch");
  if (wiener.steps != grid.steps())
    throw ConfigError("gradient: wiener/grid step mismatch");
}

// Deterministic mean of per-block accumulated vectors; divides by n_kept.
inline void fold_mean(std::vector<Vec>& parts, int n_kept, Vec& out) {
  pairwise_fold(parts, [](Vec& a, const Vec& b) { a += b; });
  out = parts.empty() ? Vec() : parts[0];
  if (n_kept > 0) out /= static_cast<double>(n_kept);
}

// Sum of w over walkers with zeros at diverged entries, divided by count.
inline double masked_mean(const Vec& w, int n_kept) {
  const double s = pairwise_sum({w.data(), static_cast<std::size_t>(w.size())});
  return n_kept > 0 ? s / static_cast<double>(n_kept)
                    : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

inline GradEstimate simfree_gradient(const SocProblem& problem,
                                     const ControlPolicy& policy,
                                     const TimeGrid& grid,
                                     const WienerPath& wiener,
                                     const RngSeq& seq,
                                     const GradOptions& opts = {}) {
  detail::check_batch_shapes(problem, policy, grid, wiener);
  const auto t_start = std::chrono::steady_clock::now();
  const int n = wiener.walkers;
  const std::size_t P = policy.params().size();
  const SimOptions sim_opts = detail::to_sim_options(opts);
  const bool stopgrad = opts.path == SimfreePath::stopgrad_loss;

  const int nb = num_blocks(n);
  std::vector<Vec> block_grad(nb), block_sq;
  if (opts.with_second_moment) block_sq.resize(nb);
  Vec w_all = Vec::Zero(n);        // per-walker cost, 0 where diverged
  Vec sg_all = Vec::Zero(n);       // per-walker surrogate value
  std::vector<int> block_kept(nb, 0);

  parallel_blocks(n, opts.threads, [&](int b, int begin, int end) {
    WalkerScratch ws;
    ws.prepare(policy, problem.dim);
    WalkerAccum acc;
    Vec g1 = Vec::Zero(P);  // per-walker direct term
    Vec s = Vec::Zero(P);   // per-walker score term  sum dtheta(u_k) . dW_k
    Vec vtmp(problem.dim), dw(problem.dim);
    block_grad[b].setZero(P);
    if (opts.with_second_moment) block_sq[b].setZero(P);
    std::span<double> g1s{g1.data(), P}, ss{s.data(), P};
    for (int i = begin; i < end; ++i) {
      g1.setZero();
      s.setZero();
      const bool ok = run_walker(
          problem, policy, grid, wiener, i, seq, sim_opts, ws, acc,
          [&](int, double, double dt, const auto& dW, WalkerScratch& w) {
            if (stopgrad) {
              // Surrogate-loss assembly: the dt of the energy term scales
              // at the accumulation site, cotangents stay raw.
              policy.vjp_params(*w.tape, w.u, dt, g1s);
            } else {
              // Direct assembly: cotangent dt * u_k, unit scale.
              vtmp = dt * w.u;
              policy.vjp_params(*w.tape, vtmp, 1.0, g1s);
            }
            dw = dW;
            policy.vjp_params(*w.tape, dw, 1.0, ss);
          });
      if (!ok) continue;
      const double w_i = acc.Abar + acc.Bbar + acc.terminal;
      w_all[i] = w_i;
      sg_all[i] = acc.A + w_i * acc.C;
      ++block_kept[b];
      if (stopgrad) {
        // d/dtheta [ A + stopgrad(w) * C ] accumulated term by term.
        block_grad[b] += g1;
        block_grad[b] += w_i * s;
        if (opts.with_second_moment) {
          g1 += w_i * s;  // full contribution, for the second moment only
          block_sq[b] += g1.cwiseAbs2();
        }
      } else {
        g1 += w_i * s;
        block_grad[b] += g1;
        if (opts.with_second_moment) block_sq[b] += g1.cwiseAbs2();
      }
    }
  });

  GradEstimate est;
  est.n_total = n;
  for (int k : block_kept) est.n_kept += k;
  if (est.n_kept == 0)
    throw NumericalError("simfree_gradient: every walker diverged");
  detail::fold_mean(block_grad, est.n_kept, est.grad);
  if (opts.with_second_moment)
    detail::fold_mean(block_sq, est.n_kept, est.second_moment);
  est.loss = detail::masked_mean(w_all, est.n_kept);
  if (stopgrad) est.stopgrad_loss = detail::masked_mean(sg_all, est.n_kept);
  est.stored_step_records = 0;
  est.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return est;
}

inline GradEstimate vanilla_gradient(const SocProblem& problem,
                                     const ControlPolicy& policy,
                                     const TimeGrid& grid,
                                     const WienerPath& wiener,
                                     const RngSeq& seq,
                                     const GradOptions& opts = {}) {
  detail::check_batch_shapes(problem, policy, grid, wiener);
  if (!problem.terminal_cost_grad)
    throw ConfigError("vanilla_gradient: terminal_cost_grad required");
  if (problem.base_drift && !problem.base_drift_vjp)
    throw ConfigError("vanilla_gradient: base_drift_vjp required");
  if (problem.running_cost && !problem.running_cost_grad)
    throw ConfigError("vanilla_gradient: running_cost_grad required");
  const auto t_start = std::chrono::steady_clock::now();
  const int n = wiener.walkers;
  const int K = grid.steps();
  const int d = problem.dim;
  const std::size_t P = policy.params().size();
  const SimOptions sim_opts = detail::to_sim_options(opts);

  const int nb = num_blocks(n);
  std::vector<Vec> block_grad(nb), block_sq;
  if (opts.with_second_moment) block_sq.resize(nb);
  Vec w_all = Vec::Zero(n);
  std::vector<int> block_kept(nb, 0);

  parallel_blocks(n, opts.threads, [&](int b, int begin, int end) {
    WalkerScratch ws;
    ws.prepare(policy, d);
    WalkerAccum acc;
    Vec gv = Vec::Zero(P);
    Vec hist = Vec::Zero(static_cast<std::size_t>(K + 1) * d);
    Vec lambda(d), vcomb(d), xbar(d), tmp(d), tmp2(d);
    block_grad[b].setZero(P);
    if (opts.with_second_moment) block_sq[b].setZero(P);
    std::span<double> gvs{gv.data(), P};
    for (int i = begin; i < end; ++i) {
      const bool ok = run_walker(
          problem, policy, grid, wiener, i, seq, sim_opts, ws, acc,
          [&](int k, double, double, const auto&, WalkerScratch& w) {
            hist.segment(static_cast<std::size_t>(k) * d, d) = w.x;
          });
      if (!ok) continue;
      hist.segment(static_cast<std::size_t>(K) * d, d) = ws.x;
      const double w_i = acc.Abar + acc.Bbar + acc.terminal;
      w_all[i] = w_i;
      ++block_kept[b];
      // Adjoint sweep: lambda_K = grad g;
      // lambda_k = lambda_{k+1} + dt [ (d_x b)^T lambda_{k+1} + grad f ]
      //            + (d_x u)^T dt (u_k + sigma^T lambda_{k+1}),
      // g_theta += (d_theta u)^T dt (u_k + sigma^T lambda_{k+1}).
      gv.setZero();
      problem.terminal_cost_grad(ws.x, lambda);
      for (int k = K - 1; k >= 0; --k) {
        const double t = grid.times[k];
        const double dt = grid.dt(k);
        ws.x = hist.segment(static_cast<std::size_t>(k) * d, d);
        policy.forward(t, ws.x, ws.u, ws.tape.get());
        if (problem.volatility.is_identity()) {
          vcomb = dt * (ws.u + lambda);
        } else {
          problem.volatility.mult_transpose(t, lambda, tmp);
          vcomb = dt * (ws.u + tmp);
        }
        policy.vjp_params(*ws.tape, vcomb, 1.0, gvs);
        policy.vjp_input(*ws.tape, vcomb, xbar);
        if (problem.base_drift) {
          problem.base_drift_vjp(t, ws.x, lambda, tmp2);
          lambda += dt * tmp2;
        }
        if (problem.running_cost) {
          problem.running_cost_grad(t, ws.x, tmp2);
          lambda += dt * tmp2;
        }
        lambda += xbar;
      }
      if (!gv.allFinite()) {
        if (opts.strict)
          throw NumericalError("vanilla_gradient: non-finite adjoint");
        --block_kept[b];
        w_all[i] = 0.0;
        continue;
      }
      block_grad[b] += gv;
      if (opts.with_second_moment) block_sq[b] += gv.cwiseAbs2();
    }
  });

  GradEstimate est;
  est.n_total = n;
  for (int k : block_kept) est.n_kept += k;
  if (est.n_kept == 0)
    throw NumericalError("vanilla_gradient: every walker diverged");
  detail::fold_mean(block_grad, est.n_kept, est.grad);
  if (opts.with_second_moment)
    detail::fold_mean(block_sq, est.n_kept, est.second_moment);
  est.loss = detail::masked_mean(w_all, est.n_kept);
  est.stored_step_records = K;
  est.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return est;
}

struct ObjectiveEstimate {
  double value = std::numeric_limits<double>::quiet_NaN();
  double std_err = std::numeric_limits<double>::quiet_NaN();
  int n_total = 0;
  int n_kept = 0;
};

inline ObjectiveEstimate objective_estimate(const SocProblem& problem,
                                            const ControlPolicy& policy,
                                            const TimeGrid& grid,
                                            const WienerPath& wiener,
                                            const RngSeq& seq,
                                            const GradOptions& opts = {}) {
  detail::check_batch_shapes(problem, policy, grid, wiener);
  const int n = wiener.walkers;
  const SimOptions sim_opts = detail::to_sim_options(opts);
  Vec w_all = Vec::Zero(n);
  std::vector<char> kept(n, 0);
  std::vector<int> block_kept(num_blocks(n), 0);
  parallel_blocks(n, opts.threads, [&](int b, int begin, int end) {
    WalkerScratch ws;
    ws.prepare(policy, problem.dim);
    WalkerAccum acc;
    for (int i = begin; i < end; ++i) {
      const bool ok =
          run_walker(problem, policy, grid, wiener, i, seq, sim_opts, ws, acc,
                     [](int, double, double, const auto&, WalkerScratch&) {});
      if (!ok) continue;
      w_all[i] = acc.Abar + acc.Bbar + acc.terminal;
      kept[i] = 1;
      ++block_kept[b];
    }
  });
  ObjectiveEstimate est;
  est.n_total = n;
  for (int k : block_kept) est.n_kept += k;
  est.value = detail::masked_mean(w_all, est.n_kept);
  if (est.n_kept >= 2) {
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
      if (kept[i]) {
        const double dlt = w_all[i] - est.value;
        ss += dlt * dlt;
      }
    }
    est.std_err = std::sqrt(ss / (est.n_kept - 1.0) / est.n_kept);
  }
  return est;
}

struct OffpolicyEstimate {
  double value = std::numeric_limits<double>::quiet_NaN();
  double mean_weight = std::numeric_limits<double>::quiet_NaN();
  double mean_weight_std_err = std::numeric_limits<double>::quiet_NaN();
  double max_abs_log_weight = 0.0;
  int n_total = 0;
  int n_kept = 0;
};

// J(u) estimated from trajectories driven by v, reweighted by the
// change-of-measure factor
//   log M(u, v) = - sum (v_k - u_k) . dW_k - 1/2 sum |v_k - u_k|^2 dt_k.
// With v == u (same object or equal outputs) this reduces bit-for-bit to
// objective_estimate.
inline OffpolicyEstimate offpolicy_objective(const SocProblem& problem,
                                             const ControlPolicy& policy_u,
                                             const ControlPolicy& policy_v,
                                             const TimeGrid& grid,
                                             const WienerPath& wiener,
                                             const RngSeq& seq,
                                             const GradOptions& opts = {}) {
  detail::check_batch_shapes(problem, policy_v, grid, wiener);
  if (policy_u.dim() != problem.dim)
    throw ConfigError("offpolicy_objective: policy_u dimension mismatch");
  const int n = wiener.walkers;
  const SimOptions sim_opts = detail::to_sim_options(opts);
  const bool same = &policy_u == &policy_v;
  Vec cost_all = Vec::Zero(n);
  Vec logm_all = Vec::Zero(n);
  std::vector<char> kept(n, 0);
  std::vector<int> block_kept(num_blocks(n), 0);
  parallel_blocks(n, opts.threads, [&](int b, int begin, int end) {
    WalkerScratch ws;
    ws.prepare(policy_v, problem.dim);
    WalkerAccum acc;
    auto u_tape = policy_u.make_tape();
    Vec u_val(problem.dim), diff(problem.dim);
    for (int i = begin; i < end; ++i) {
      double acc_a = 0.0;  // control energy of u along the v-trajectory
      double logm = 0.0;
      const bool ok = run_walker(
          problem, policy_v, grid, wiener, i, seq, sim_opts, ws, acc,
          [&](int, double t, double dt, const auto& dW, WalkerScratch& w) {
            if (same) {
              u_val = w.u;
            } else {
              policy_u.forward(t, w.x, u_val, u_tape.get());
            }
            acc_a += half_sq_cost(u_val, dt);
            diff = w.u - u_val;
            logm -= diff.dot(dW);
            logm -= half_sq_cost(diff, dt);
          });
      if (!ok || !std::isfinite(logm) || !std::isfinite(acc_a)) continue;
      cost_all[i] = acc_a + acc.Bbar + acc.terminal;
      logm_all[i] = logm;
      kept[i] = 1;
      ++block_kept[b];
    }
  });
  OffpolicyEstimate est;
  est.n_total = n;
  for (int k : block_kept) est.n_kept += k;
  if (est.n_kept == 0) return est;
  double m = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    if (kept[i]) {
      m = std::max(m, logm_all[i]);
      est.max_abs_log_weight = std::max(est.max_abs_log_weight,
                                        std::abs(logm_all[i]));
    }
  }
  Vec terms = Vec::Zero(n);
  double wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!kept[i]) continue;
    const double w = std::exp(logm_all[i] - m);
    terms[i] = cost_all[i] * w;
    wsum += w;
  }
  est.value = std::exp(m) *
              (pairwise_sum({terms.data(), static_cast<std::size_t>(n)}) /
               static_cast<double>(est.n_kept));
  const double wbar = wsum / static_cast<double>(est.n_kept);
  est.mean_weight = std::exp(m) * wbar;
  if (est.n_kept >= 2) {
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!kept[i]) continue;
      const double dlt = std::exp(logm_all[i] - m) - wbar;
      ss += dlt * dlt;
    }
    est.mean_weight_std_err =
        std::exp(m) * std::sqrt(ss / (est.n_kept - 1.0) / est.n_kept);
  }
  return est;
}

}  // namespace socfree
