// SPDX-License-Identifier: Apache-2.0
//
// Sampling an unnormalized density exp(-U) by simulating the controlled
// bridge from delta_0 over [0, 1] and importance-weighting the terminal
// states against the target:
//
//   log M   = (d/2) log(2 pi) + [ -(A + C) + (|x_1|^2 / 2 - U(x_1)) ]
//   E[M]    = Z = int exp(-U)            (any control, any step count)
//
// where A = sum 1/2 |u_k|^2 dt_k and C = sum u_k . dW_k.  The grouping of
// the terms above is part of the contract: the fine-tuning weights
//   log M_r = -(A + C) + r(x_1)
// coincide bit-for-bit with log M - (d/2) log(2 pi) when the reward is
// r(x) = |x|^2 / 2 - U(x).
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "socfree/problems/follmer.hpp"
#include "socfree/simulate.hpp"

namespace socfree {

struct WeightedSampleSet {
  Mat samples;      // d x n_kept (terminal states)
  Vec log_weights;  // n_kept
  int dim = 0;
  int steps = 0;
  std::uint64_t seed = 0;
  int requested_n = 0;
  int n_diverged = 0;
  std::string problem_tag;

  int size() const { return static_cast<int>(log_weights.size()); }
};

struct SampleOptions {
  GridMode grid_mode = GridMode::uniform;
  double divergence_guard = 1e6;
  bool strict = false;
  int threads = 0;
};

namespace detail {

// Simulates n walkers and returns terminal states plus the path core
// -(A + C) of the log-weight.
struct FollmerRun {
  Mat xs;        // d x n
  Vec core;      // n
  std::vector<char> kept;
  int n_kept = 0;
};

inline FollmerRun run_follmer(const FollmerProblem& fp,
                              const ControlPolicy& policy, int n, int steps,
                              const RngSeq& seq, const SampleOptions& opts) {
  const SocProblem& p = fp.soc;
  if (policy.dim() != p.dim)
    throw ConfigError("follmer sampling: policy dimension mismatch");
  if (p.initial_law.kind != InitialLaw::Kind::point_mass ||
      !p.initial_law.mean.isZero(0.0))
    throw ConfigError("follmer sampling: initial law must be delta_0");
  if (!p.volatility.is_identity() || p.base_drift)
    throw ConfigError("follmer sampling: dynamics must be dX = u dt + dW");
  TimeGrid grid;
  if (opts.grid_mode == GridMode::randomized) {
    PhiloxRng grng = seq.stream(StreamPurpose::time_grid);
    grid = make_randomized_grid(steps, p.horizon, grng);
  } else {
    grid = make_uniform_grid(steps, p.horizon);
  }
  const WienerPath wiener = sample_wiener_increments(grid, n, p.dim, seq);
  SimOptions sim_opts;
  sim_opts.divergence_guard = opts.divergence_guard;
  sim_opts.strict = opts.strict;
  sim_opts.threads = opts.threads;

  FollmerRun run;
  run.xs.setZero(p.dim, n);
  run.core.setZero(n);
  run.kept.assign(n, 0);
  std::vector<int> block_kept(num_blocks(n), 0);
  parallel_blocks(n, opts.threads, [&](int b, int begin, int end) {
    WalkerScratch ws;
    ws.prepare(policy, p.dim);
    WalkerAccum acc;
    for (int i = begin; i < end; ++i) {
      const bool ok =
          run_walker(p, policy, grid, wiener, i, seq, sim_opts, ws, acc,
                     [](int, double, double, const auto&, WalkerScratch&) {});
      if (!ok) continue;
      run.xs.col(i) = ws.x;
      run.core[i] = -(acc.Abar + acc.C);
      run.kept[i] = 1;
      ++block_kept[b];
    }
  });
  for (int k : block_kept) run.n_kept += k;
  return run;
}

// weight_of(core, x) maps the path core -(A + C) and the terminal state to
// the final log-weight; the caller controls the exact grouping.
template <class WeightOf>
inline WeightedSampleSet pack_samples(const FollmerRun& run,
                                      WeightOf&& weight_of, int dim, int steps,
                                      const RngSeq& seq,
                                      const std::string& tag) {
  WeightedSampleSet out;
  out.dim = dim;
  out.steps = steps;
  out.seed = seq.seed;
  out.requested_n = static_cast<int>(run.kept.size());
  out.n_diverged = out.requested_n - run.n_kept;
  out.problem_tag = tag;
  out.samples.resize(dim, run.n_kept);
  out.log_weights.resize(run.n_kept);
  int j = 0;
  Vec x(dim);
  for (int i = 0; i < out.requested_n; ++i) {
    if (!run.kept[i]) continue;
    x = run.xs.col(i);
    out.samples.col(j) = x;
    out.log_weights[j] = weight_of(run.core[i], x);
    ++j;
  }
  return out;
}

}  // namespace detail

// Weighted samples of the target: terminal states X_1 with
// log M = (d/2) log(2 pi) + [ core + (|x|^2/2 - U(x)) ].
inline WeightedSampleSet follmer_sample(const FollmerProblem& fp,
                                        const ControlPolicy& policy, int n,
                                        int steps, const RngSeq& seq,
                                        const SampleOptions& opts = {}) {
  const auto run = detail::run_follmer(fp, policy, n, steps, seq, opts);
  const double c0 = fp.log_prior_constant();
  const auto& pot = fp.target.potential;
  return detail::pack_samples(
      run,
      [&](double core, const Vec& x) {
        return c0 + (core + (0.5 * x.squaredNorm() - pot(x)));
      },
      fp.target.dim, steps, seq, fp.soc.tag);
}

// Importance weights after fine-tuning: log M_r = core + r(x_1), i.e. the
// same path core as follmer_sample but the terminal term replaced by the
// reward and no prior constant.  Setting r(x) = |x|^2/2 - U(x) recovers
// follmer_sample's weights up to the additive (d/2) log(2 pi), exactly.
// Their log-mean-exp estimates log E[M_r].
inline WeightedSampleSet finetune_weights(
    const FollmerProblem& fp, const std::function<double(const Vec&)>& reward,
    const ControlPolicy& policy, int n, int steps, const RngSeq& seq,
    const SampleOptions& opts = {}) {
  if (!reward) throw ConfigError("finetune_weights: reward not set");
  const auto run = detail::run_follmer(fp, policy, n, steps, seq, opts);
  return detail::pack_samples(
      run, [&](double core, const Vec& x) { return core + reward(x); },
      fp.target.dim, steps, seq, fp.soc.tag + "-reward");
}

struct LogZEstimate {
  double log_z = std::numeric_limits<double>::quiet_NaN();
  double std_err = std::numeric_limits<double>::quiet_NaN();
  double ess = 0.0;
  int n = 0;
};

// Effective sample size (sum w)^2 / sum w^2 of the normalized weights.
inline double ess(const Vec& log_weights) {
  const int n = static_cast<int>(log_weights.size());
  if (n == 0) return 0.0;
  const double m = log_weights.maxCoeff();
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = std::exp(log_weights[i] - m);
    s1 += w;
    s2 += w * w;
  }
  return (s1 * s1) / s2;
}

// log Ẑ = log mean exp(log M_i), with a delta-method standard error.
inline LogZEstimate log_z_estimate(const Vec& log_weights) {
  LogZEstimate est;
  est.n = static_cast<int>(log_weights.size());
  if (est.n == 0) return est;
  const std::span<const double> lw{log_weights.data(),
                                   static_cast<std::size_t>(est.n)};
  est.log_z = log_mean_exp(lw);
  est.ess = ess(log_weights);
  if (est.n >= 2) {
    const double m = log_weights.maxCoeff();
    double s1 = 0.0;
    for (double x : lw) s1 += std::exp(x - m);
    const double wbar = s1 / est.n;
    double ss = 0.0;
    for (double x : lw) {
      const double dlt = std::exp(x - m) - wbar;
      ss += dlt * dlt;
    }
    const double sd = std::sqrt(ss / (est.n - 1.0));
    est.std_err = sd / (wbar * std::sqrt(static_cast<double>(est.n)));
  }
  return est;
}

// Self-normalized importance estimate of E_target[h(X)].
inline Vec reweighted_expectation(
    const WeightedSampleSet& set,
    const std::function<Vec(const Vec&)>& h) {
  if (set.size() == 0)
    throw std::invalid_argument("reweighted_expectation: empty sample set");
  const double m = set.log_weights.maxCoeff();
  Vec acc;
  double wsum = 0.0;
  Vec x(set.dim);
  for (int i = 0; i < set.size(); ++i) {
    const double w = std::exp(set.log_weights[i] - m);
    x = set.samples.col(i);
    const Vec hx = h(x);
    if (acc.size() == 0) acc = Vec::Zero(hx.size());
    acc += w * hx;
    wsum += w;
  }
  return acc / wsum;
}

}  // namespace socfree
