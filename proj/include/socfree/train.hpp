// SPDX-License-Identifier: Apache-2.0
//
// Adam, cosine learning-rate schedule, policy evaluation against a
// reference control, and the training loop.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "socfree/grad.hpp"
#include "socfree/simulate.hpp"

namespace socfree {

struct AdamState {
  Vec m, v;
  long long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void reset(std::size_t n) {
    m.setZero(n);
    v.setZero(n);
    t = 0;
  }
};

// One Adam update in place.  Rejects non-finite gradients before touching
// any state, so a failed step leaves parameters and moments unchanged.
inline void adam_step(AdamState& state, std::span<double> params,
                      const Vec& grad, double lr) {
  const auto n = static_cast<Eigen::Index>(params.size());
  if (grad.size() != n)
    throw ConfigError("adam_step: gradient/parameter size mismatch");
  if (state.m.size() != n) state.reset(params.size());
  if (!grad.allFinite())
    throw NumericalError("adam_step: non-finite gradient");
  if (!std::isfinite(lr)) throw NumericalError("adam_step: non-finite lr");
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  Eigen::Map<Vec> p(params.data(), n);
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseAbs2();
  p -= (lr / c1) * state.m.cwiseQuotient(
                       ((state.v / c2).cwiseSqrt().array() + state.eps)
                           .matrix());
}

// Cosine decay from lr0 at iter = 0 to floor at iter = total (endpoints
// exact by construction).
inline double cosine_lr(long long iter, long long total, double lr0,
                        double floor = 0.0) {
  if (iter <= 0) return lr0;
  if (iter >= total) return floor;
  const double c =
      std::cos(3.14159265358979323846 * static_cast<double>(iter) /
               static_cast<double>(total));
  return floor + 0.5 * (lr0 - floor) * (1.0 + c);
}

// Relative control error along reference trajectories:
//
//   sqrt( E sum_k |u(t_k, X_k) - u*(t_k, X_k)|^2 dt_k
//         / E sum_k |u*(t_k, X_k)|^2 dt_k ),
//
// with X simulated under u* on a fixed uniform grid and a fixed evaluation
// seed, so successive calls during training are directly comparable.
inline double l2_error(const SocProblem& problem, const ControlPolicy& policy,
                       const std::function<Vec(double, const Vec&)>& u_star,
                       int walkers = 256, int steps = 32,
                       std::uint64_t seed = 0, int threads = 0) {
  const TimeGrid grid = make_uniform_grid(steps, problem.horizon);
  const RngSeq seq{seed ^ 0x5eedfeedULL, 0};
  const WienerPath wiener =
      sample_wiener_increments(grid, walkers, problem.dim, seq);
  FunctionPolicy ref(problem.dim, u_star);
  SimOptions opts;
  opts.threads = threads;
  const int nb = num_blocks(walkers);
  std::vector<double> num(nb, 0.0), den(nb, 0.0);
  parallel_blocks(walkers, threads, [&](int b, int begin, int end) {
    WalkerScratch ws;
    ws.prepare(ref, problem.dim);
    WalkerAccum acc;
    auto tape = policy.make_tape();
    Vec u_pol(problem.dim);
    for (int i = begin; i < end; ++i) {
      run_walker(problem, ref, grid, wiener, i, seq, opts, ws, acc,
                 [&](int, double t, double dt, const auto&, WalkerScratch& w) {
                   policy.forward(t, w.x, u_pol, tape.get());
                   num[b] += (u_pol - w.u).squaredNorm() * dt;
                   den[b] += w.u.squaredNorm() * dt;
                 });
    }
  });
  pairwise_fold(num, [](double& a, double x) { a += x; });
  pairwise_fold(den, [](double& a, double x) { a += x; });
  if (den[0] <= 0.0) return std::sqrt(num[0] / walkers);
  return std::sqrt(num[0] / den[0]);
}

enum class EstimatorKind { simfree, vanilla };

struct TrainConfig {
  long long iters = 1000;
  int walkers = 1000;
  int steps = 64;
  GridMode grid_mode = GridMode::randomized;
  EstimatorKind estimator = EstimatorKind::simfree;
  double lr = 3e-4;
  double lr_floor = 0.0;
  std::uint64_t seed = 0;
  int threads = 0;
  double divergence_guard = 1e6;
  bool strict_divergence = false;  // abort if any walker diverges
  long long eval_every = 10;       // metrics cadence (first/last always kept)
  int l2_walkers = 256;
  int l2_steps = 32;
  long long ckpt_every = 0;        // 0 = final checkpoint only
  bool deterministic = true;       // report wall_s as 0 in metrics
  // Optional early stopping on the smoothed loss (0 = disabled): stop when
  // `patience` consecutive evaluations fail to improve the best smoothed
  // loss by at least min_rel_improvement.
  int patience = 0;
  double min_rel_improvement = 1e-4;
};

struct MetricsRow {
  long long iter = 0;
  double wall_s = 0.0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double l2_err = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  long long diverged = 0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  long long iters_run = 0;
  bool aborted = false;
  bool early_stopped = false;
  std::string abort_reason;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double final_l2 = std::numeric_limits<double>::quiet_NaN();
};

// Trains the policy in place.  `u_star` (optional) enables the l2_err
// column; `row_sink` receives each metrics row as it is produced;
// `ckpt_sink` is invoked at the checkpoint cadence and before returning.
inline TrainResult train_loop(
    const SocProblem& problem, ControlPolicy& policy, const TrainConfig& cfg,
    std::function<Vec(double, const Vec&)> u_star = nullptr,
    std::function<void(const MetricsRow&)> row_sink = nullptr,
    std::function<void(long long)> ckpt_sink = nullptr) {
  problem.validate();
  if (cfg.iters < 1) throw ConfigError("train_loop: iters must be >= 1");
  if (cfg.walkers < 1) throw ConfigError("train_loop: walkers must be >= 1");
  if (cfg.steps < 1) throw ConfigError("train_loop: steps must be >= 1");
  if (!(cfg.lr > 0.0)) throw ConfigError("train_loop: lr must be > 0");

  AdamState adam;
  adam.reset(policy.params().size());
  GradOptions gopts;
  gopts.divergence_guard = cfg.divergence_guard;
  gopts.threads = cfg.threads;
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  double best = std::numeric_limits<double>::infinity();
  double smoothed = std::numeric_limits<double>::quiet_NaN();
  int stall = 0;

  for (long long iter = 1; iter <= cfg.iters; ++iter) {
    const RngSeq seq{cfg.seed, static_cast<std::uint64_t>(iter)};
    TimeGrid grid;
    if (cfg.grid_mode == GridMode::randomized) {
      PhiloxRng grng = seq.stream(StreamPurpose::time_grid);
      grid = make_randomized_grid(cfg.steps, problem.horizon, grng);
    } else {
      grid = make_uniform_grid(cfg.steps, problem.horizon);
    }
    const WienerPath wiener =
        sample_wiener_increments(grid, cfg.walkers, problem.dim, seq);

    GradEstimate est;
    try {
      est = cfg.estimator == EstimatorKind::simfree
                ? simfree_gradient(problem, policy, grid, wiener, seq, gopts)
                : vanilla_gradient(problem, policy, grid, wiener, seq, gopts);
    } catch (const NumericalError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      break;
    }
    if (cfg.strict_divergence && est.n_diverged() > 0) {
      result.aborted = true;
      result.abort_reason = "diverged walkers under strict_divergence";
      break;
    }
    if (!std::isfinite(est.loss) || !est.grad.allFinite()) {
      result.aborted = true;
      result.abort_reason = "non-finite loss or gradient at iter " +
                            std::to_string(iter);
      break;
    }
    const double lr = cosine_lr(iter - 1, cfg.iters, cfg.lr, cfg.lr_floor);
    adam_step(adam, policy.params().span(), est.grad, lr);
    result.iters_run = iter;
    result.final_loss = est.loss;

    // A metrics row is appended every iteration (the log is plot-ready);
    // the expensive reference-control error is refreshed only on the eval
    // cadence and left empty (NaN) in between.
    MetricsRow row;
    row.iter = iter;
    row.wall_s = cfg.deterministic
                     ? 0.0
                     : std::chrono::duration<double>(
                           std::chrono::steady_clock::now() - t0).count();
    row.loss = est.loss;
    row.grad_norm = est.grad.norm();
    row.diverged = est.n_diverged();
    row.lr = lr;
    const bool eval_now =
        iter == 1 || iter == cfg.iters || (cfg.eval_every > 0 &&
                                           iter % cfg.eval_every == 0);
    if (eval_now) {
      if (u_star) {
        row.l2_err = l2_error(problem, policy, u_star, cfg.l2_walkers,
                              cfg.l2_steps, cfg.seed, cfg.threads);
        result.final_l2 = row.l2_err;
      }
      // Early stopping on an exponentially smoothed loss.
      if (cfg.patience > 0) {
        smoothed = std::isnan(smoothed) ? est.loss
                                        : 0.7 * smoothed + 0.3 * est.loss;
        const double scale = std::max(1.0, std::abs(best));
        if (smoothed < best - cfg.min_rel_improvement * scale) {
          best = smoothed;
          stall = 0;
        } else if (++stall >= cfg.patience) {
          result.early_stopped = true;
        }
      }
    }
    result.metrics.push_back(row);
    if (row_sink) row_sink(row);
    if (ckpt_sink &&
        ((cfg.ckpt_every > 0 && iter % cfg.ckpt_every == 0) ||
         iter == cfg.iters)) {
      ckpt_sink(iter);
    }
    if (result.early_stopped) {
      if (ckpt_sink && !(cfg.ckpt_every > 0 && iter % cfg.ckpt_every == 0) &&
          iter != cfg.iters)
        ckpt_sink(iter);
      break;
    }
  }
  if (result.aborted && ckpt_sink) ckpt_sink(result.iters_run);
  return result;
}

}  // namespace socfree
