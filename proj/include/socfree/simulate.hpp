// SPDX-License-Identifier: Apache-2.0
//
// Euler-Maruyama simulation of controlled dynamics
//
//   X_{k+1} = X_k + (b(t_k, X_k) + sigma_k u(t_k, X_k)) dt_k + sigma_k dW_k
//
// with the per-walker cost accumulators shared by every estimator:
//
//   A    = sum 1/2 |u_k|^2 dt_k     (theta-dependent in the math)
//   Abar = the same sums, detached  (bit-identical to A by construction)
//   Bbar = sum f(t_k, X_k) dt_k
//   C    = sum u_k . dW_k
//
// Walkers are processed block-sequentially (fixed blocks, any thread
// order), so results never depend on the parallel schedule.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "socfree/common.hpp"
#include "socfree/policy.hpp"
#include "socfree/problem.hpp"
#include "socfree/time_grid.hpp"
#include "socfree/wiener.hpp"

namespace socfree {

struct SimOptions {
  double divergence_guard = 1e6;  // walker diverges when |x| exceeds this
  bool strict = false;            // throw instead of excluding the walker
  bool store_full = false;        // keep states at all K+1 instants
  int threads = 0;                // 0 = all available
};

// One term of A/Abar.  Shared by every code path that accumulates control
// energy so that cross-checks between estimators can be exact.
inline double half_sq_cost(const Vec& u, double dt) {
  return 0.5 * u.squaredNorm() * dt;
}

// x <- x + drift * dt + sigma_t * dW
template <class DW>
inline void euler_maruyama_step(Vec& x, double t, double dt, const Vec& drift,
                                const Volatility& vol, const DW& dW) {
  x += dt * drift;
  vol.add_mult(t, dW, x);
}

struct WalkerAccum {
  double A = 0.0;
  double Abar = 0.0;
  double Bbar = 0.0;
  double C = 0.0;
  double terminal = 0.0;
  bool diverged = false;
  int diverged_step = -1;

  double cost() const { return Abar + Bbar + terminal; }
  void reset() { *this = WalkerAccum{}; }
};

struct WalkerScratch {
  Vec x, u, drift, tmp;
  std::unique_ptr<StepTape> tape;

  void prepare(const ControlPolicy& policy, int dim) {
    x.resize(dim);
    u.resize(dim);
    drift.resize(dim);
    tmp.resize(dim);
    if (!tape) tape = policy.make_tape();
  }
};

// Simulates one walker.  The hook runs once per step after the control has
// been evaluated (tape filled, accumulators updated) and before the state
// update, i.e. it sees (k, t_k, dt_k, dW_k) with ws.x = X_k and ws.u = u_k.
// Returns false if the walker diverged (accumulators then stop at the
// failing step and acc.diverged is set).
template <class Hook>
bool run_walker(const SocProblem& problem, const ControlPolicy& policy,
                const TimeGrid& grid, const WienerPath& wiener, int walker,
                const RngSeq& seq, const SimOptions& opts, WalkerScratch& ws,
                WalkerAccum& acc, Hook&& hook) {
  acc.reset();
  {
    PhiloxRng rng = seq.stream(StreamPurpose::init_state, walker);
    problem.initial_law.sample(rng, ws.x);
  }
  const int steps = grid.steps();
  const double guard_sq = opts.divergence_guard * opts.divergence_guard;
  const bool has_f = static_cast<bool>(problem.running_cost);
  for (int k = 0; k < steps; ++k) {
    const double t = grid.times[k];
    const double dt = grid.dt(k);
    const auto dW = wiener.increment(walker, k);
    policy.forward(t, ws.x, ws.u, ws.tape.get());
    if (!ws.u.allFinite()) {
      if (opts.strict)
        throw NumericalError("run_walker: non-finite control at step " +
                             std::to_string(k));
      acc.diverged = true;
      acc.diverged_step = k;
      return false;
    }
    const double energy = half_sq_cost(ws.u, dt);
    acc.A += energy;
    acc.Abar += energy;
    if (has_f) acc.Bbar += problem.running_cost(t, ws.x) * dt;
    acc.C += ws.u.dot(dW);
    hook(k, t, dt, dW, ws);
    if (problem.base_drift) {
      problem.base_drift(t, ws.x, ws.drift);
    } else {
      ws.drift.setZero();
    }
    if (problem.volatility.is_identity()) {
      ws.drift += ws.u;
    } else {
      problem.volatility.mult(t, ws.u, ws.tmp);
      ws.drift += ws.tmp;
    }
    euler_maruyama_step(ws.x, t, dt, ws.drift, problem.volatility, dW);
    const double xsq = ws.x.squaredNorm();
    if (!(xsq <= guard_sq)) {  // catches NaN as well
      if (opts.strict)
        throw NumericalError("run_walker: state diverged at step " +
                             std::to_string(k) + " (|x|^2 = " +
                             std::to_string(xsq) + ")");
      acc.diverged = true;
      acc.diverged_step = k;
      return false;
    }
  }
  acc.terminal = problem.terminal_cost(ws.x);
  if (!std::isfinite(acc.terminal)) {
    if (opts.strict)
      throw NumericalError("run_walker: non-finite terminal cost");
    acc.diverged = true;
    acc.diverged_step = steps;
    return false;
  }
  return true;
}

struct TrajectoryBatch {
  TimeGrid grid;
  int walkers = 0;
  int dim = 0;
  Mat terminal_states;              // d x walkers
  Vec acc_A, acc_Abar, acc_Bbar, acc_C;  // per walker
  Vec terminal_cost;                // per walker
  AlignedBuffer full_states;        // walker-major [i][k][c], optional
  std::vector<int> diverged;        // walker indices, ascending
  const WienerPath* wiener = nullptr;  // the driving increments (non-owning)
  int stored_step_records = 0;      // per-walker step records kept (0 or K+1)

  bool is_diverged(int walker) const {
    return std::binary_search(diverged.begin(), diverged.end(), walker);
  }
  double* full_state_at(int walker, int k) {
    return full_states.data() +
           (static_cast<std::size_t>(walker) * (grid.steps() + 1) + k) * dim;
  }
};

inline TrajectoryBatch simulate_controlled(const SocProblem& problem,
                                           const ControlPolicy& policy,
                                           const TimeGrid& grid,
                                           const WienerPath& wiener,
                                           const RngSeq& seq,
                                           const SimOptions& opts = {}) {
  if (wiener.dim != problem.dim)
    throw ConfigError("simulate_controlled: wiener dimension mismatch");
  if (wiener.steps != grid.steps())
    throw ConfigError("simulate_controlled: wiener/grid step mismatch");
  const int n = wiener.walkers;
  const int K = grid.steps();
  TrajectoryBatch batch;
  batch.grid = grid;
  batch.walkers = n;
  batch.dim = problem.dim;
  batch.terminal_states.setZero(problem.dim, n);
  batch.acc_A.setZero(n);
  batch.acc_Abar.setZero(n);
  batch.acc_Bbar.setZero(n);
  batch.acc_C.setZero(n);
  batch.terminal_cost.setZero(n);
  batch.wiener = &wiener;
  if (opts.store_full) {
    batch.full_states.assign(
        static_cast<std::size_t>(n) * (K + 1) * problem.dim, 0.0);
    batch.stored_step_records = K + 1;
  }
  std::vector<std::vector<int>> block_diverged(num_blocks(n));
  parallel_blocks(n, opts.threads, [&](int b, int begin, int end) {
    WalkerScratch ws;
    ws.prepare(policy, problem.dim);
    WalkerAccum acc;
    for (int i = begin; i < end; ++i) {
      const bool ok = run_walker(
          problem, policy, grid, wiener, i, seq, opts, ws, acc,
          [&](int k, double, double, const auto&, WalkerScratch& w) {
            if (opts.store_full) {
              Eigen::Map<Vec>(batch.full_state_at(i, k), problem.dim) = w.x;
            }
          });
      batch.acc_A[i] = acc.A;
      batch.acc_Abar[i] = acc.Abar;
      batch.acc_Bbar[i] = acc.Bbar;
      batch.acc_C[i] = acc.C;
      if (ok) {
        batch.terminal_states.col(i) = ws.x;
        batch.terminal_cost[i] = acc.terminal;
        if (opts.store_full)
          Eigen::Map<Vec>(batch.full_state_at(i, K), problem.dim) = ws.x;
      } else {
        block_diverged[b].push_back(i);
      }
    }
  });
  for (auto& ids : block_diverged)
    batch.diverged.insert(batch.diverged.end(), ids.begin(), ids.end());
  return batch;
}

}  // namespace socfree
