// SPDX-License-Identifier: Apache-2.0
//
// Shared aliases, error types and deterministic reduction helpers.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace socfree {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Storage for buffers that Eigen kernels reduce over (network parameters,
// Wiener increments): vectorized reductions split their scalar prologue by
// the runtime alignment of the data pointer, so pinning every such buffer to
// Eigen's own alignment makes roundoff a function of sizes and values only,
// never of where the allocator happened to place the block.  Without this,
// two identically-seeded policies can train to results that differ in the
// last ulp.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

// Raised when a simulation or optimizer step produces non-finite values
// (overflow, NaN gradients, diverged walkers in strict mode, ...).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// Raised on malformed configs, checkpoints or incompatible shapes.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// Deterministic parallel reduction.
//
// Work is split into fixed-size walker blocks.  Each block is processed
// sequentially by whichever thread picks it up; per-block partial results are
// stored by block index and folded with a fixed pairwise tree afterwards.
// The result is therefore independent of the thread schedule: running with
// one thread or eight produces bit-identical sums.
// ---------------------------------------------------------------------------

inline constexpr int kWalkerBlock = 256;

inline int num_blocks(int n, int block = kWalkerBlock) {
  return (n + block - 1) / block;
}

inline int resolve_threads(int requested) {
#if defined(_OPENMP)
  if (requested > 0) return requested;
  return omp_get_max_threads();
#else
  (void)requested;
  return 1;
#endif
}

// Runs fn(block_index, begin, end) for each block of [0, n).  Exceptions
// thrown by fn are captured inside the parallel region (they must not cross
// it) and the first one is rethrown to the caller.
template <class F>
void parallel_blocks(int n, int threads, F&& fn) {
  const int nb = num_blocks(n);
  threads = resolve_threads(threads);
  std::exception_ptr first_error;
#if defined(_OPENMP)
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
#endif
  for (int b = 0; b < nb; ++b) {
    try {
      const int begin = b * kWalkerBlock;
      const int end = std::min(n, begin + kWalkerBlock);
      fn(b, begin, end);
    } catch (...) {
#if defined(_OPENMP)
#pragma omp critical(socfree_parallel_blocks_error)
#endif
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

// Pairwise fold of per-block partials; fixed topology regardless of how the
// partials were produced.  `combine(a, b)` must write the result into `a`.
template <class T, class Combine>
void pairwise_fold(std::vector<T>& items, Combine&& combine) {
  if (items.empty()) return;
  for (std::size_t stride = 1; stride < items.size(); stride *= 2) {
    for (std::size_t i = 0; i + stride < items.size(); i += 2 * stride) {
      combine(items[i], items[i + stride]);
    }
  }
}

// Deterministic sum of a contiguous array: sequential within fixed-size
// blocks, pairwise across blocks.  Matches the topology used by the
// block-parallel estimators, so a serial caller reproduces their rounding.
inline double pairwise_sum(std::span<const double> xs) {
  const int n = static_cast<int>(xs.size());
  if (n == 0) return 0.0;
  std::vector<double> partial(num_blocks(n), 0.0);
  for (int b = 0; b < num_blocks(n); ++b) {
    const int begin = b * kWalkerBlock;
    const int end = std::min(n, begin + kWalkerBlock);
    double s = 0.0;
    for (int i = begin; i < end; ++i) s += xs[i];
    partial[b] = s;
  }
  pairwise_fold(partial, [](double& a, double b) { a += b; });
  return partial[0];
}

inline double pairwise_mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return pairwise_sum(xs) / static_cast<double>(xs.size());
}

// Numerically stable log(mean(exp(xs))).
inline double log_mean_exp(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("log_mean_exp: empty input");
  double m = xs[0];
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;  // all -inf, or a NaN/inf present
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(xs.size()));
}

}  // namespace socfree
