// SPDX-License-Identifier: Apache-2.0
//
// Brownian increments for a batch of walkers on a shared time grid.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "socfree/common.hpp"
#include "socfree/time_grid.hpp"

namespace socfree {

// Increments dW ~ N(0, dt_k I_d), stored walker-major: [walker][step][coord].
// One RNG stream per walker, so any subset of walkers can be (re)generated
// independently and in any order.
struct WienerPath {
  int walkers = 0;
  int steps = 0;
  int dim = 0;
  AlignedBuffer data;

  const double* at(int walker, int step) const {
    return data.data() + (static_cast<std::size_t>(walker) * steps + step) * dim;
  }
  double* at(int walker, int step) {
    return data.data() + (static_cast<std::size_t>(walker) * steps + step) * dim;
  }
  Eigen::Map<const Vec> increment(int walker, int step) const {
    return Eigen::Map<const Vec>(at(walker, step), dim);
  }
};

inline void sample_wiener_walker(WienerPath& path, const TimeGrid& grid,
                                 int walker, const RngSeq& seq) {
  PhiloxRng rng = seq.stream(StreamPurpose::wiener, walker);
  for (int k = 0; k < path.steps; ++k) {
    const double s = std::sqrt(grid.dt(k));
    double* out = path.at(walker, k);
    for (int c = 0; c < path.dim; ++c) out[c] = s * rng.normal();
  }
}

inline WienerPath sample_wiener_increments(const TimeGrid& grid, int walkers,
                                           int dim, const RngSeq& seq) {
  if (walkers < 1 || dim < 1)
    throw std::invalid_argument("sample_wiener_increments: bad shape");
  WienerPath path;
  path.walkers = walkers;
  path.steps = grid.steps();
  path.dim = dim;
  path.data.resize(static_cast<std::size_t>(walkers) * path.steps * dim);
  for (int i = 0; i < walkers; ++i) sample_wiener_walker(path, grid, i, seq);
  return path;
}

}  // namespace socfree
