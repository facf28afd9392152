// SPDX-License-Identifier: Apache-2.0
//
// Time discretizations of [0, T]: fixed uniform grids and the randomized
// grids used by the stochastic estimators (interior points drawn uniformly,
// endpoints pinned).
#pragma once

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "socfree/common.hpp"
#include "socfree/rng.hpp"

namespace socfree {

enum class GridMode { uniform, randomized };

struct TimeGrid {
  std::vector<double> times;  // size K+1, strictly increasing, 0 ... T

  int steps() const { return static_cast<int>(times.size()) - 1; }
  double horizon() const { return times.back(); }
  double dt(int k) const { return times[k + 1] - times[k]; }
};

inline TimeGrid make_uniform_grid(int steps, double horizon) {
  if (steps < 1) throw std::invalid_argument("time grid needs >= 1 step");
  if (!(horizon > 0.0)) throw std::invalid_argument("horizon must be > 0");
  TimeGrid g;
  g.times.resize(steps + 1);
  for (int k = 0; k <= steps; ++k) {
    g.times[k] = horizon * static_cast<double>(k) / static_cast<double>(steps);
  }
  g.times[0] = 0.0;
  g.times[steps] = horizon;  // close exactly
  return g;
}

// K-1 interior points i.i.d. uniform on (0, T), sorted, with 0 and T
// appended.  Coincident points would create zero-length steps, so the
// (astronomically unlikely) collision is resolved by redrawing.
inline TimeGrid make_randomized_grid(int steps, double horizon,
                                     PhiloxRng& rng) {
  if (steps < 1) throw std::invalid_argument("time grid needs >= 1 step");
  if (!(horizon > 0.0)) throw std::invalid_argument("horizon must be > 0");
  TimeGrid g;
  g.times.resize(steps + 1);
  for (int attempt = 0; attempt < 64; ++attempt) {
    g.times[0] = 0.0;
    for (int k = 1; k < steps; ++k) g.times[k] = horizon * rng.uniform_open();
    g.times[steps] = horizon;
    std::sort(g.times.begin() + 1, g.times.end() - 1);
    bool ok = true;
    for (int k = 0; k < steps; ++k) ok = ok && (g.times[k] < g.times[k + 1]);
    if (ok) return g;
  }
  throw NumericalError("make_randomized_grid: could not draw distinct points");
}

}  // namespace socfree
