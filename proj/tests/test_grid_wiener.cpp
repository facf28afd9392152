// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "socfree/time_grid.hpp"
#include "socfree/wiener.hpp"
#include "support/oracles.hpp"

#include <vector>

using namespace socfree;

TEST_CASE("uniform grid closes exactly and has equal steps", "[grid]") {
  const TimeGrid g = make_uniform_grid(7, 2.5);
  REQUIRE(g.steps() == 7);
  REQUIRE(g.times.front() == 0.0);
  REQUIRE(g.times.back() == 2.5);
  REQUIRE(g.horizon() == 2.5);
  for (int k = 0; k < 7; ++k) {
    REQUIRE(g.dt(k) == Catch::Approx(2.5 / 7.0).epsilon(1e-12));
    REQUIRE(g.dt(k) > 0.0);
  }
}

TEST_CASE("randomized grid pins endpoints and is strictly increasing",
          "[grid]") {
  RngSeq seq{123, 0};
  PhiloxRng rng = seq.stream(StreamPurpose::time_grid);
  for (int trial = 0; trial < 50; ++trial) {
    const TimeGrid g = make_randomized_grid(16, 3.0, rng);
    REQUIRE(g.times.front() == 0.0);
    REQUIRE(g.times.back() == 3.0);
    REQUIRE(static_cast<int>(g.times.size()) == 17);
    for (int k = 0; k < 16; ++k) REQUIRE(g.times[k] < g.times[k + 1]);
  }
}

TEST_CASE("randomized grid with one step is just the endpoints", "[grid]") {
  PhiloxRng rng(9, 9, 9, 9);
  const TimeGrid g = make_randomized_grid(1, 1.0, rng);
  REQUIRE(g.times == std::vector<double>{0.0, 1.0});
}

TEST_CASE("randomized grid interior points are uniform on (0, T)", "[grid]") {
  const double T = 2.0;
  const int K = 8;
  PhiloxRng rng(31415, 1, 0, 0);
  std::vector<double> all_points;
  std::vector<double> medians;  // 4th smallest of 7 ~ Beta(4, 4) scaled by T
  for (int trial = 0; trial < 400; ++trial) {
    const TimeGrid g = make_randomized_grid(K, T, rng);
    for (int k = 1; k < K; ++k) all_points.push_back(g.times[k]);
    medians.push_back(g.times[4]);
  }
  const double d_all = oracles::ks_statistic(
      all_points, [T](double x) { return x / T; });
  REQUIRE(d_all < oracles::ks_critical(1e-3,
                                       static_cast<int>(all_points.size())));
  const double d_med = oracles::ks_statistic(medians, [T](double x) {
    return oracles::incbeta(4.0, 4.0, x / T);
  });
  REQUIRE(d_med < oracles::ks_critical(1e-3,
                                       static_cast<int>(medians.size())));
}

TEST_CASE("grid argument validation", "[grid]") {
  PhiloxRng rng(1, 1, 1, 1);
  REQUIRE_THROWS_AS(make_uniform_grid(0, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(make_uniform_grid(4, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(make_randomized_grid(0, 1.0, rng), std::invalid_argument);
  REQUIRE_THROWS_AS(make_randomized_grid(4, -1.0, rng), std::invalid_argument);
}

TEST_CASE("wiener increments have variance dt per coordinate", "[wiener]") {
  const TimeGrid g = make_uniform_grid(16, 2.0);
  RngSeq seq{777, 3};
  const int n = 4000, d = 3;
  const WienerPath w = sample_wiener_increments(g, n, d, seq);
  REQUIRE(w.walkers == n);
  REQUIRE(w.steps == 16);
  REQUIRE(w.dim == d);
  // Pooled standardized increments should be N(0,1).
  std::vector<double> zs;
  zs.reserve(2000);
  double s2 = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < w.steps; ++k) {
      const double sdt = std::sqrt(g.dt(k));
      for (int c = 0; c < d; ++c) {
        const double z = w.at(i, k)[c] / sdt;
        s2 += z * z;
        ++count;
        if (zs.size() < 2000) zs.push_back(z);
      }
    }
  }
  REQUIRE(s2 / count == Catch::Approx(1.0).margin(0.01));
  const double ks = oracles::ks_statistic(zs, oracles::normal_cdf);
  REQUIRE(ks < oracles::ks_critical(1e-3, static_cast<int>(zs.size())));
}

TEST_CASE("wiener walkers can be regenerated independently", "[wiener]") {
  const TimeGrid g = make_uniform_grid(8, 1.0);
  RngSeq seq{555, 9};
  const WienerPath full = sample_wiener_increments(g, 6, 4, seq);

  WienerPath lone;
  lone.walkers = 6;
  lone.steps = 8;
  lone.dim = 4;
  lone.data.assign(full.data.size(), 0.0);
  sample_wiener_walker(lone, g, 5, seq);  // only walker 5
  for (int k = 0; k < 8; ++k) {
    for (int c = 0; c < 4; ++c) {
      REQUIRE(lone.at(5, k)[c] == full.at(5, k)[c]);
    }
  }
}

TEST_CASE("wiener paths differ across epochs", "[wiener]") {
  const TimeGrid g = make_uniform_grid(4, 1.0);
  const WienerPath a = sample_wiener_increments(g, 2, 2, RngSeq{11, 1});
  const WienerPath b = sample_wiener_increments(g, 2, 2, RngSeq{11, 2});
  REQUIRE(a.data != b.data);
}
