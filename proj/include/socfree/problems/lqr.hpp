// SPDX-License-Identifier: Apache-2.0
//
// Linear-quadratic regulator:
//
//   dX = (A X + sigma0 u) dt + sigma0 dW,
//   f(t,x) = x^T P x,   g(x) = x^T Q x,
//
// with optimal control u*(t, x) = -2 sigma0^T F(t) x, where F solves the
// matrix Riccati equation
//
//   dF/dt + A^T F + F A - 2 F sigma0 sigma0^T F + P = 0,   F(T) = Q.
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "socfree/problem.hpp"

namespace socfree {

struct LqrSpec {
  int dim = 20;
  Mat A, P, Q, sigma0;
  double horizon = 1.0;
  InitialLaw mu0;

  // The "easy" setting: modest drift and costs.
  static LqrSpec easy(int dim) {
    LqrSpec s;
    s.dim = dim;
    s.A = 0.2 * Mat::Identity(dim, dim);
    s.P = 0.2 * Mat::Identity(dim, dim);
    s.Q = 0.1 * Mat::Identity(dim, dim);
    s.sigma0 = Mat::Identity(dim, dim);
    s.horizon = 1.0;
    s.mu0 = InitialLaw::gaussian(Vec::Zero(dim),
                                 Vec::Constant(dim, std::sqrt(0.5)));
    return s;
  }

  // The "hard" setting: unstable drift and stronger state cost.
  static LqrSpec hard(int dim) {
    LqrSpec s = easy(dim);
    s.A = Mat::Identity(dim, dim);
    s.P = Mat::Identity(dim, dim);
    s.Q = 0.5 * Mat::Identity(dim, dim);
    return s;
  }
};

// Dense backward solve of the Riccati equation.  Nodes are stored every
// `keep_every` internal RK4 steps; queries between nodes take one extra RK4
// step of the exact remaining length from the nearest stored node, so the
// pointwise accuracy matches the dense solve everywhere.
class RiccatiSolution {
 public:
  RiccatiSolution(const LqrSpec& spec, int rk4_steps = 65536,
                  int keep_every = 16)
      : At_(spec.A.transpose()),
        A_(spec.A),
        Sig_(spec.sigma0 * spec.sigma0.transpose()),
        P_(spec.P),
        T_(spec.horizon),
        keep_ds_(0.0) {
    if (rk4_steps < 1 || keep_every < 1 || rk4_steps % keep_every != 0)
      throw ConfigError("RiccatiSolution: keep_every must divide rk4_steps");
    const double ds = T_ / rk4_steps;
    keep_ds_ = ds * keep_every;
    // Integrate G(s) = F(T - s) forward in s from G(0) = Q.
    Mat g = spec.Q;
    double c = 0.0;  // value-function constant: dc/ds = tr(Sig G)
    nodes_.reserve(rk4_steps / keep_every + 1);
    cnodes_.reserve(nodes_.capacity());
    nodes_.push_back(g);
    cnodes_.push_back(c);
    for (int i = 0; i < rk4_steps; ++i) {
      rk4_step(g, c, ds);
      g = 0.5 * (g + g.transpose()).eval();  // keep symmetric
      if ((i + 1) % keep_every == 0) {
        nodes_.push_back(g);
        cnodes_.push_back(c);
      }
    }
  }

  double horizon() const { return T_; }

  // F(t), t in [0, T].
  Mat at(double t) const {
    const double s = T_ - t;
    if (s < 0.0 || s > T_ * (1.0 + 1e-12))
      throw std::invalid_argument("RiccatiSolution::at: t outside [0, T]");
    const double pos = s / keep_ds_;
    std::size_t j = static_cast<std::size_t>(pos);
    if (j >= nodes_.size() - 1) j = nodes_.size() - 1;
    Mat g = nodes_[j];
    const double rest = s - static_cast<double>(j) * keep_ds_;
    if (rest > 0.0) {
      double c = 0.0;
      rk4_step(g, c, rest);
      g = 0.5 * (g + g.transpose()).eval();
    }
    return g;
  }

  // Expected optimal cost from X_0 ~ mu0:
  //   J* = E[x^T F(0) x] + integral_0^T tr(sigma sigma^T F_s) ds.
  double optimal_value(const InitialLaw& mu0) const {
    const Mat f0 = nodes_.back();
    double v = mu0.mean.dot(f0 * mu0.mean);
    if (mu0.kind == InitialLaw::Kind::diagonal_gaussian) {
      for (Eigen::Index i = 0; i < mu0.stddev.size(); ++i)
        v += f0(i, i) * mu0.stddev[i] * mu0.stddev[i];
    }
    return v + cnodes_.back();
  }

 private:
  // dG/ds = A^T G + G A - 2 G Sig G + P;  dc/ds = tr(Sig G).
  Mat rhs(const Mat& g) const {
    return At_ * g + g * A_ - 2.0 * (g * Sig_ * g) + P_;
  }

  void rk4_step(Mat& g, double& c, double h) const {
    const Mat k1 = rhs(g);
    const Mat k2 = rhs(g + (0.5 * h) * k1);
    const Mat k3 = rhs(g + (0.5 * h) * k2);
    const Mat k4 = rhs(g + h * k3);
    const double c1 = (Sig_ * g).trace();
    const double c2 = (Sig_ * (g + (0.5 * h) * k1)).trace();
    const double c3 = (Sig_ * (g + (0.5 * h) * k2)).trace();
    const double c4 = (Sig_ * (g + h * k3)).trace();
    g += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    c += (h / 6.0) * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
  }

  Mat At_, A_, Sig_, P_;
  double T_;
  double keep_ds_;
  std::vector<Mat> nodes_;    // G at s = 0, keep_ds, 2 keep_ds, ...
  std::vector<double> cnodes_;
};

inline RiccatiSolution solve_riccati(const LqrSpec& spec, int rk4_steps = 65536,
                                     int keep_every = 16) {
  return RiccatiSolution(spec, rk4_steps, keep_every);
}

inline SocProblem make_lqr_problem(const LqrSpec& spec) {
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
  const Mat P = spec.P;
  p.running_cost = [P](double, const Vec& x) { return x.dot(P * x); };
  p.running_cost_grad = [P](double, const Vec& x, Vec& out) {
    out.noalias() = (P + P.transpose()) * x;
  };
  const Mat Q = spec.Q;
  p.terminal_cost = [Q](const Vec& x) { return x.dot(Q * x); };
  p.terminal_cost_grad = [Q](const Vec& x, Vec& out) {
    out.noalias() = (Q + Q.transpose()) * x;
  };
  p.tag = "lqr";
  p.validate();
  return p;
}

// u*(t, x) = -2 sigma0^T F(t) x.  The Riccati solution is shared; repeated
// queries at the same instants (fixed evaluation grids) hit a small cache.
inline std::function<Vec(double, const Vec&)> lqr_optimal_control(
    const LqrSpec& spec, std::shared_ptr<const RiccatiSolution> riccati) {
  struct Cache {
    std::mutex mu;
    std::map<double, Mat> gain;  // t -> -2 sigma0^T F(t)
  };
  auto cache = std::make_shared<Cache>();
  const Mat s0t = spec.sigma0.transpose();
  return [s0t, riccati, cache](double t, const Vec& x) -> Vec {
    std::lock_guard<std::mutex> lock(cache->mu);
    auto it = cache->gain.find(t);
    if (it == cache->gain.end()) {
      if (cache->gain.size() > 4096) cache->gain.clear();
      it = cache->gain.emplace(t, -2.0 * (s0t * riccati->at(t))).first;
    }
    return it->second * x;
  };
}

}  // namespace socfree
