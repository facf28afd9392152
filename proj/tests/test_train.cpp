// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "socfree/problems/follmer.hpp"
#include "socfree/problems/linear_ou.hpp"
#include "socfree/train.hpp"

#include <cmath>

using namespace socfree;

TEST_CASE("adam reproduces a hand-computed update", "[train][adam]") {
  AdamState st;
  Vec p(2), g1(2), g2(2);
  p << 1.0, -2.0;
  g1 << 0.5, -1.5;
  g2 << -0.25, 0.75;
  const double lr = 0.1;
  Vec expect = p;
  Vec m = Vec::Zero(2), v = Vec::Zero(2);
  for (const Vec* g : {&g1, &g2}) {
    m = 0.9 * m + 0.1 * (*g);
    v = 0.999 * v + 0.001 * g->cwiseAbs2();
  }
  adam_step(st, {p.data(), 2}, g1, lr);
  adam_step(st, {p.data(), 2}, g2, lr);
  // Replay the closed-form two-step recursion.
  Vec mm = Vec::Zero(2), vv = Vec::Zero(2);
  long long t = 0;
  for (const Vec* g : {&g1, &g2}) {
    ++t;
    mm = 0.9 * mm + 0.1 * (*g);
    vv = 0.999 * vv + 0.001 * g->cwiseAbs2();
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(0.999, static_cast<double>(t));
    expect -= (lr / c1) *
              mm.cwiseQuotient(
                  ((vv / c2).cwiseSqrt().array() + 1e-8).matrix());
  }
  REQUIRE((p - expect).cwiseAbs().maxCoeff() < 1e-15);
  REQUIRE(st.t == 2);
}

TEST_CASE("adam rejects bad gradients before touching any state",
          "[train][adam]") {
  AdamState st;
  Vec p(2);
  p << 1.0, 2.0;
  Vec g(2);
  g << 0.1, 0.2;
  adam_step(st, {p.data(), 2}, g, 0.01);
  const Vec p_before = p, m_before = st.m, v_before = st.v;
  const long long t_before = st.t;
  Vec bad(2);
  bad << std::numeric_limits<double>::quiet_NaN(), 0.0;
  REQUIRE_THROWS_AS(adam_step(st, {p.data(), 2}, bad, 0.01), NumericalError);
  REQUIRE(p == p_before);
  REQUIRE(st.m == m_before);
  REQUIRE(st.v == v_before);
  REQUIRE(st.t == t_before);
  REQUIRE_THROWS_AS(
      adam_step(st, {p.data(), 2}, g,
                std::numeric_limits<double>::infinity()),
      NumericalError);
  Vec wrong(3);
  wrong.setZero();
  REQUIRE_THROWS_AS(adam_step(st, {p.data(), 2}, wrong, 0.01), ConfigError);
}

TEST_CASE("cosine schedule hits its endpoints exactly", "[train]") {
  const double lr0 = 3e-3, floor = 1e-5;
  REQUIRE(cosine_lr(0, 100, lr0, floor) == lr0);
  REQUIRE(cosine_lr(100, 100, lr0, floor) == floor);
  REQUIRE(cosine_lr(150, 100, lr0, floor) == floor);
  REQUIRE(cosine_lr(50, 100, lr0, floor) ==
          Catch::Approx(0.5 * (lr0 + floor)).epsilon(1e-12));
  double prev = lr0;
  for (int k = 1; k <= 100; ++k) {
    const double lr = cosine_lr(k, 100, lr0, floor);
    REQUIRE(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("l2 error is zero for the reference control and one for zero",
          "[train]") {
  const LinearOuSpec spec = LinearOuSpec::standard(2);
  const SocProblem p = make_linear_ou_problem(spec);
  const auto u_star = linear_ou_optimal_control(spec);

  FunctionPolicy same(2, u_star);
  REQUIRE(l2_error(p, same, u_star, 64, 16, 3) == 0.0);

  ConstantPolicy zero(2);
  Eigen::Map<Vec>(zero.params().data(), 2).setZero();
  REQUIRE(l2_error(p, zero, u_star, 64, 16, 3) == 1.0);

  // Fixed seed means a fixed evaluation set.
  MlpPolicyConfig cfg;
  cfg.dim = 2;
  cfg.hidden = {8};
  cfg.zero_init_last = false;
  MlpPolicy mlp(cfg);
  init_policy(mlp, 9);
  REQUIRE(l2_error(p, mlp, u_star, 64, 16, 3) ==
          l2_error(p, mlp, u_star, 64, 16, 3));
}

TEST_CASE("a short run learns the linear-ou control", "[train][slow]") {
  const LinearOuSpec spec = LinearOuSpec::standard(2);
  const SocProblem p = make_linear_ou_problem(spec);
  const auto u_star = linear_ou_optimal_control(spec);
  MlpPolicyConfig cfg;
  cfg.dim = 2;
  cfg.hidden = {16};
  cfg.fourier_pairs = 4;
  MlpPolicy policy(cfg);
  init_policy(policy, 1);

  TrainConfig tc;
  tc.iters = 60;
  tc.walkers = 256;
  tc.steps = 16;
  tc.lr = 1e-2;
  tc.seed = 7;
  tc.eval_every = 10;
  // Zero-initialized output layer: training starts at the uncontrolled
  // process, whose relative control error is exactly one.
  REQUIRE(l2_error(p, policy, u_star, tc.l2_walkers, tc.l2_steps, tc.seed) ==
          1.0);
  std::vector<MetricsRow> sunk;
  const auto res = train_loop(p, policy, tc, u_star,
                              [&](const MetricsRow& r) { sunk.push_back(r); });

  REQUIRE(!res.aborted);
  REQUIRE(res.iters_run == 60);
  REQUIRE(res.metrics.size() == sunk.size());
  REQUIRE(res.metrics.size() == 60);  // one row per iteration
  REQUIRE(res.metrics.front().iter == 1);
  REQUIRE(res.metrics.back().iter == 60);
  REQUIRE(res.metrics.front().l2_err < 1.0);  // first row is post-step
  REQUIRE(res.final_l2 < 0.55);
  REQUIRE(res.metrics.back().loss < res.metrics.front().loss);
  for (const auto& r : res.metrics) {
    REQUIRE(r.wall_s == 0.0);  // deterministic mode reports no wall time
    REQUIRE(std::isfinite(r.grad_norm));
    REQUIRE(r.lr <= tc.lr);
    // The reference error is refreshed only on the eval cadence and left
    // empty in between.
    const bool eval_it = r.iter == 1 || r.iter == tc.iters ||
                         r.iter % tc.eval_every == 0;
    REQUIRE(std::isfinite(r.l2_err) == eval_it);
  }
}

TEST_CASE("training is bitwise reproducible", "[train]") {
  // Two policies with the same seed but deliberately different allocation
  // histories (so their buffers land at unrelated addresses), trained with
  // different thread counts, must end at identical parameters.  This pins
  // down both schedule independence and the absence of alignment-dependent
  // reduction splits.
  const LinearOuSpec spec = LinearOuSpec::standard(2);
  const SocProblem p = make_linear_ou_problem(spec);
  MlpPolicyConfig cfg;
  cfg.dim = 2;
  cfg.hidden = {8};
  auto a = std::make_unique<MlpPolicy>(cfg);
  auto skew = std::make_unique<Vec>(Vec::Zero(123));  // perturb the heap
  auto b = std::make_unique<MlpPolicy>(cfg);
  init_policy(*a, 5);
  init_policy(*b, 5);
  TrainConfig tc;
  tc.iters = 8;
  tc.walkers = 300;  // a full block plus a partial one
  tc.steps = 8;
  tc.lr = 1e-2;
  tc.seed = 19;
  tc.eval_every = 0;
  train_loop(p, *a, tc);
  skew.reset();
  tc.threads = 4;  // thread count must not matter
  train_loop(p, *b, tc);
  for (std::size_t i = 0; i < a->params().size(); ++i)
    REQUIRE(a->params().data()[i] == b->params().data()[i]);
}

TEST_CASE("the pathwise estimator trains through the same loop", "[train]") {
  const LinearOuSpec spec = LinearOuSpec::standard(2);
  const SocProblem p = make_linear_ou_problem(spec);
  MlpPolicyConfig cfg;
  cfg.dim = 2;
  cfg.hidden = {8};
  MlpPolicy policy(cfg);
  init_policy(policy, 2);
  TrainConfig tc;
  tc.iters = 10;
  tc.walkers = 128;
  tc.steps = 8;
  tc.lr = 1e-2;
  tc.seed = 3;
  tc.estimator = EstimatorKind::vanilla;
  const auto res = train_loop(p, policy, tc);
  REQUIRE(!res.aborted);
  REQUIRE(res.iters_run == 10);
  REQUIRE(std::isfinite(res.final_loss));
}

TEST_CASE("early stopping halts a stalled run", "[train]") {
  const LinearOuSpec spec = LinearOuSpec::standard(1);
  const SocProblem p = make_linear_ou_problem(spec);
  ConstantPolicy policy(1);  // far too weak to keep improving
  Eigen::Map<Vec>(policy.params().data(), 1).setZero();
  TrainConfig tc;
  tc.iters = 200;
  tc.walkers = 64;
  tc.steps = 8;
  tc.lr = 1e-4;
  tc.seed = 11;
  tc.eval_every = 1;
  tc.patience = 3;
  tc.min_rel_improvement = 0.5;  // demands absurd progress, so it stalls
  std::vector<long long> ckpts;
  const auto res = train_loop(p, policy, tc, nullptr, nullptr,
                              [&](long long it) { ckpts.push_back(it); });
  REQUIRE(res.early_stopped);
  REQUIRE(res.iters_run < 200);
  REQUIRE(!ckpts.empty());
  REQUIRE(ckpts.back() == res.iters_run);
}

TEST_CASE("numerical failures abort cleanly", "[train]") {
  const LinearOuSpec spec = LinearOuSpec::standard(2);
  const SocProblem p = make_linear_ou_problem(spec);
  ConstantPolicy policy(2);
  Eigen::Map<Vec>(policy.params().data(), 2).setZero();
  TrainConfig tc;
  tc.iters = 5;
  tc.walkers = 32;
  tc.steps = 4;
  tc.lr = 1e-3;
  tc.divergence_guard = 1e-9;  // every walker trips the guard immediately
  std::vector<long long> ckpts;
  const auto res = train_loop(p, policy, tc, nullptr, nullptr,
                              [&](long long it) { ckpts.push_back(it); });
  REQUIRE(res.aborted);
  REQUIRE(!res.abort_reason.empty());
  REQUIRE(res.iters_run == 0);
  REQUIRE(ckpts == std::vector<long long>{0});

  // A guard wide enough to keep some walkers but strict_divergence set:
  // losing any walker is then a hard abort rather than a silent drop.
  TrainConfig ts = tc;
  ts.divergence_guard = 2.0;
  ts.strict_divergence = true;
  const auto res2 = train_loop(p, policy, ts);
  REQUIRE(res2.aborted);
  REQUIRE(res2.abort_reason == "diverged walkers under strict_divergence");
}

TEST_CASE("train_loop validates its configuration", "[train]") {
  const LinearOuSpec spec = LinearOuSpec::standard(1);
  const SocProblem p = make_linear_ou_problem(spec);
  ConstantPolicy policy(1);
  TrainConfig tc;
  tc.iters = 0;
  REQUIRE_THROWS_AS(train_loop(p, policy, tc), ConfigError);
  tc.iters = 1;
  tc.walkers = 0;
  REQUIRE_THROWS_AS(train_loop(p, policy, tc), ConfigError);
  tc.walkers = 1;
  tc.lr = 0.0;
  REQUIRE_THROWS_AS(train_loop(p, policy, tc), ConfigError);
}

TEST_CASE("the standard-gaussian bridge is already optimal at zero init",
          "[train][follmer]") {
  // Terminal cost U - |x|^2/2 vanishes identically for U = |x|^2/2, so the
  // objective is the bare control energy: the zero-initialized policy is the
  // optimum, every per-walker cost is exactly zero, and the gradient (score
  // term weighted by zero cost plus the energy term at u = 0) is exactly
  // zero too.  Training must therefore be a no-op, bit for bit.
  const auto fp = follmer_problem(gaussian_target(3));
  MlpPolicyConfig mc;
  mc.dim = 3;
  mc.hidden = {6};
  mc.fourier_pairs = 2;
  mc.zero_init_last = true;
  MlpPolicy policy(mc);
  init_policy(policy, 17);
  const Vec before = Eigen::Map<const Vec>(policy.params().data(),
                                           policy.params().size());
  TrainConfig tc;
  tc.iters = 20;
  tc.walkers = 64;
  tc.steps = 8;
  tc.seed = 5;
  tc.eval_every = 5;
  const auto res = train_loop(fp.soc, policy, tc);
  REQUIRE_FALSE(res.aborted);
  REQUIRE(res.iters_run == 20);
  for (const auto& row : res.metrics) REQUIRE(row.loss == 0.0);
  const Vec after = Eigen::Map<const Vec>(policy.params().data(),
                                          policy.params().size());
  REQUIRE((after - before).norm() == 0.0);
}
