// SPDX-License-Identifier: Apache-2.0
//
// Config parser unit tests plus end-to-end tests of the `socfree` binary
// (run as a subprocess; its path is injected by CMake as SOCFREE_CLI_PATH).

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "socfree/socfree.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace socfree;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  REQUIRE(out);
  out << text;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

// A scratch directory per test run, cleaned up eagerly at the start so a
// crashed previous run cannot leak stale artifacts into assertions.
fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "socfree_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI with `args`, capturing exit code, stdout and stderr.
RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out = scratch_dir() / ("stdout_" + std::to_string(counter));
  const fs::path err = scratch_dir() / ("stderr_" + std::to_string(counter));
  ++counter;
  const std::string cmd = std::string(SOCFREE_CLI_PATH) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  REQUIRE(status != -1);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

}  // namespace

// ===========================================================================
// Parser.
// ===========================================================================

TEST_CASE("unknown keys and sections are rejected with source and line",
          "[config]") {
  REQUIRE_THROWS_WITH(parse_config("foo = 1\n", "t.ini"),
                      ContainsSubstring("t.ini:1") &&
                          ContainsSubstring("unknown key 'foo'") &&
                          ContainsSubstring("at top level"));
  REQUIRE_THROWS_WITH(parse_config("[train]\nbogus = 2\n", "t.ini"),
                      ContainsSubstring("t.ini:2") &&
                          ContainsSubstring("unknown key 'bogus'") &&
                          ContainsSubstring("in [train]"));
  REQUIRE_THROWS_WITH(parse_config("[magic]\n", "t.ini"),
                      ContainsSubstring("unknown section [magic]"));
  REQUIRE_THROWS_WITH(parse_config("[problem\nkind = funnel\n", "t.ini"),
                      ContainsSubstring("malformed section header"));
  REQUIRE_THROWS_WITH(parse_config("seed\n", "t.ini"),
                      ContainsSubstring("expected 'key = value'"));
  REQUIRE_THROWS_WITH(parse_config("seed =\n", "t.ini"),
                      ContainsSubstring("empty key or value"));
}

TEST_CASE("values are validated as they are parsed", "[config]") {
  REQUIRE_THROWS_WITH(parse_config("[problem]\ndim = abc\n", "t.ini"),
                      ContainsSubstring("t.ini:2") &&
                          ContainsSubstring("not an integer"));
  REQUIRE_THROWS_WITH(parse_config("[problem]\nhorizon = 1.5x\n", "t.ini"),
                      ContainsSubstring("trailing characters"));
  REQUIRE_THROWS_WITH(
      parse_config("[train]\ndeterministic = maybe\n", "t.ini"),
      ContainsSubstring("expected true or false"));
  REQUIRE_THROWS_WITH(parse_config("[train]\ngrid = diagonal\n", "t.ini"),
                      ContainsSubstring("grid must be 'uniform' or "
                                        "'randomized'"));
  // Comments and blank lines are ignored; inline comments are stripped.
  const auto cfg = parse_config(
      "# header comment\n\nseed = 9  # trailing comment\n", "t.ini");
  REQUIRE(cfg.seed == 9);
}

TEST_CASE("the estimator field accepts only the two trainers", "[config]") {
  const auto ok = parse_config("[train]\nestimator = vanilla\n");
  REQUIRE(ok.train.estimator == EstimatorKind::vanilla);
  REQUIRE_THROWS_WITH(parse_config("[train]\nestimator = offpolicy\n"),
                      ContainsSubstring("must be 'simfree' or 'vanilla'") &&
                          ContainsSubstring("evaluation device"));
}

TEST_CASE("matrix and vector shorthand", "[config]") {
  const auto mat = [](const std::string& raw, int dim) {
    TensorField f;
    f.raw = raw;
    f.line = 1;
    return detail::materialize_matrix(f, dim, "A");
  };
  const auto vec = [](const std::string& raw, int dim) {
    TensorField f;
    f.raw = raw;
    f.line = 1;
    return detail::materialize_vector(f, dim, "gamma");
  };
  REQUIRE((mat("I", 3) - Mat::Identity(3, 3)).norm() == 0.0);
  REQUIRE((mat("0.25*I", 2) - 0.25 * Mat::Identity(2, 2)).norm() == 0.0);
  Mat dense(2, 2);
  dense << 1, 2, 3, 4;  // row-major listing
  REQUIRE((mat("1, 2, 3, 4", 2) - dense).norm() == 0.0);
  REQUIRE_THROWS_WITH(mat("1, 2, 3", 2),
                      ContainsSubstring("dense matrix needs 4"));
  // A scalar broadcasts to a constant vector.
  REQUIRE((vec("0.5", 3) - Vec::Constant(3, 0.5)).norm() == 0.0);
  Vec v(3);
  v << 1, 2, 3;
  REQUIRE((vec("1, 2, 3", 3) - v).norm() == 0.0);
}

TEST_CASE("presets resolve and overlays win", "[config]") {
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const auto cfg = parse_config("preset = " + name + "\n");
    REQUIRE(cfg.preset == name);
    REQUIRE(!cfg.problem.kind.empty());
  }
  REQUIRE_THROWS_WITH(parse_config("preset = warp-drive\n"),
                      ContainsSubstring("unknown preset 'warp-drive'") &&
                          ContainsSubstring("linear-ou"));
  REQUIRE_THROWS_WITH(parse_config("preset = funnel\npreset = linear-ou\n"),
                      ContainsSubstring("conflicting preset names"));

  const auto base = parse_config("preset = lqr-easy\n");
  const auto over = parse_config(
      "preset = lqr-easy\nseed = 11\n[train]\niters = 7\n");
  REQUIRE(over.train.iters == 7);
  REQUIRE(over.seed == 11);
  REQUIRE(over.train.walkers == base.train.walkers);  // untouched keys keep
  REQUIRE(over.problem.kind == "lqr");                // the preset's values
}

TEST_CASE("serialization is a fixpoint of parsing", "[config]") {
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const auto cfg = parse_config("preset = " + name + "\n");
    const std::string s1 = serialize_config(cfg);
    const auto cfg2 = parse_config(s1, "roundtrip");
    REQUIRE(serialize_config(cfg2) == s1);
  }
}

TEST_CASE("build_experiment wires each preset's pieces", "[config]") {
  const auto build = [](const std::string& name) {
    return build_experiment(parse_config("preset = " + name + "\n"));
  };

  const auto ou = build("linear-ou");
  REQUIRE(ou.policy != nullptr);
  REQUIRE(ou.u_star != nullptr);  // analytic reference control
  REQUIRE(!ou.can_sample());
  REQUIRE(ou.problem.dim == 8);

  const auto lqr = build("lqr-easy");
  REQUIRE(lqr.riccati != nullptr);
  REQUIRE(lqr.u_star != nullptr);
  REQUIRE(!lqr.can_sample());

  const auto fun = build("funnel");
  REQUIRE(fun.can_sample());
  REQUIRE(fun.u_star == nullptr);
  REQUIRE(!fun.reward);
  REQUIRE(fun.problem.dim == 10);

  const auto gau = build("gaussian-follmer");
  REQUIRE(gau.can_sample());
  REQUIRE(!gau.reward);

  const auto tilt = build("finetune-toy");
  REQUIRE(tilt.can_sample());
  REQUIRE(tilt.reward);
  REQUIRE(tilt.base_follmer.has_value());
  REQUIRE(tilt.problem.dim == 2);
}

TEST_CASE("a config without a problem fails at build time", "[config]") {
  REQUIRE_THROWS_WITH(build_experiment(parse_config("seed = 1\n")),
                      ContainsSubstring("kind not set"));
}

// ===========================================================================
// CLI subprocess tests.
// ===========================================================================

TEST_CASE("help exits zero, missing subcommand is a usage error", "[cli]") {
  REQUIRE(run_cli("--help").exit_code == 0);
  REQUIRE(run_cli("train --help").exit_code == 0);
  REQUIRE(run_cli("").exit_code == 1);
  REQUIRE(run_cli("frobnicate").exit_code == 1);
}

TEST_CASE("train needs a problem source", "[cli]") {
  const auto r = run_cli("train --out " + (scratch_dir() / "none").string());
  REQUIRE(r.exit_code == 1);
  REQUIRE_THAT(r.err, ContainsSubstring("--preset") &&
                          ContainsSubstring("--config"));
}

TEST_CASE("a missing config file names the path", "[cli]") {
  const auto r = run_cli("train --config /no/such/file.ini");
  REQUIRE(r.exit_code == 1);
  REQUIRE_THAT(r.err, ContainsSubstring("/no/such/file.ini"));
}

TEST_CASE("config errors from a file carry file and line", "[cli]") {
  const fs::path bad = scratch_dir() / "bad.ini";
  spit(bad, "preset = lqr-easy\n[train]\nwalkrs = 64\n");
  const auto r = run_cli("train --config " + bad.string());
  REQUIRE(r.exit_code == 1);
  REQUIRE_THAT(r.err, ContainsSubstring("bad.ini:3") &&
                          ContainsSubstring("unknown key 'walkrs'"));
}

TEST_CASE("--dump-preset prints the preset text", "[cli]") {
  const auto r = run_cli("train --dump-preset funnel");
  REQUIRE(r.exit_code == 0);
  REQUIRE_THAT(r.out, ContainsSubstring("[problem]") &&
                          ContainsSubstring("kind = funnel"));
  REQUIRE(run_cli("train --dump-preset warp-drive").exit_code == 1);
}

TEST_CASE("train writes one metrics row per iteration, reproducibly",
          "[cli][slow]") {
  const fs::path a = scratch_dir() / "train_a";
  const fs::path b = scratch_dir() / "train_b";
  const std::string common =
      "train --preset lqr-easy --iters 6 --walkers 32 --seed 5 --out ";
  REQUIRE(run_cli(common + a.string()).exit_code == 0);
  REQUIRE(run_cli(common + b.string()).exit_code == 0);

  const std::string ma = slurp(a / "metrics.csv");
  REQUIRE(count_lines(ma) == 7);  // header + one row per iteration
  REQUIRE(ma.rfind("iter,wall_s,loss,l2_err,grad_norm,diverged,lr\n", 0) == 0);
  REQUIRE(ma == slurp(b / "metrics.csv"));  // byte-identical reruns
  REQUIRE(slurp(a / "ckpt_final.bin") == slurp(b / "ckpt_final.bin"));

  const json run = json::parse(slurp(a / "run.json"));
  REQUIRE(run["iters_run"] == 6);
  REQUIRE(run["aborted"] == false);
  REQUIRE(run["subcommand"] == "train");
  REQUIRE(run["preset"] == "lqr-easy");
  REQUIRE(run["seed"] == 5);
  REQUIRE(std::isfinite(run["final_loss"].get<double>()));
  // The resolved config is round-trippable and reflects the overrides.
  const auto cfg = parse_config(run["config"].get<std::string>(), "run.json");
  REQUIRE(cfg.train.iters == 6);
  REQUIRE(cfg.train.walkers == 32);
}

TEST_CASE("a numerical abort exits 2 and records the reason", "[cli]") {
  const fs::path cfg = scratch_dir() / "abort.ini";
  spit(cfg,
       "preset = lqr-easy\n"
       "[train]\niters = 3\nwalkers = 16\nguard = 1e-12\nstrict = true\n");
  const fs::path out = scratch_dir() / "abort_out";
  const auto r =
      run_cli("train --config " + cfg.string() + " --out " + out.string());
  REQUIRE(r.exit_code == 2);
  REQUIRE_THAT(r.err, ContainsSubstring("numerical abort"));
  const json run = json::parse(slurp(out / "run.json"));
  REQUIRE(run["aborted"] == true);
  REQUIRE_THAT(run["abort_reason"].get<std::string>(),
               ContainsSubstring("diverged"));
}

TEST_CASE("an out path blocked by a file is a config error", "[cli]") {
  const fs::path blocker = scratch_dir() / "blocker";
  spit(blocker, "not a directory\n");
  const auto r =
      run_cli("train --preset lqr-easy --iters 1 --walkers 8 --out " +
              blocker.string());
  REQUIRE(r.exit_code == 1);
  REQUIRE_THAT(r.err, ContainsSubstring(blocker.string()));
}

TEST_CASE("eval requires a checkpoint and rejects a corrupt one", "[cli]") {
  REQUIRE(run_cli("eval --preset lqr-easy").exit_code == 1);
  const fs::path junk = scratch_dir() / "junk.bin";
  spit(junk, "this is not a checkpoint");
  const auto r = run_cli("eval --preset lqr-easy --ckpt " + junk.string() +
                         " --out " + (scratch_dir() / "eval_junk").string());
  REQUIRE(r.exit_code == 1);
}

TEST_CASE("the gaussian bridge samples exactly at zero control",
          "[cli][follmer]") {
  const fs::path out = scratch_dir() / "gauss";
  const auto r = run_cli(
      "sample --preset gaussian-follmer --n 100 --steps 32 --seed 2 --out " +
      out.string());
  REQUIRE(r.exit_code == 0);
  const json res = json::parse(slurp(out / "result.json"));
  // For the standard normal target every importance weight equals
  // (2 pi)^{d/2}, so the log-normalizer is exact and the effective sample
  // size is the full budget.
  const double expect = 5.0 * std::log(2.0 * M_PI);
  REQUIRE(res["log_z"].get<double>() == Approx(expect).margin(1e-10));
  REQUIRE(res["std_err"].get<double>() == Approx(0.0).margin(1e-12));
  REQUIRE(res["ess"].get<double>() == 100.0);
  REQUIRE(res["n"] == 100);
  REQUIRE(res["n_diverged"] == 0);

  const std::string csv = slurp(out / "samples.csv");
  REQUIRE(count_lines(csv) == 101);  // header + one row per sample
  REQUIRE(csv.rfind("x_0,", 0) == 0);
  const std::string header = csv.substr(0, csv.find('\n'));
  REQUIRE_THAT(header, ContainsSubstring("x_9,log_w"));
}

TEST_CASE("fine-tuning weights recover the tilted normalizer", "[cli]") {
  const fs::path out = scratch_dir() / "toy";
  const auto r = run_cli(
      "sample --preset finetune-toy --n 4000 --steps 32 --seed 3 --out " +
      out.string());
  REQUIRE(r.exit_code == 0);
  const json res = json::parse(slurp(out / "result.json"));
  // Base N(0, I_2), reward r(x) = a . x with a = 0.3 * ones:
  // log E[e^{r}] = |a|^2 / 2 = 0.09.
  const double truth = 0.09;
  const double se = res["std_err"].get<double>();
  REQUIRE(se > 0.0);
  REQUIRE(std::abs(res["log_z"].get<double>() - truth) < 3.5 * se);
}

TEST_CASE("bench reports per-step storage and a CSV table", "[cli]") {
  const fs::path out = scratch_dir() / "bench";
  const auto r = run_cli("bench --preset linear-ou --walkers 8 --repeats 1 "
                         "--seed 1 --out " +
                         out.string());
  REQUIRE(r.exit_code == 0);
  const std::string csv = slurp(out / "bench.csv");
  REQUIRE(count_lines(csv) == 9);  // header + 2 estimators x 4 horizons
  REQUIRE(csv.rfind("estimator,K,stored_step_records,wall_s\n", 0) == 0);
  // The simulation-free estimator stores nothing per step; the
  // differentiate-through-the-chain baseline stores one record per step.
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string est, k, stored;
    std::getline(row, est, ',');
    std::getline(row, k, ',');
    std::getline(row, stored, ',');
    if (est == "simfree") {
      REQUIRE(stored == "0");
    } else {
      REQUIRE(est == "vanilla");
      REQUIRE(stored == k);
    }
  }
}
