// SPDX-License-Identifier: Apache-2.0
//
// socfree: experiment front end.
//
//   socfree train  --preset linear-ou --out runs/ou
//   socfree eval   --preset linear-ou --ckpt runs/ou/ckpt_final.bin --out runs/ou
//   socfree sample --preset funnel --ckpt runs/f/ckpt_final.bin --out runs/f
//   socfree bench  --preset linear-ou --out runs/bench
//
// Exit codes: 0 success, 1 usage/config error, 2 numerical abort.
//
// Artifacts (all under --out):
//   train : metrics.csv, ckpt_{iter}.bin, ckpt_final.bin, run.json
//   eval  : eval.json (also printed to stdout)
//   sample: samples.csv, result.json (also printed to stdout)
//   bench : bench.csv (also printed as a table)

#include <array>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "socfree/socfree.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace socfree;

namespace {

// ---------------------------------------------------------------------------
// Git-style content hash (SHA-1 over "blob <len>\0<bytes>"), so a config
// file's hash printed in run.json matches `git hash-object config.ini`.
// ---------------------------------------------------------------------------

class Sha1 {
 public:
  void update(const unsigned char* data, std::size_t len) {
    total_ += len;
    while (len > 0) {
      const std::size_t take = std::min(len, std::size_t(64) - fill_);
      std::memcpy(buf_.data() + fill_, data, take);
      fill_ += take;
      data += take;
      len -= take;
      if (fill_ == 64) {
        process();
        fill_ = 0;
      }
    }
  }

  std::string hex() {
    const std::uint64_t bits = total_ * 8;
    unsigned char pad = 0x80;
    update(&pad, 1);
    const unsigned char zero = 0;
    while (fill_ != 56) update(&zero, 1);
    for (int i = 7; i >= 0; --i) {
      const unsigned char b = static_cast<unsigned char>(bits >> (8 * i));
      update(&b, 1);
    }
    char out[41];
    for (int i = 0; i < 5; ++i)
      std::snprintf(out + 8 * i, 9, "%08x", h_[i]);
    return std::string(out, 40);
  }

 private:
  static std::uint32_t rol(std::uint32_t v, int s) {
    return (v << s) | (v >> (32 - s));
  }

  void process() {
    std::uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = (std::uint32_t(buf_[4 * i]) << 24) |
             (std::uint32_t(buf_[4 * i + 1]) << 16) |
             (std::uint32_t(buf_[4 * i + 2]) << 8) |
             std::uint32_t(buf_[4 * i + 3]);
    for (int i = 16; i < 80; ++i)
      w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5a827999;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ed9eba1;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8f1bbcdc;
      } else {
        f = b ^ c ^ d;
        k = 0xca62c1d6;
      }
      const std::uint32_t t = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = t;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
  }

  std::array<std::uint32_t, 5> h_ = {0x67452301, 0xefcdab89, 0x98badcfe,
                                     0x10325476, 0xc3d2e1f0};
  std::array<unsigned char, 64> buf_{};
  std::size_t fill_ = 0;
  std::uint64_t total_ = 0;
};

std::string git_blob_sha1(const std::string& content) {
  Sha1 sha;
  const std::string header = "blob " + std::to_string(content.size());
  sha.update(reinterpret_cast<const unsigned char*>(header.data()),
             header.size() + 1);  // includes the terminating NUL
  sha.update(reinterpret_cast<const unsigned char*>(content.data()),
             content.size());
  return sha.hex();
}

// ---------------------------------------------------------------------------
// Shared option plumbing.
// ---------------------------------------------------------------------------

struct CommonOpts {
  std::string config_path;
  std::string preset;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "configuration file (INI-style)")
      ->type_name("PATH");
  std::string names;
  for (const auto& p : preset_names()) names += (names.empty() ? "" : "|") + p;
  sub->add_option("--preset", o.preset, "named preset (" + names + ")")
      ->type_name("NAME");
  sub->add_option("--seed", o.seed, "RNG seed (overrides config)")
      ->type_name("INT");
  sub->add_option("--out", o.out, "output directory")->type_name("DIR");
  sub->add_option("--threads", o.threads, "worker threads, 0 = auto")
      ->type_name("INT");
}

// Resolves --preset / --config into one ExperimentConfig and remembers the
// bytes the content hash should cover.
struct ResolvedConfig {
  ExperimentConfig cfg;
  std::string original_text;  // file bytes, or the synthesized preset line
};

ResolvedConfig resolve_config(const CommonOpts& o) {
  ResolvedConfig r;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw ConfigError("config: cannot open '" + o.config_path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    r.original_text = ss.str();
    r.cfg = parse_config(r.original_text, o.config_path);
    if (!o.preset.empty() && !r.cfg.preset.empty() &&
        o.preset != r.cfg.preset)
      throw ConfigError("--preset " + o.preset + " conflicts with preset '" +
                        r.cfg.preset + "' named in " + o.config_path);
    if (!o.preset.empty() && r.cfg.preset.empty()) {
      // Apply the file as an overlay on the named preset.
      r.cfg = parse_config("preset = " + o.preset + "\n" + r.original_text,
                           o.config_path);
    }
  } else if (!o.preset.empty()) {
    r.original_text = "preset = " + o.preset + "\n";
    r.cfg = parse_config(r.original_text, "<cli>");
  } else {
    throw ConfigError("pass --preset NAME or --config PATH (see --help)");
  }
  if (o.seed) r.cfg.seed = *o.seed;
  if (o.threads) r.cfg.threads = *o.threads;
  if (!o.out.empty()) r.cfg.out = o.out;
  return r;
}

fs::path prepare_out_dir(const ExperimentConfig& cfg) {
  const fs::path dir(cfg.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw ConfigError("out: cannot create directory '" + cfg.out +
                      "': " + ec.message());
  // Probe writability early so a read-only target fails before any work.
  const fs::path probe = dir / ".write_probe";
  std::ofstream p(probe);
  if (!p) throw ConfigError("out: directory '" + cfg.out + "' is not writable");
  p.close();
  fs::remove(probe, ec);
  return dir;
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw ConfigError("cannot open '" + path.string() + "' for write");
  os << content;
  if (!os) throw ConfigError("write failed for '" + path.string() + "'");
}

json base_run_record(const char* subcommand, const ResolvedConfig& rc) {
  json j;
  j["subcommand"] = subcommand;
  j["preset"] = rc.cfg.preset;
  j["seed"] = rc.cfg.seed;
  j["threads"] = rc.cfg.threads;
  j["out"] = rc.cfg.out;
  j["config"] = serialize_config(rc.cfg);
  j["config_sha1"] = git_blob_sha1(rc.original_text);
  return j;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const CommonOpts& common, const std::string& dump_preset,
              std::optional<long long> iters, std::optional<int> walkers,
              std::optional<int> steps, const std::string& warm_start) {
  if (!dump_preset.empty()) {
    std::cout << preset_text(dump_preset);
    return 0;
  }
  ResolvedConfig rc = resolve_config(common);
  if (iters) rc.cfg.train.iters = *iters;
  if (walkers) rc.cfg.train.walkers = *walkers;
  if (steps) rc.cfg.train.steps = *steps;
  BuiltExperiment built = build_experiment(rc.cfg);
  rc.cfg = built.cfg;  // materialized dims, seed, threads
  const fs::path dir = prepare_out_dir(rc.cfg);
  if (!warm_start.empty())
    load_checkpoint(warm_start, built.policy->params());

  std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
  if (!metrics)
    throw ConfigError("cannot open '" + (dir / "metrics.csv").string() + "'");
  metrics << "iter,wall_s,loss,l2_err,grad_norm,diverged,lr\n";
  const auto row_sink = [&](const MetricsRow& row) {
    metrics << row.iter << ',' << fmt_double(row.wall_s) << ','
            << fmt_double(row.loss) << ',' << fmt_double(row.l2_err) << ','
            << fmt_double(row.grad_norm) << ',' << row.diverged << ','
            << fmt_double(row.lr) << '\n';
    metrics.flush();
  };
  std::vector<std::string> artifacts = {"metrics.csv", "run.json"};
  const auto ckpt_sink = [&](long long iter) {
    const std::string name = "ckpt_" + std::to_string(iter) + ".bin";
    save_checkpoint((dir / name).string(), built.policy->params());
    artifacts.push_back(name);
  };

  const TrainResult result = train_loop(built.problem, *built.policy,
                                        rc.cfg.train, built.u_star, row_sink,
                                        ckpt_sink);
  save_checkpoint((dir / "ckpt_final.bin").string(), built.policy->params());
  artifacts.push_back("ckpt_final.bin");

  json run = base_run_record("train", rc);
  run["artifacts"] = artifacts;
  run["iters_run"] = result.iters_run;
  run["aborted"] = result.aborted;
  run["abort_reason"] = result.abort_reason;
  run["early_stopped"] = result.early_stopped;
  run["final_loss"] = result.final_loss;
  if (!std::isnan(result.final_l2)) run["final_l2"] = result.final_l2;
  run["problem_tag"] = built.problem.tag;
  write_text(dir / "run.json", run.dump(2) + "\n");

  if (result.aborted) {
    std::cerr << "numerical abort after " << result.iters_run
              << " iterations: " << result.abort_reason << "\n";
    return 2;
  }
  std::cout << "trained " << result.iters_run << " iterations"
            << (result.early_stopped ? " (early stop)" : "") << ", final loss "
            << fmt_double(result.final_loss);
  if (!std::isnan(result.final_l2))
    std::cout << ", final l2_err " << fmt_double(result.final_l2);
  std::cout << "\nartifacts in " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CommonOpts& common, const std::string& ckpt_path,
             std::optional<int> n_opt) {
  ResolvedConfig rc = resolve_config(common);
  BuiltExperiment built = build_experiment(rc.cfg);
  rc.cfg = built.cfg;
  if (ckpt_path.empty())
    throw ConfigError("eval: --ckpt PATH is required");
  load_checkpoint(ckpt_path, built.policy->params());

  const int n = n_opt.value_or(rc.cfg.sample.n);
  const int steps = rc.cfg.sample.steps;
  const RngSeq seq{rc.cfg.seed, 1};
  const TimeGrid grid = make_uniform_grid(steps, built.problem.horizon);
  const WienerPath wiener =
      sample_wiener_increments(grid, n, built.problem.dim, seq);
  GradOptions gopts;
  gopts.divergence_guard = rc.cfg.sample.guard;
  gopts.threads = rc.cfg.threads;
  const ObjectiveEstimate obj =
      objective_estimate(built.problem, *built.policy, grid, wiener, seq,
                         gopts);

  // Estimator cross-checks on a fresh shared batch: the two gradient
  // assemblies must agree, and both estimators must report the same loss.
  const int n_check = std::min(n, 512);
  const WienerPath wcheck =
      sample_wiener_increments(grid, n_check, built.problem.dim, seq);
  gopts.path = SimfreePath::direct;
  const GradEstimate g_direct = simfree_gradient(built.problem, *built.policy,
                                                 grid, wcheck, seq, gopts);
  gopts.path = SimfreePath::stopgrad_loss;
  const GradEstimate g_stop = simfree_gradient(built.problem, *built.policy,
                                               grid, wcheck, seq, gopts);
  const GradEstimate g_van = vanilla_gradient(built.problem, *built.policy,
                                              grid, wcheck, seq, gopts);
  const double denom = std::max(1e-300, g_direct.grad.norm());
  json checks;
  checks["simfree_loss"] = g_direct.loss;
  checks["vanilla_loss"] = g_van.loss;
  checks["loss_abs_diff"] = std::abs(g_direct.loss - g_van.loss);
  checks["dual_path_grad_rel_diff"] =
      (g_direct.grad - g_stop.grad).norm() / denom;
  checks["n_check"] = n_check;

  json report;
  report["objective"] = obj.value;
  report["objective_std_err"] = obj.std_err;
  report["n"] = obj.n_kept;
  report["n_diverged"] = obj.n_total - obj.n_kept;
  report["checkpoint"] = ckpt_path;
  report["seed"] = rc.cfg.seed;
  report["cross_checks"] = checks;
  if (built.u_star) {
    report["l2_err"] =
        l2_error(built.problem, *built.policy, built.u_star,
                 rc.cfg.train.l2_walkers, rc.cfg.train.l2_steps, rc.cfg.seed,
                 rc.cfg.threads);
  }

  const fs::path dir = prepare_out_dir(rc.cfg);
  write_text(dir / "eval.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

int cmd_sample(const CommonOpts& common, const std::string& ckpt_path,
               std::optional<int> n_opt, std::optional<int> steps_opt) {
  ResolvedConfig rc = resolve_config(common);
  BuiltExperiment built = build_experiment(rc.cfg);
  rc.cfg = built.cfg;
  if (!built.can_sample())
    throw ConfigError("sample: problem kind '" + rc.cfg.problem.kind +
                      "' has no sampling target (use funnel, gaussian or "
                      "tilted-gaussian)");
  if (!ckpt_path.empty()) load_checkpoint(ckpt_path, built.policy->params());

  const int n = n_opt.value_or(rc.cfg.sample.n);
  const int steps = steps_opt.value_or(rc.cfg.sample.steps);
  if (n < 1) throw ConfigError("sample: n must be >= 1");
  if (steps < 1) throw ConfigError("sample: steps must be >= 1");
  SampleOptions opts;
  opts.grid_mode = detail::parse_grid_mode(rc.cfg.sample.grid, "[sample]");
  opts.divergence_guard = rc.cfg.sample.guard;
  opts.strict = rc.cfg.sample.strict;
  opts.threads = rc.cfg.threads;
  const RngSeq seq{rc.cfg.seed, 1};

  WeightedSampleSet set;
  if (built.reward) {
    set = finetune_weights(*built.base_follmer, built.reward, *built.policy, n,
                           steps, seq, opts);
  } else {
    set = follmer_sample(*built.follmer, *built.policy, n, steps, seq, opts);
  }

  const fs::path dir = prepare_out_dir(rc.cfg);
  {
    std::ofstream csv(dir / "samples.csv", std::ios::trunc);
    if (!csv)
      throw ConfigError("cannot open '" + (dir / "samples.csv").string() +
                        "'");
    for (int c = 0; c < set.dim; ++c) csv << "x_" << c << ',';
    csv << "log_w\n";
    for (int i = 0; i < set.size(); ++i) {
      for (int c = 0; c < set.dim; ++c)
        csv << fmt_double(set.samples(c, i)) << ',';
      csv << fmt_double(set.log_weights[i]) << '\n';
    }
    if (!csv) throw ConfigError("write failed for samples.csv");
  }

  const LogZEstimate est = log_z_estimate(set.log_weights);
  json summary;
  summary["log_z"] = est.log_z;
  summary["std_err"] = est.std_err;
  summary["ess"] = est.ess;
  summary["n"] = est.n;
  summary["seed"] = rc.cfg.seed;
  summary["n_requested"] = set.requested_n;
  summary["n_diverged"] = set.n_diverged;
  summary["steps"] = steps;
  summary["problem_tag"] = set.problem_tag;
  summary["checkpoint"] = ckpt_path;
  write_text(dir / "result.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int cmd_bench(const CommonOpts& common, std::optional<int> walkers_opt,
              int repeats) {
  ResolvedConfig rc = resolve_config(common);
  BuiltExperiment built = build_experiment(rc.cfg);
  rc.cfg = built.cfg;
  const int n = walkers_opt.value_or(std::min(rc.cfg.train.walkers, 2000));
  const std::vector<int> ks = {32, 64, 128, 256};
  GradOptions gopts;
  gopts.divergence_guard = rc.cfg.train.divergence_guard;
  gopts.threads = rc.cfg.threads;

  struct Row {
    const char* estimator;
    int K;
    int stored;
    double wall_s;
  };
  std::vector<Row> rows;
  for (const char* which : {"simfree", "vanilla"}) {
    for (int K : ks) {
      double best = std::numeric_limits<double>::infinity();
      int stored = -1;
      for (int r = 0; r < repeats; ++r) {
        const RngSeq seq{rc.cfg.seed, static_cast<std::uint64_t>(r + 1)};
        const TimeGrid grid = make_uniform_grid(K, built.problem.horizon);
        const WienerPath wiener =
            sample_wiener_increments(grid, n, built.problem.dim, seq);
        const GradEstimate est =
            std::string(which) == "simfree"
                ? simfree_gradient(built.problem, *built.policy, grid, wiener,
                                   seq, gopts)
                : vanilla_gradient(built.problem, *built.policy, grid, wiener,
                                   seq, gopts);
        best = std::min(best, est.wall_seconds);
        stored = est.stored_step_records;
      }
      rows.push_back({which, K, stored, best});
    }
  }

  const fs::path dir = prepare_out_dir(rc.cfg);
  std::ostringstream csv;
  csv << "estimator,K,stored_step_records,wall_s\n";
  std::printf("%-10s %6s %20s %12s\n", "estimator", "K", "stored_records",
              "wall_s");
  for (const Row& r : rows) {
    csv << r.estimator << ',' << r.K << ',' << r.stored << ','
        << fmt_double(r.wall_s) << '\n';
    std::printf("%-10s %6d %20d %12.4f\n", r.estimator, r.K, r.stored,
                r.wall_s);
  }
  write_text(dir / "bench.csv", csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "socfree: simulation-free stochastic optimal control experiments"};
  app.require_subcommand(1);

  CommonOpts train_opts, eval_opts, sample_opts, bench_opts;
  std::string dump_preset, train_warm, eval_ckpt, sample_ckpt;
  std::optional<long long> train_iters;
  std::optional<int> train_walkers, train_steps, eval_n, sample_n,
      sample_steps, bench_walkers;
  int bench_repeats = 3;

  CLI::App* train = app.add_subcommand("train", "train a control policy");
  add_common(train, train_opts);
  train->add_option("--dump-preset", dump_preset,
                    "print the named preset's config text and exit")
      ->type_name("NAME");
  train->add_option("--iters", train_iters, "override [train] iters");
  train->add_option("--walkers", train_walkers, "override [train] walkers");
  train->add_option("--steps", train_steps, "override [train] steps");
  train->add_option("--ckpt", train_warm, "warm-start checkpoint")
      ->type_name("PATH");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_opts);
  eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate")
      ->type_name("PATH");
  eval->add_option("--n", eval_n, "evaluation walkers");

  CLI::App* sample =
      app.add_subcommand("sample", "draw weighted samples of the target");
  add_common(sample, sample_opts);
  sample->add_option("--ckpt", sample_ckpt,
                     "policy checkpoint (omit for the fresh init)")
      ->type_name("PATH");
  sample->add_option("--n", sample_n, "override [sample] n");
  sample->add_option("--steps", sample_steps, "override [sample] steps");

  CLI::App* bench = app.add_subcommand(
      "bench", "per-iteration cost and retained-state scaling in K");
  add_common(bench, bench_opts);
  bench->add_option("--walkers", bench_walkers, "walkers per measurement");
  bench->add_option("--repeats", bench_repeats,
                    "measurements per point (min is reported)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (train->parsed())
      return cmd_train(train_opts, dump_preset, train_iters, train_walkers,
                       train_steps, train_warm);
    if (eval->parsed()) return cmd_eval(eval_opts, eval_ckpt, eval_n);
    if (sample->parsed())
      return cmd_sample(sample_opts, sample_ckpt, sample_n, sample_steps);
    if (bench->parsed())
      return cmd_bench(bench_opts, bench_walkers, bench_repeats);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
