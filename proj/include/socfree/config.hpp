// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: a strict, flat INI-style text format with
// sections [problem], [policy], [train] and [sample], plus the top-level
// keys `preset`, `seed`, `threads` and `out`.  Unknown sections or keys
// fail fast with a line diagnostic; matrices accept the scalar*identity
// shorthand ("0.2*I", "I") or a dense row-major list; vectors accept a
// scalar broadcast or a dense list.
//
// Named presets (linear-ou, lqr-easy, lqr-hard, funnel, gaussian-follmer,
// finetune-toy) are embedded here as plain config text: `preset = NAME`
// loads the named text first and the remaining keys overlay it, so a user
// file can scale a preset up or down without restating it.
#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "socfree/checkpoint.hpp"
#include "socfree/policy.hpp"
#include "socfree/problems/follmer.hpp"
#include "socfree/problems/funnel.hpp"
#include "socfree/problems/linear_ou.hpp"
#include "socfree/problems/lqr.hpp"
#include "socfree/sampling.hpp"
#include "socfree/train.hpp"

namespace socfree {

// A matrix- or vector-valued field is kept as raw text until the problem
// dimension is known; `line` points error messages back at the source.
struct TensorField {
  std::string raw;
  int line = 0;

  bool set() const { return !raw.empty(); }
};

struct ProblemConfig {
  std::string kind;  // linear-ou | lqr | funnel | gaussian | tilted-gaussian
  int dim = 0;
  double horizon = 1.0;
  TensorField A, P, Q, sigma0;        // matrices
  TensorField gamma, x0_mean, x0_std; // vectors
  TensorField reward_a;               // tilted-gaussian reward direction
  std::string x0 = "gaussian";        // gaussian | point
  double funnel_scale = 1.0;          // std of the funnel neck coordinate
  double stddev = 1.0;                // gaussian target std
  int riccati_steps = 4096;
};

struct PolicyConfig {
  std::string arch = "mlp";  // mlp | pis | constant | affine
  std::vector<int> hidden = {64, 64};
  int fourier_pairs = 8;
  int units = 64;
  std::string activation = "tanh";
  bool zero_init_last = true;
};

struct SampleConfig {
  int n = 10000;
  int steps = 64;
  std::string grid = "uniform";
  double guard = 1e6;
  bool strict = false;
};

struct ExperimentConfig {
  std::string preset;  // resolved preset name, empty when fully inline
  ProblemConfig problem;
  PolicyConfig policy;
  TrainConfig train;
  std::string train_grid = "randomized";
  std::string train_estimator = "simfree";
  SampleConfig sample;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out = "socfree_out";
};

// ---------------------------------------------------------------------------
// Presets.
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "linear-ou",        "lqr-easy",     "lqr-hard",
      "funnel",           "gaussian-follmer", "finetune-toy"};
  return names;
}

inline std::string preset_text(const std::string& name) {
  if (name == "linear-ou")
    return R"(# Linear Ornstein-Uhlenbeck control problem, desk scale.
# Drift b(x) = Ax, terminal cost gamma . x; the optimal control
# -sigma0^T exp(A^T (T - t)) gamma is known in closed form, so training
# reports the relative L2 control error.
[problem]
kind = linear-ou
dim = 8
horizon = 1
A = 0.2*I
sigma0 = I
gamma = 1
x0 = gaussian
x0_mean = 0
x0_std = 0.70710678118654752

[policy]
arch = mlp
hidden = 16,16
fourier_pairs = 4
activation = tanh
zero_init_last = true

[train]
iters = 5000
walkers = 1000
steps = 64
grid = randomized
estimator = simfree
lr = 3e-4
lr_floor = 0
eval_every = 50
ckpt_every = 0
l2_walkers = 256
l2_steps = 32
guard = 1e6
strict = false
patience = 0
deterministic = true
)";
  if (name == "lqr-easy")
    return R"(# Linear-quadratic regulator, easy setting, desk scale:
# modest drift and costs (A = P = 0.2 I, Q = 0.1 I).  The Riccati solve
# provides the reference control for the L2 error column.
[problem]
kind = lqr
dim = 8
horizon = 1
A = 0.2*I
P = 0.2*I
Q = 0.1*I
sigma0 = I
riccati_steps = 4096
x0 = gaussian
x0_mean = 0
x0_std = 0.70710678118654752

[policy]
arch = mlp
hidden = 24,24
fourier_pairs = 4
activation = tanh
zero_init_last = true

[train]
iters = 10000
walkers = 512
steps = 32
grid = randomized
estimator = simfree
lr = 3e-4
lr_floor = 0
eval_every = 100
ckpt_every = 0
l2_walkers = 256
l2_steps = 32
guard = 1e6
strict = false
patience = 0
deterministic = true
)";
  if (name == "lqr-hard")
    return R"(# Linear-quadratic regulator, hard setting, desk scale:
# unstable drift and stronger costs (A = P = I, Q = 0.5 I), no warm start.
[problem]
kind = lqr
dim = 8
horizon = 1
A = I
P = I
Q = 0.5*I
sigma0 = I
riccati_steps = 4096
x0 = gaussian
x0_mean = 0
x0_std = 0.70710678118654752

[policy]
arch = mlp
hidden = 24,24
fourier_pairs = 4
activation = tanh
zero_init_last = true

[train]
iters = 10000
walkers = 512
steps = 32
grid = randomized
estimator = simfree
lr = 3e-4
lr_floor = 0
eval_every = 100
ckpt_every = 0
l2_walkers = 256
l2_steps = 32
guard = 1e6
strict = false
patience = 0
deterministic = true
)";
  if (name == "funnel")
    return R"(# Neal's funnel in d = 10: x_0 ~ N(0, s^2), x_i | x_0 ~ N(0, e^{x_0}).
# Trains a score-gated sampler network on the bridge objective; `sample`
# then importance-weights terminal states to estimate log Z (true value 0).
[problem]
kind = funnel
dim = 10
funnel_scale = 1.0

[policy]
arch = pis
units = 16
fourier_pairs = 8
activation = tanh
zero_init_last = true

[train]
iters = 5000
walkers = 1000
steps = 100
grid = randomized
estimator = simfree
lr = 5e-3
lr_floor = 0
eval_every = 100
ckpt_every = 1000
guard = 1e6
strict = false
patience = 0
deterministic = true

[sample]
n = 10000
steps = 100
grid = uniform
guard = 1e6
strict = false
)";
  if (name == "gaussian-follmer")
    return R"(# Standard-Gaussian bridge target: the zero control is already optimal,
# every importance weight equals (2 pi)^{d/2} exactly, and log Z comes out
# as (d/2) log 2 pi with zero variance.  Useful as an end-to-end certificate.
[problem]
kind = gaussian
dim = 10
stddev = 1.0

[policy]
arch = pis
units = 16
fourier_pairs = 8
activation = tanh
zero_init_last = true

[train]
iters = 500
walkers = 512
steps = 32
grid = randomized
estimator = simfree
lr = 1e-3
lr_floor = 0
eval_every = 10
ckpt_every = 0
guard = 1e6
strict = false
patience = 0
deterministic = true

[sample]
n = 10000
steps = 64
grid = uniform
guard = 1e6
strict = false
)";
  if (name == "finetune-toy")
    return R"(# Reward fine-tuning toy: tilt a standard Gaussian by r(x) = a . x.
# `sample` reweights with log M_r = -(energy + ito) + r(x_1); the log of
# E[M_r] has the closed form |a|^2 / 2 for the zero control.
[problem]
kind = tilted-gaussian
dim = 2
stddev = 1.0
reward_a = 0.3

[policy]
arch = pis
units = 8
fourier_pairs = 4
activation = tanh
zero_init_last = true

[train]
iters = 400
walkers = 512
steps = 32
grid = randomized
estimator = simfree
lr = 1e-3
lr_floor = 0
eval_every = 10
ckpt_every = 0
guard = 1e6
strict = false
patience = 0
deterministic = true

[sample]
n = 20000
steps = 32
grid = uniform
guard = 1e6
strict = false
)";
  throw ConfigError("unknown preset '" + name + "' (expected one of: " +
                    [] {
                      std::string s;
                      for (const auto& p : preset_names())
                        s += (s.empty() ? "" : ", ") + p;
                      return s;
                    }() +
                    ")");
}

// ---------------------------------------------------------------------------
// Parsing.
// ---------------------------------------------------------------------------

namespace detail {

struct ConfigItem {
  int line = 0;
  std::string section;  // "" for top level
  std::string key;
  std::string value;
};

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::vector<ConfigItem> lex_config(const std::string& text,
                                          const std::string& source) {
  std::vector<ConfigItem> items;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(source + ":" + std::to_string(line_no) +
                          ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "problem" && section != "policy" && section != "train" &&
          section != "sample")
        throw ConfigError(source + ":" + std::to_string(line_no) +
                          ": unknown section [" + section + "]");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(line_no) +
                        ": expected 'key = value', got '" + line + "'");
    ConfigItem item;
    item.line = line_no;
    item.section = section;
    item.key = trim(line.substr(0, eq));
    item.value = trim(line.substr(eq + 1));
    if (item.key.empty() || item.value.empty())
      throw ConfigError(source + ":" + std::to_string(line_no) +
                        ": empty key or value");
    items.push_back(std::move(item));
  }
  return items;
}

inline std::string where(const std::string& source, const ConfigItem& it) {
  return source + ":" + std::to_string(it.line) + ": key '" + it.key + "'";
}

inline double parse_double(const std::string& source, const ConfigItem& it) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(it.value, &pos);
  } catch (const std::exception&) {
    throw ConfigError(where(source, it) + ": not a number: '" + it.value +
                      "'");
  }
  if (pos != it.value.size())
    throw ConfigError(where(source, it) + ": trailing characters in number '" +
                      it.value + "'");
  return v;
}

inline long long parse_int(const std::string& source, const ConfigItem& it) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(it.value, &pos);
  } catch (const std::exception&) {
    throw ConfigError(where(source, it) + ": not an integer: '" + it.value +
                      "'");
  }
  if (pos != it.value.size())
    throw ConfigError(where(source, it) +
                      ": trailing characters in integer '" + it.value + "'");
  return v;
}

inline bool parse_bool(const std::string& source, const ConfigItem& it) {
  if (it.value == "true") return true;
  if (it.value == "false") return false;
  throw ConfigError(where(source, it) + ": expected true or false, got '" +
                    it.value + "'");
}

inline std::vector<double> parse_number_list(const std::string& source,
                                             const ConfigItem& it) {
  std::vector<double> out;
  std::string piece;
  std::istringstream ss(it.value);
  // Accept comma- and/or whitespace-separated values.
  std::string normalized = it.value;
  for (char& c : normalized)
    if (c == ',') c = ' ';
  std::istringstream ns(normalized);
  while (ns >> piece) {
    std::size_t pos = 0;
    try {
      out.push_back(std::stod(piece, &pos));
    } catch (const std::exception&) {
      throw ConfigError(where(source, it) + ": not a number: '" + piece + "'");
    }
    if (pos != piece.size())
      throw ConfigError(where(source, it) + ": bad list entry '" + piece +
                        "'");
  }
  if (out.empty())
    throw ConfigError(where(source, it) + ": empty list");
  return out;
}

inline std::vector<int> parse_int_list(const std::string& source,
                                       const ConfigItem& it) {
  std::vector<int> out;
  for (double v : parse_number_list(source, it)) {
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v)
      throw ConfigError(where(source, it) + ": expected integers");
    out.push_back(i);
  }
  return out;
}

// "I" or "c*I" (scalar times identity) or a dense row-major list of dim^2
// entries.  `dim` is known only at build time, hence the late materialize.
inline Mat materialize_matrix(const TensorField& f, int dim,
                              const std::string& name) {
  const std::string raw = trim(f.raw);
  const std::string at =
      "[problem] " + name + " (line " + std::to_string(f.line) + ")";
  if (raw == "I") return Mat::Identity(dim, dim);
  const std::size_t star = raw.rfind("*I");
  if (star != std::string::npos && star + 2 == raw.size()) {
    const std::string scalar = trim(raw.substr(0, star));
    std::size_t pos = 0;
    double c = 0.0;
    try {
      c = std::stod(scalar, &pos);
    } catch (const std::exception&) {
      throw ConfigError(at + ": bad scalar '" + scalar + "' in '" + raw + "'");
    }
    if (pos != scalar.size())
      throw ConfigError(at + ": bad scalar '" + scalar + "' in '" + raw + "'");
    return c * Mat::Identity(dim, dim);
  }
  ConfigItem tmp;
  tmp.line = f.line;
  tmp.key = name;
  tmp.value = raw;
  const auto values = parse_number_list("[problem]", tmp);
  if (static_cast<int>(values.size()) != dim * dim)
    throw ConfigError(at + ": dense matrix needs " + std::to_string(dim * dim) +
                      " entries (row-major), got " +
                      std::to_string(values.size()));
  Mat m(dim, dim);
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c < dim; ++c) m(r, c) = values[r * dim + c];
  return m;
}

// A scalar broadcasts to a constant vector; otherwise a dense list of dim.
inline Vec materialize_vector(const TensorField& f, int dim,
                              const std::string& name) {
  ConfigItem tmp;
  tmp.line = f.line;
  tmp.key = name;
  tmp.value = trim(f.raw);
  const auto values = parse_number_list("[problem]", tmp);
  if (values.size() == 1) return Vec::Constant(dim, values[0]);
  if (static_cast<int>(values.size()) != dim)
    throw ConfigError("[problem] " + name + " (line " +
                      std::to_string(f.line) + "): needs 1 or " +
                      std::to_string(dim) + " entries, got " +
                      std::to_string(values.size()));
  Vec v(dim);
  for (int i = 0; i < dim; ++i) v[i] = values[i];
  return v;
}

inline void apply_item(ExperimentConfig& cfg, const ConfigItem& it,
                       const std::string& source) {
  const auto unknown = [&]() -> ConfigError {
    const std::string in =
        it.section.empty() ? "at top level" : "in [" + it.section + "]";
    return ConfigError(source + ":" + std::to_string(it.line) +
                       ": unknown key '" + it.key + "' " + in);
  };
  if (it.section.empty()) {
    if (it.key == "seed")
      cfg.seed = static_cast<std::uint64_t>(parse_int(source, it));
    else if (it.key == "threads")
      cfg.threads = static_cast<int>(parse_int(source, it));
    else if (it.key == "out")
      cfg.out = it.value;
    else
      throw unknown();  // `preset` is consumed before items are applied
    return;
  }
  if (it.section == "problem") {
    ProblemConfig& p = cfg.problem;
    if (it.key == "kind") p.kind = it.value;
    else if (it.key == "dim") p.dim = static_cast<int>(parse_int(source, it));
    else if (it.key == "horizon") p.horizon = parse_double(source, it);
    else if (it.key == "A") p.A = {it.value, it.line};
    else if (it.key == "P") p.P = {it.value, it.line};
    else if (it.key == "Q") p.Q = {it.value, it.line};
    else if (it.key == "sigma0") p.sigma0 = {it.value, it.line};
    else if (it.key == "gamma") p.gamma = {it.value, it.line};
    else if (it.key == "x0") p.x0 = it.value;
    else if (it.key == "x0_mean") p.x0_mean = {it.value, it.line};
    else if (it.key == "x0_std") p.x0_std = {it.value, it.line};
    else if (it.key == "reward_a") p.reward_a = {it.value, it.line};
    else if (it.key == "funnel_scale") p.funnel_scale = parse_double(source, it);
    else if (it.key == "stddev") p.stddev = parse_double(source, it);
    else if (it.key == "riccati_steps")
      p.riccati_steps = static_cast<int>(parse_int(source, it));
    else throw unknown();
    return;
  }
  if (it.section == "policy") {
    PolicyConfig& p = cfg.policy;
    if (it.key == "arch") p.arch = it.value;
    else if (it.key == "hidden") p.hidden = parse_int_list(source, it);
    else if (it.key == "fourier_pairs")
      p.fourier_pairs = static_cast<int>(parse_int(source, it));
    else if (it.key == "units")
      p.units = static_cast<int>(parse_int(source, it));
    else if (it.key == "activation") p.activation = it.value;
    else if (it.key == "zero_init_last")
      p.zero_init_last = parse_bool(source, it);
    else throw unknown();
    return;
  }
  if (it.section == "train") {
    TrainConfig& t = cfg.train;
    if (it.key == "iters") t.iters = parse_int(source, it);
    else if (it.key == "walkers")
      t.walkers = static_cast<int>(parse_int(source, it));
    else if (it.key == "steps")
      t.steps = static_cast<int>(parse_int(source, it));
    else if (it.key == "grid") cfg.train_grid = it.value;
    else if (it.key == "estimator") cfg.train_estimator = it.value;
    else if (it.key == "lr") t.lr = parse_double(source, it);
    else if (it.key == "lr_floor") t.lr_floor = parse_double(source, it);
    else if (it.key == "eval_every") t.eval_every = parse_int(source, it);
    else if (it.key == "ckpt_every") t.ckpt_every = parse_int(source, it);
    else if (it.key == "l2_walkers")
      t.l2_walkers = static_cast<int>(parse_int(source, it));
    else if (it.key == "l2_steps")
      t.l2_steps = static_cast<int>(parse_int(source, it));
    else if (it.key == "guard") t.divergence_guard = parse_double(source, it);
    else if (it.key == "strict") t.strict_divergence = parse_bool(source, it);
    else if (it.key == "patience")
      t.patience = static_cast<int>(parse_int(source, it));
    else if (it.key == "min_rel_improvement")
      t.min_rel_improvement = parse_double(source, it);
    else if (it.key == "deterministic")
      t.deterministic = parse_bool(source, it);
    else throw unknown();
    return;
  }
  if (it.section == "sample") {
    SampleConfig& s = cfg.sample;
    if (it.key == "n") s.n = static_cast<int>(parse_int(source, it));
    else if (it.key == "steps")
      s.steps = static_cast<int>(parse_int(source, it));
    else if (it.key == "grid") s.grid = it.value;
    else if (it.key == "guard") s.guard = parse_double(source, it);
    else if (it.key == "strict") s.strict = parse_bool(source, it);
    else throw unknown();
    return;
  }
  throw unknown();
}

inline GridMode parse_grid_mode(const std::string& v, const std::string& what) {
  if (v == "uniform") return GridMode::uniform;
  if (v == "randomized") return GridMode::randomized;
  throw ConfigError(what + ": grid must be 'uniform' or 'randomized', got '" +
                    v + "'");
}

}  // namespace detail

// Parses config text.  A top-level `preset = NAME` loads the embedded named
// text first; every other key then overlays it, later keys winning.
inline ExperimentConfig parse_config(const std::string& text,
                                     const std::string& source = "<config>") {
  const auto items = detail::lex_config(text, source);
  ExperimentConfig cfg;
  std::string preset;
  for (const auto& it : items) {
    if (it.section.empty() && it.key == "preset") {
      if (!preset.empty() && preset != it.value)
        throw ConfigError(source + ":" + std::to_string(it.line) +
                          ": conflicting preset names '" + preset + "' vs '" +
                          it.value + "'");
      preset = it.value;
    }
  }
  if (!preset.empty()) {
    cfg = parse_config(preset_text(preset), "<preset " + preset + ">");
    cfg.preset = preset;
  }
  for (const auto& it : items) {
    if (it.section.empty() && it.key == "preset") continue;
    detail::apply_item(cfg, it, source);
  }
  // Fail fast on enum-like fields so errors carry the source name.
  detail::parse_grid_mode(cfg.train_grid, source + ": [train]");
  detail::parse_grid_mode(cfg.sample.grid, source + ": [sample]");
  if (cfg.train_estimator == "simfree")
    cfg.train.estimator = EstimatorKind::simfree;
  else if (cfg.train_estimator == "vanilla")
    cfg.train.estimator = EstimatorKind::vanilla;
  else
    throw ConfigError(source +
                      ": [train] estimator must be 'simfree' or 'vanilla' "
                      "(off-policy reweighting is an evaluation device, not "
                      "a trainer), got '" +
                      cfg.train_estimator + "'");
  cfg.train.grid_mode = detail::parse_grid_mode(cfg.train_grid, source);
  return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

// ---------------------------------------------------------------------------
// Building the experiment.
// ---------------------------------------------------------------------------

// Everything a subcommand needs, materialized from an ExperimentConfig.
struct BuiltExperiment {
  ExperimentConfig cfg;
  SocProblem problem;  // the problem train/eval operate on
  std::unique_ptr<ControlPolicy> policy;
  std::function<Vec(double, const Vec&)> u_star;  // null: no analytic control

  // Sampling-capable problems only.
  std::optional<FollmerProblem> follmer;       // the trained bridge target
  std::optional<FollmerProblem> base_follmer;  // untilted base (fine-tuning)
  std::function<double(const Vec&)> reward;    // fine-tuning reward

  std::shared_ptr<const RiccatiSolution> riccati;  // LQR reference

  bool can_sample() const { return follmer.has_value(); }
};

namespace detail {

inline Activation parse_activation(const std::string& v) {
  if (v == "tanh") return Activation::tanh;
  if (v == "relu") return Activation::relu;
  throw ConfigError("[policy] activation must be 'tanh' or 'relu', got '" + v +
                    "'");
}

inline InitialLaw build_initial_law(const ProblemConfig& p) {
  const Vec mean = p.x0_mean.set()
                       ? materialize_vector(p.x0_mean, p.dim, "x0_mean")
                       : Vec::Zero(p.dim);
  if (p.x0 == "point") return InitialLaw::point(mean);
  if (p.x0 == "gaussian") {
    const Vec std = p.x0_std.set()
                        ? materialize_vector(p.x0_std, p.dim, "x0_std")
                        : Vec::Ones(p.dim);
    return InitialLaw::gaussian(mean, std);
  }
  throw ConfigError("[problem] x0 must be 'gaussian' or 'point', got '" +
                    p.x0 + "'");
}

inline std::unique_ptr<ControlPolicy> build_policy(
    const ExperimentConfig& cfg, double horizon,
    const std::shared_ptr<const UnnormalizedTarget>& target) {
  const PolicyConfig& pc = cfg.policy;
  const int dim = cfg.problem.dim;
  if (pc.arch == "mlp") {
    MlpPolicyConfig mc;
    mc.dim = dim;
    mc.hidden = pc.hidden;
    mc.fourier_pairs = pc.fourier_pairs;
    mc.horizon = horizon;
    mc.act = parse_activation(pc.activation);
    mc.zero_init_last = pc.zero_init_last;
    return std::make_unique<MlpPolicy>(mc);
  }
  if (pc.arch == "pis") {
    if (!target)
      throw ConfigError(
          "[policy] arch = pis needs a problem with a score (funnel, "
          "gaussian or tilted-gaussian), not '" +
          cfg.problem.kind + "'");
    PisPolicyConfig sc;
    sc.dim = dim;
    sc.fourier_pairs = pc.fourier_pairs;
    sc.units = pc.units;
    sc.horizon = horizon;
    sc.act = parse_activation(pc.activation);
    sc.zero_init_last = pc.zero_init_last;
    return std::make_unique<PisPolicy>(sc, target);
  }
  if (pc.arch == "constant") return std::make_unique<ConstantPolicy>(dim);
  if (pc.arch == "affine") return std::make_unique<AffinePolicy>(dim);
  throw ConfigError(
      "[policy] arch must be mlp, pis, constant or affine, got '" + pc.arch +
      "'");
}

}  // namespace detail

inline BuiltExperiment build_experiment(const ExperimentConfig& cfg) {
  BuiltExperiment built;
  built.cfg = cfg;
  const ProblemConfig& p = cfg.problem;
  if (p.kind.empty())
    throw ConfigError("[problem] kind not set (and no preset named)");
  std::shared_ptr<const UnnormalizedTarget> target;

  if (p.kind == "linear-ou") {
    if (p.dim < 1) throw ConfigError("[problem] dim must be >= 1");
    LinearOuSpec spec;
    spec.dim = p.dim;
    spec.horizon = p.horizon;
    spec.A = p.A.set() ? detail::materialize_matrix(p.A, p.dim, "A")
                       : Mat::Zero(p.dim, p.dim);
    spec.sigma0 = p.sigma0.set()
                      ? detail::materialize_matrix(p.sigma0, p.dim, "sigma0")
                      : Mat::Identity(p.dim, p.dim);
    spec.gamma = p.gamma.set()
                     ? detail::materialize_vector(p.gamma, p.dim, "gamma")
                     : Vec::Ones(p.dim);
    spec.mu0 = detail::build_initial_law(p);
    built.problem = make_linear_ou_problem(spec);
    built.u_star = linear_ou_optimal_control(spec);
  } else if (p.kind == "lqr") {
    if (p.dim < 1) throw ConfigError("[problem] dim must be >= 1");
    LqrSpec spec;
    spec.dim = p.dim;
    spec.horizon = p.horizon;
    spec.A = p.A.set() ? detail::materialize_matrix(p.A, p.dim, "A")
                       : Mat::Zero(p.dim, p.dim);
    spec.P = p.P.set() ? detail::materialize_matrix(p.P, p.dim, "P")
                       : Mat::Zero(p.dim, p.dim);
    spec.Q = p.Q.set() ? detail::materialize_matrix(p.Q, p.dim, "Q")
                       : Mat::Zero(p.dim, p.dim);
    spec.sigma0 = p.sigma0.set()
                      ? detail::materialize_matrix(p.sigma0, p.dim, "sigma0")
                      : Mat::Identity(p.dim, p.dim);
    spec.mu0 = detail::build_initial_law(p);
    if (p.riccati_steps < 16)
      throw ConfigError("[problem] riccati_steps must be >= 16");
    built.problem = make_lqr_problem(spec);
    built.riccati =
        std::make_shared<const RiccatiSolution>(solve_riccati(spec,
                                                              p.riccati_steps));
    built.u_star = lqr_optimal_control(spec, built.riccati);
  } else if (p.kind == "funnel") {
    FunnelTarget ft;
    ft.dim = p.dim > 0 ? p.dim : 10;
    ft.scale = p.funnel_scale;
    if (!(ft.scale > 0.0))
      throw ConfigError("[problem] funnel_scale must be > 0");
    target = std::make_shared<const UnnormalizedTarget>(funnel_target(ft));
    built.follmer = follmer_problem(*target, p.horizon);
    built.problem = built.follmer->soc;
  } else if (p.kind == "gaussian") {
    if (!(p.stddev > 0.0)) throw ConfigError("[problem] stddev must be > 0");
    const int dim = p.dim > 0 ? p.dim : 10;
    target = std::make_shared<const UnnormalizedTarget>(
        gaussian_target(dim, p.stddev));
    built.follmer = follmer_problem(*target, p.horizon);
    built.problem = built.follmer->soc;
  } else if (p.kind == "tilted-gaussian") {
    if (!(p.stddev > 0.0)) throw ConfigError("[problem] stddev must be > 0");
    const int dim = p.dim > 0 ? p.dim : 2;
    if (!p.reward_a.set())
      throw ConfigError("[problem] tilted-gaussian needs reward_a");
    const Vec a = detail::materialize_vector(p.reward_a, dim, "reward_a");
    auto base = follmer_problem(gaussian_target(dim, p.stddev), p.horizon);
    built.reward = [a](const Vec& x) { return a.dot(x); };
    const auto reward_grad = [a](const Vec&, Vec& out) { out = a; };
    built.base_follmer = base;
    built.follmer = finetune_problem(base, built.reward, reward_grad);
    built.problem = built.follmer->soc;
    target = std::make_shared<const UnnormalizedTarget>(built.follmer->target);
  } else {
    throw ConfigError(
        "[problem] kind must be linear-ou, lqr, funnel, gaussian or "
        "tilted-gaussian, got '" +
        p.kind + "'");
  }

  // The config dim mirrors the materialized problem so later stages can
  // trust cfg.problem.dim unconditionally.
  built.cfg.problem.dim = built.problem.dim;
  built.policy = detail::build_policy(built.cfg, built.problem.horizon, target);
  init_policy(*built.policy, cfg.seed);
  built.cfg.train.seed = cfg.seed;
  built.cfg.train.threads = cfg.threads;
  return built;
}

// ---------------------------------------------------------------------------
// Canonical serialization (used for run.json's resolved config).
// ---------------------------------------------------------------------------

inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  const auto tensor = [](const TensorField& f) { return detail::trim(f.raw); };
  if (!cfg.preset.empty()) os << "preset = " << cfg.preset << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "threads = " << cfg.threads << "\n";
  os << "out = " << cfg.out << "\n\n";
  const ProblemConfig& p = cfg.problem;
  os << "[problem]\n";
  os << "kind = " << p.kind << "\n";
  os << "dim = " << p.dim << "\n";
  os << "horizon = " << p.horizon << "\n";
  if (p.A.set()) os << "A = " << tensor(p.A) << "\n";
  if (p.P.set()) os << "P = " << tensor(p.P) << "\n";
  if (p.Q.set()) os << "Q = " << tensor(p.Q) << "\n";
  if (p.sigma0.set()) os << "sigma0 = " << tensor(p.sigma0) << "\n";
  if (p.gamma.set()) os << "gamma = " << tensor(p.gamma) << "\n";
  if (p.kind == "linear-ou" || p.kind == "lqr") {
    os << "x0 = " << p.x0 << "\n";
    if (p.x0_mean.set()) os << "x0_mean = " << tensor(p.x0_mean) << "\n";
    if (p.x0_std.set()) os << "x0_std = " << tensor(p.x0_std) << "\n";
  }
  if (p.kind == "lqr") os << "riccati_steps = " << p.riccati_steps << "\n";
  if (p.kind == "funnel") os << "funnel_scale = " << p.funnel_scale << "\n";
  if (p.kind == "gaussian" || p.kind == "tilted-gaussian")
    os << "stddev = " << p.stddev << "\n";
  if (p.reward_a.set()) os << "reward_a = " << tensor(p.reward_a) << "\n";
  os << "\n[policy]\n";
  const PolicyConfig& pc = cfg.policy;
  os << "arch = " << pc.arch << "\n";
  if (pc.arch == "mlp") {
    os << "hidden = ";
    for (std::size_t i = 0; i < pc.hidden.size(); ++i)
      os << (i ? "," : "") << pc.hidden[i];
    os << "\n";
  }
  if (pc.arch == "pis") os << "units = " << pc.units << "\n";
  if (pc.arch == "mlp" || pc.arch == "pis") {
    os << "fourier_pairs = " << pc.fourier_pairs << "\n";
    os << "activation = " << pc.activation << "\n";
    os << "zero_init_last = " << (pc.zero_init_last ? "true" : "false")
       << "\n";
  }
  const TrainConfig& t = cfg.train;
  os << "\n[train]\n";
  os << "iters = " << t.iters << "\n";
  os << "walkers = " << t.walkers << "\n";
  os << "steps = " << t.steps << "\n";
  os << "grid = " << cfg.train_grid << "\n";
  os << "estimator = " << cfg.train_estimator << "\n";
  os << "lr = " << t.lr << "\n";
  os << "lr_floor = " << t.lr_floor << "\n";
  os << "eval_every = " << t.eval_every << "\n";
  os << "ckpt_every = " << t.ckpt_every << "\n";
  os << "l2_walkers = " << t.l2_walkers << "\n";
  os << "l2_steps = " << t.l2_steps << "\n";
  os << "guard = " << t.divergence_guard << "\n";
  os << "strict = " << (t.strict_divergence ? "true" : "false") << "\n";
  os << "patience = " << t.patience << "\n";
  os << "min_rel_improvement = " << t.min_rel_improvement << "\n";
  os << "deterministic = " << (t.deterministic ? "true" : "false") << "\n";
  const SampleConfig& s = cfg.sample;
  os << "\n[sample]\n";
  os << "n = " << s.n << "\n";
  os << "steps = " << s.steps << "\n";
  os << "grid = " << s.grid << "\n";
  os << "guard = " << s.guard << "\n";
  os << "strict = " << (s.strict ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace socfree
