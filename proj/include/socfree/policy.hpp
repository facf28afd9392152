// SPDX-License-Identifier: Apache-2.0
//
// Markov control policies u(t, x) with hand-rolled reverse mode.
//
// The estimators never differentiate through trajectories; all they need
// from a policy is, per evaluated step,
//
//   forward     u = policy(t, x)                       (records a tape)
//   vjp_params  grad += scale * (d u / d theta)^T v    (reads the tape)
//   vjp_input   x_bar = (d u / d x)^T v                (reads the tape)
//
// Tapes are caller-owned scratch: one tape per in-flight walker, reused
// across steps, so policies stay const and thread-safe.
#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "socfree/common.hpp"
#include "socfree/problems/funnel.hpp"
#include "socfree/rng.hpp"

namespace socfree {

// ---------------------------------------------------------------------------
// Flat parameter vector with a named tensor layout.
// ---------------------------------------------------------------------------

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;  // 1 for bias vectors
  std::size_t count() const {
    return static_cast<std::size_t>(rows) * cols;
  }
};

class ParamVector {
 public:
  std::size_t add(const std::string& name, int rows, int cols) {
    for (const auto& e : entries_) {
      if (e.name == name)
        throw ConfigError("ParamVector: duplicate tensor name " + name);
    }
    TensorInfo info{name, data_.size(), rows, cols};
    entries_.push_back(info);
    data_.resize(data_.size() + info.count(), 0.0);
    return info.offset;
  }

  std::size_t size() const { return data_.size(); }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return {data_.data(), data_.size()}; }
  std::span<const double> span() const { return {data_.data(), data_.size()}; }
  const std::vector<TensorInfo>& entries() const { return entries_; }

  Eigen::Map<Mat> matrix(const TensorInfo& e) {
    return Eigen::Map<Mat>(data_.data() + e.offset, e.rows, e.cols);
  }

  bool same_layout(const ParamVector& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.rows != b.rows || a.cols != b.cols)
        return false;
    }
    return true;
  }

 private:
  AlignedBuffer data_;
  std::vector<TensorInfo> entries_;
};

// ---------------------------------------------------------------------------
// Dense MLP building block operating on a ParamVector slice.
// ---------------------------------------------------------------------------

enum class Activation { tanh, relu };

inline double act_value(Activation a, double z) {
  return a == Activation::tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0);
}
// Derivative expressed through the post-activation value.
inline double act_deriv_from_value(Activation a, double v) {
  return a == Activation::tanh ? 1.0 - v * v : (v > 0.0 ? 1.0 : 0.0);
}

struct CoreTape {
  std::vector<Vec> a;  // a[0] = input, a[l] = output of layer l-1
  Vec delta, tmp;
};

// Weight matrices live in the owning ParamVector; the core stores offsets
// only, so policies can be copied and Adam can update the flat vector.
class MlpCore {
 public:
  MlpCore() = default;

  // sizes = [in, hidden..., out].  Activation after every layer except the
  // last, or after every layer when activate_output is set (feature
  // extractors).  zero_init_last forces the final layer to exact zero.
  void build(ParamVector& params, const std::string& prefix,
             std::vector<int> sizes, Activation act, bool activate_output,
             bool zero_init_last) {
    if (sizes.size() < 2) throw ConfigError("MlpCore: needs >= 1 layer");
    sizes_ = std::move(sizes);
    act_ = act;
    activate_output_ = activate_output;
    zero_init_last_ = zero_init_last;
    w_off_.clear();
    b_off_.clear();
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const std::string tag = prefix + ".w" + std::to_string(l);
      w_off_.push_back(params.add(tag, sizes_[l + 1], sizes_[l]));
      b_off_.push_back(
          params.add(prefix + ".b" + std::to_string(l), sizes_[l + 1], 1));
    }
  }

  int in_dim() const { return sizes_.front(); }
  int out_dim() const { return sizes_.back(); }
  int layers() const { return static_cast<int>(w_off_.size()); }

  void init(ParamVector& params, PhiloxRng& rng) const {
    const int n_layers = layers();
    for (int l = 0; l < n_layers; ++l) {
      const int rows = sizes_[l + 1], cols = sizes_[l];
      double* w = params.data() + w_off_[l];
      double* b = params.data() + b_off_[l];
      if (zero_init_last_ && l == n_layers - 1) {
        std::memset(w, 0, sizeof(double) * rows * cols);
        std::memset(b, 0, sizeof(double) * rows);
        continue;
      }
      // Uniform with Var = 1 / fan_in; biases zero.
      const double bound = std::sqrt(3.0 / static_cast<double>(cols));
      for (int i = 0; i < rows * cols; ++i)
        w[i] = bound * (2.0 * rng.uniform_open() - 1.0);
      std::memset(b, 0, sizeof(double) * rows);
    }
  }

  void prepare_tape(CoreTape& tape) const {
    tape.a.resize(sizes_.size());
    for (std::size_t l = 0; l < sizes_.size(); ++l)
      tape.a[l].resize(sizes_[l]);
    tape.delta.resize(max_width());
    tape.tmp.resize(max_width());
  }

  // u = core(in); the tape is both scratch and record.
  void forward(const double* theta, const Vec& in, Vec& out,
               CoreTape& tape) const {
    tape.a[0] = in;
    const int n_layers = layers();
    for (int l = 0; l < n_layers; ++l) {
      const int rows = sizes_[l + 1], cols = sizes_[l];
      Eigen::Map<const Mat> w(theta + w_off_[l], rows, cols);
      Eigen::Map<const Vec> b(theta + b_off_[l], rows);
      Vec& z = tape.a[l + 1];
      z.noalias() = w * tape.a[l];
      z += b;
      if (l + 1 < n_layers || activate_output_) {
        for (int i = 0; i < rows; ++i) z[i] = act_value(act_, z[i]);
      }
    }
    out = tape.a[n_layers];
  }

  // grad += scale * (d out / d theta)^T v; optionally also computes
  // in_bar = (d out / d in)^T v.  The scale multiplies at the accumulation
  // site, leaving the backpropagated deltas unscaled.
  void vjp(const double* theta, CoreTape& tape, const Vec& v, double scale,
           double* grad, Vec* in_bar) const {
    const int n_layers = layers();
    Vec& delta = tape.delta;  // preallocated at max width; use head views
    Vec& tmp = tape.tmp;
    const int out = sizes_[n_layers];
    if (activate_output_) {
      const Vec& a_out = tape.a[n_layers];
      for (int i = 0; i < out; ++i)
        delta[i] = v[i] * act_deriv_from_value(act_, a_out[i]);
    } else {
      delta.head(out) = v;
    }
    for (int l = n_layers - 1; l >= 0; --l) {
      const int rows = sizes_[l + 1], cols = sizes_[l];
      Eigen::Map<const Mat> w(theta + w_off_[l], rows, cols);
      if (grad != nullptr) {
        Eigen::Map<Mat> gw(grad + w_off_[l], rows, cols);
        Eigen::Map<Vec> gb(grad + b_off_[l], rows);
        gw.noalias() += scale * (delta.head(rows) * tape.a[l].transpose());
        gb.noalias() += scale * delta.head(rows);
      }
      if (l == 0 && in_bar == nullptr) break;  // input cotangent not needed
      tmp.head(cols).noalias() = w.transpose() * delta.head(rows);
      if (l > 0) {
        const Vec& a_prev = tape.a[l];
        for (int i = 0; i < cols; ++i)
          tmp[i] *= act_deriv_from_value(act_, a_prev[i]);
      }
      delta.head(cols) = tmp.head(cols);
    }
    if (in_bar != nullptr) *in_bar = delta.head(sizes_[0]);
  }

 private:
  int max_width() const {
    int m = 0;
    for (int s : sizes_) m = std::max(m, s);
    return m;
  }

  std::vector<int> sizes_;
  std::vector<std::size_t> w_off_, b_off_;
  Activation act_ = Activation::tanh;
  bool activate_output_ = false;
  bool zero_init_last_ = false;
};

// ---------------------------------------------------------------------------
// Policy interface.
// ---------------------------------------------------------------------------

struct StepTape {
  virtual ~StepTape() = default;
};

class ControlPolicy {
 public:
  virtual ~ControlPolicy() = default;

  virtual int dim() const = 0;
  virtual ParamVector& params() = 0;
  virtual const ParamVector& params() const = 0;
  virtual std::unique_ptr<StepTape> make_tape() const = 0;

  // u = policy(t, x).  A null tape allocates a scratch one (slow path).
  virtual void forward(double t, const Vec& x, Vec& u,
                       StepTape* tape) const = 0;

  // grad += scale * (d u / d theta)^T v for the step recorded on the tape.
  virtual void vjp_params(StepTape& tape, const Vec& v, double scale,
                          std::span<double> grad) const = 0;

  // x_bar = (d u / d x)^T v for the step recorded on the tape.
  virtual void vjp_input(StepTape& tape, const Vec& v, Vec& x_bar) const = 0;

  // Draw fresh parameters (uniform with Var = 1/fan_in, zeroed final
  // layers where configured).  Deterministic in the stream.
  virtual void init(PhiloxRng& rng) = 0;

  Vec eval(double t, const Vec& x) const {
    Vec u;
    auto tape = make_tape();
    forward(t, x, u, tape.get());
    return u;
  }
};

// ---------------------------------------------------------------------------
// Concrete policies.
// ---------------------------------------------------------------------------

// u(t, x) = c, a trainable constant (exact zero by default).
class ConstantPolicy final : public ControlPolicy {
 public:
  explicit ConstantPolicy(int dim) : dim_(dim) {
    off_ = params_.add("constant.c", dim, 1);
  }

  int dim() const override { return dim_; }
  ParamVector& params() override { return params_; }
  const ParamVector& params() const override { return params_; }
  std::unique_ptr<StepTape> make_tape() const override {
    return std::make_unique<StepTape>();
  }

  void forward(double, const Vec&, Vec& u, StepTape*) const override {
    u = Eigen::Map<const Vec>(params_.data() + off_, dim_);
  }
  void vjp_params(StepTape&, const Vec& v, double scale,
                  std::span<double> grad) const override {
    Eigen::Map<Vec>(grad.data() + off_, dim_).noalias() += scale * v;
  }
  void vjp_input(StepTape&, const Vec&, Vec& x_bar) const override {
    x_bar.setZero(dim_);
  }
  void init(PhiloxRng&) override {}

 private:
  int dim_;
  std::size_t off_;
  ParamVector params_;
};

// u(t, x) = W x + b (time-independent; mainly an analytically tractable
// fixture for the estimator tests).
class AffinePolicy final : public ControlPolicy {
 public:
  explicit AffinePolicy(int dim) : dim_(dim) {
    w_off_ = params_.add("affine.w", dim, dim);
    b_off_ = params_.add("affine.b", dim, 1);
  }

  int dim() const override { return dim_; }
  ParamVector& params() override { return params_; }
  const ParamVector& params() const override { return params_; }

  struct Tape final : StepTape {
    Vec x;
  };
  std::unique_ptr<StepTape> make_tape() const override {
    return std::make_unique<Tape>();
  }

  void forward(double, const Vec& x, Vec& u, StepTape* tape) const override {
    Eigen::Map<const Mat> w(params_.data() + w_off_, dim_, dim_);
    Eigen::Map<const Vec> b(params_.data() + b_off_, dim_);
    u.noalias() = w * x;
    u += b;
    if (tape != nullptr) static_cast<Tape&>(*tape).x = x;
  }
  void vjp_params(StepTape& tape, const Vec& v, double scale,
                  std::span<double> grad) const override {
    const Vec& x = static_cast<Tape&>(tape).x;
    Eigen::Map<Mat> gw(grad.data() + w_off_, dim_, dim_);
    Eigen::Map<Vec> gb(grad.data() + b_off_, dim_);
    gw.noalias() += scale * (v * x.transpose());
    gb.noalias() += scale * v;
  }
  void vjp_input(StepTape&, const Vec& v, Vec& x_bar) const override {
    Eigen::Map<const Mat> w(params_.data() + w_off_, dim_, dim_);
    x_bar.noalias() = w.transpose() * v;
  }
  void init(PhiloxRng& rng) override {
    const double bound = std::sqrt(3.0 / dim_);
    for (int i = 0; i < dim_ * dim_; ++i)
      params_.data()[w_off_ + i] = bound * (2.0 * rng.uniform_open() - 1.0);
  }

 private:
  int dim_;
  std::size_t w_off_, b_off_;
  ParamVector params_;
};

// Wraps a plain function as a (parameterless) policy: references for
// evaluation, importance-weight baselines, analytic optima.
class FunctionPolicy final : public ControlPolicy {
 public:
  using Fn = std::function<Vec(double, const Vec&)>;
  // input_vjp(t, x, v) = (d u / d x)^T v; optional.
  using InputVjp = std::function<Vec(double, const Vec&, const Vec&)>;

  FunctionPolicy(int dim, Fn fn, InputVjp input_vjp = nullptr)
      : dim_(dim), fn_(std::move(fn)), input_vjp_(std::move(input_vjp)) {}

  int dim() const override { return dim_; }
  ParamVector& params() override { return params_; }
  const ParamVector& params() const override { return params_; }

  struct Tape final : StepTape {
    double t = 0.0;
    Vec x;
  };
  std::unique_ptr<StepTape> make_tape() const override {
    return std::make_unique<Tape>();
  }

  void forward(double t, const Vec& x, Vec& u, StepTape* tape) const override {
    u = fn_(t, x);
    if (tape != nullptr) {
      auto& tp = static_cast<Tape&>(*tape);
      tp.t = t;
      tp.x = x;
    }
  }
  void vjp_params(StepTape&, const Vec&, double,
                  std::span<double>) const override {}
  void vjp_input(StepTape& tape, const Vec& v, Vec& x_bar) const override {
    if (!input_vjp_)
      throw std::logic_error("FunctionPolicy: no input VJP provided");
    const auto& tp = static_cast<Tape&>(tape);
    x_bar = input_vjp_(tp.t, tp.x, v);
  }
  void init(PhiloxRng&) override {}

 private:
  int dim_;
  Fn fn_;
  InputVjp input_vjp_;
  ParamVector params_;  // empty
};

// ---------------------------------------------------------------------------
// Time features.
// ---------------------------------------------------------------------------

// [sin(2 pi j t / T), cos(2 pi j t / T)] for j = 1..pairs.
inline void fourier_encode(double t, int pairs, double horizon, Vec& out) {
  out.resize(2 * pairs);
  const double base = 6.283185307179586476925286766559 * t / horizon;
  for (int j = 0; j < pairs; ++j) {
    const double a = base * (j + 1);
    out[2 * j] = std::sin(a);
    out[2 * j + 1] = std::cos(a);
  }
}

// ---------------------------------------------------------------------------
// MlpPolicy: u = MLP([time features; x]).
// ---------------------------------------------------------------------------

struct MlpPolicyConfig {
  int dim = 0;
  std::vector<int> hidden = {64, 64};
  int fourier_pairs = 8;  // 0 => single feature t / T
  double horizon = 1.0;
  Activation act = Activation::tanh;
  bool zero_init_last = true;
};

class MlpPolicy final : public ControlPolicy {
 public:
  explicit MlpPolicy(const MlpPolicyConfig& cfg) : cfg_(cfg) {
    if (cfg.dim < 1) throw ConfigError("MlpPolicy: dim must be >= 1");
    t_feats_ = cfg.fourier_pairs > 0 ? 2 * cfg.fourier_pairs : 1;
    std::vector<int> sizes;
    sizes.push_back(t_feats_ + cfg.dim);
    for (int h : cfg.hidden) sizes.push_back(h);
    sizes.push_back(cfg.dim);
    core_.build(params_, "mlp", std::move(sizes), cfg.act,
                /*activate_output=*/false, cfg.zero_init_last);
  }

  int dim() const override { return cfg_.dim; }
  ParamVector& params() override { return params_; }
  const ParamVector& params() const override { return params_; }

  struct Tape final : StepTape {
    CoreTape core;
    Vec features, in_bar;
  };
  std::unique_ptr<StepTape> make_tape() const override {
    auto tape = std::make_unique<Tape>();
    core_.prepare_tape(tape->core);
    tape->features.resize(core_.in_dim());
    return tape;
  }

  void forward(double t, const Vec& x, Vec& u, StepTape* tape) const override {
    if (tape == nullptr) {
      auto scratch = make_tape();
      forward(t, x, u, scratch.get());
      return;
    }
    auto& tp = static_cast<Tape&>(*tape);
    encode(t, x, tp.features);
    core_.forward(params_.data(), tp.features, u, tp.core);
  }

  void vjp_params(StepTape& tape, const Vec& v, double scale,
                  std::span<double> grad) const override {
    auto& tp = static_cast<Tape&>(tape);
    core_.vjp(params_.data(), tp.core, v, scale, grad.data(), nullptr);
  }

  void vjp_input(StepTape& tape, const Vec& v, Vec& x_bar) const override {
    auto& tp = static_cast<Tape&>(tape);
    core_.vjp(params_.data(), tp.core, v, 1.0, nullptr, &tp.in_bar);
    x_bar = tp.in_bar.tail(cfg_.dim);
  }

  void init(PhiloxRng& rng) override { core_.init(params_, rng); }

 private:
  void encode(double t, const Vec& x, Vec& features) const {
    if (cfg_.fourier_pairs > 0) {
      Vec tf;
      fourier_encode(t, cfg_.fourier_pairs, cfg_.horizon, tf);
      features.head(t_feats_) = tf;
    } else {
      features[0] = t / cfg_.horizon;
    }
    features.tail(cfg_.dim) = x;
  }

  MlpPolicyConfig cfg_;
  int t_feats_ = 0;
  MlpCore core_;
  ParamVector params_;
};

// ---------------------------------------------------------------------------
// PisPolicy: u = head([t_core(tf); x_core(x)]) + gate(tf) .* score(x).
//
// The score of the target density is a fixed feature, not a trainable
// part; both output layers are zero-initialized so u === 0 at start.
// ---------------------------------------------------------------------------

struct PisPolicyConfig {
  int dim = 0;
  int fourier_pairs = 64;  // t lifted to 2 * pairs features
  int units = 64;          // width of extractors, head and gate
  double horizon = 1.0;
  Activation act = Activation::tanh;
  bool zero_init_last = true;
};

class PisPolicy final : public ControlPolicy {
 public:
  PisPolicy(const PisPolicyConfig& cfg,
            std::shared_ptr<const UnnormalizedTarget> target)
      : cfg_(cfg), target_(std::move(target)) {
    if (cfg.dim < 1) throw ConfigError("PisPolicy: dim must be >= 1");
    if (!target_ || !target_->score)
      throw ConfigError("PisPolicy: target with score required");
    if (target_->dim != cfg.dim)
      throw ConfigError("PisPolicy: target dimension mismatch");
    const int tf = 2 * cfg.fourier_pairs;
    const int u = cfg.units;
    t_core_.build(params_, "pis.tfeat", {tf, u, u}, cfg.act,
                  /*activate_output=*/true, false);
    x_core_.build(params_, "pis.xfeat", {cfg.dim, u, u}, cfg.act,
                  /*activate_output=*/true, false);
    head_.build(params_, "pis.head", {2 * u, u, u, cfg.dim}, cfg.act,
                /*activate_output=*/false, cfg.zero_init_last);
    gate_.build(params_, "pis.gate", {tf, u, u, cfg.dim}, cfg.act,
                /*activate_output=*/false, cfg.zero_init_last);
  }

  int dim() const override { return cfg_.dim; }
  ParamVector& params() override { return params_; }
  const ParamVector& params() const override { return params_; }

  struct Tape final : StepTape {
    CoreTape t_core, x_core, head, gate;
    Vec tf, concat, t_feat, x_feat, h, gate_out, score, x;
    Vec seed, split, w, sbar;  // backward scratch
  };
  std::unique_ptr<StepTape> make_tape() const override {
    auto tape = std::make_unique<Tape>();
    t_core_.prepare_tape(tape->t_core);
    x_core_.prepare_tape(tape->x_core);
    head_.prepare_tape(tape->head);
    gate_.prepare_tape(tape->gate);
    tape->tf.resize(2 * cfg_.fourier_pairs);
    tape->concat.resize(2 * cfg_.units);
    return tape;
  }

  void forward(double t, const Vec& x, Vec& u, StepTape* tape) const override {
    if (tape == nullptr) {
      auto scratch = make_tape();
      forward(t, x, u, scratch.get());
      return;
    }
    auto& tp = static_cast<Tape&>(*tape);
    fourier_encode(t, cfg_.fourier_pairs, cfg_.horizon, tp.tf);
    t_core_.forward(params_.data(), tp.tf, tp.t_feat, tp.t_core);
    x_core_.forward(params_.data(), x, tp.x_feat, tp.x_core);
    tp.concat.head(cfg_.units) = tp.t_feat;
    tp.concat.tail(cfg_.units) = tp.x_feat;
    head_.forward(params_.data(), tp.concat, tp.h, tp.head);
    gate_.forward(params_.data(), tp.tf, tp.gate_out, tp.gate);
    target_->score(x, tp.score);
    tp.x = x;
    u = tp.h + tp.gate_out.cwiseProduct(tp.score);
  }

  void vjp_params(StepTape& tape, const Vec& v, double scale,
                  std::span<double> grad) const override {
    auto& tp = static_cast<Tape&>(tape);
    // Head path: v -> concat cotangent -> feature extractors.
    head_.vjp(params_.data(), tp.head, v, scale, grad.data(), &tp.split);
    tp.seed = tp.split.head(cfg_.units);
    t_core_.vjp(params_.data(), tp.t_core, tp.seed, scale, grad.data(),
                nullptr);
    tp.seed = tp.split.tail(cfg_.units);
    x_core_.vjp(params_.data(), tp.x_core, tp.seed, scale, grad.data(),
                nullptr);
    // Gate path: cotangent on gate output is v .* score.
    tp.w = v.cwiseProduct(tp.score);
    gate_.vjp(params_.data(), tp.gate, tp.w, scale, grad.data(), nullptr);
  }

  void vjp_input(StepTape& tape, const Vec& v, Vec& x_bar) const override {
    auto& tp = static_cast<Tape&>(tape);
    head_.vjp(params_.data(), tp.head, v, 1.0, nullptr, &tp.split);
    tp.seed = tp.split.tail(cfg_.units);
    x_core_.vjp(params_.data(), tp.x_core, tp.seed, 1.0, nullptr, &x_bar);
    // Score path: d/dx [gate .* score(x)]^T v = J_score^T (gate .* v).
    if (!target_->score_vjp)
      throw std::logic_error("PisPolicy: target has no score_vjp");
    tp.w = tp.gate_out.cwiseProduct(v);
    target_->score_vjp(tp.x, tp.w, tp.sbar);
    x_bar += tp.sbar;
  }

  void init(PhiloxRng& rng) override {
    t_core_.init(params_, rng);
    x_core_.init(params_, rng);
    head_.init(params_, rng);
    gate_.init(params_, rng);
  }

 private:
  PisPolicyConfig cfg_;
  std::shared_ptr<const UnnormalizedTarget> target_;
  MlpCore t_core_, x_core_, head_, gate_;
  ParamVector params_;
};

inline void init_policy(ControlPolicy& policy, std::uint64_t seed) {
  PhiloxRng rng = RngSeq{seed, 0}.stream(StreamPurpose::policy_init);
  policy.init(rng);
}

}  // namespace socfree
