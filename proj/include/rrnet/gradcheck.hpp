// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of every hand-written backward pass.
//
// Each check perturbs one tensor at a time along a random Gaussian direction d
// and compares the analytic directional derivative <grad, d> against
// (L(theta + h d) - L(theta - h d)) / 2h. Instances where a ReLU sign or a
// max-pool argmax changes inside [theta - h d, theta + h d] are redrawn.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rrnet/architectures.hpp"
#include "rrnet/layers.hpp"
#include "rrnet/numerics.hpp"
#include "rrnet/recurrent.hpp"

namespace rrnet {

struct GradcheckOptions {
  std::uint64_t seed = 1;
  std::size_t trials = 100;
  double step = 1e-5;
  double tolerance = 1e-4;
  double abs_floor = 1e-8;       // denominators below this are treated as this
  std::size_t max_redraws = 50;  // per trial, when every draw lands on a kink
  std::string corrupt;           // component whose analytic gradient is scaled by 1.01 (negative control)
};

struct GradcheckResult {
  std::string component;
  std::size_t trials = 0;
  std::size_t checks = 0;
  std::size_t redraws = 0;
  std::size_t unresolved = 0;  // trials abandoned after max_redraws
  double max_rel_err = 0.0;
  std::string worst_tensor;
  double tolerance = 1e-4;

  bool pass() const { return trials > 0 && unresolved * 10 < trials && max_rel_err < tolerance; }
};

/// A differentiable scalar function of a handful of tensors.
class GradProblem {
 public:
  struct Tensor {
    std::string name;
    std::vector<double>* values;
    const std::vector<double>* grad;
  };

  virtual ~GradProblem() = default;
  virtual std::vector<Tensor> tensors() = 0;
  /// Forward pass only.
  virtual double loss() = 0;
  /// Zeroes gradients, then forward and backward into the tensors' grad buffers.
  virtual void gradients() = 0;
  /// Discrete state of the last loss() call (ReLU signs, argmax indices).
  virtual void pattern(std::vector<std::uint32_t>& /*out*/) {}
};

namespace detail {

inline std::vector<double> gaussian(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline FeatureMap random_map(std::size_t channels, std::size_t length, Rng& rng) {
  FeatureMap m(channels, length);
  for (double& x : m.data) x = rng.normal();
  return m;
}

inline double weighted_sum(std::span<const double> a, std::span<const double> w) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * w[i];
  return s;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

class ConvProblem final : public GradProblem {
 public:
  explicit ConvProblem(Rng& rng) {
    ConvSpec spec;
    spec.in_channels = pick(rng, 1, 3);
    spec.out_channels = pick(rng, 1, 3);
    spec.kernel_size = pick(rng, 1, 4);
    spec.stride = pick(rng, 1, 3);
    spec.padding = pick(rng, 0, spec.kernel_size - 1);
    const std::size_t len = pick(rng, spec.kernel_size, spec.kernel_size + 9);
    conv_ = Conv1d("conv", spec, rng);
    for (double& b : conv_.bias().values) b = rng.normal();
    x_ = random_map(spec.in_channels, len, rng);
    w_ = random_map(spec.out_channels, spec.out_length(len), rng);
  }

  std::vector<Tensor> tensors() override {
    return {{"kernel", &conv_.kernels().values, &conv_.kernels().grad},
            {"bias", &conv_.bias().values, &conv_.bias().grad},
            {"input", &x_.data, &dx_}};
  }
  double loss() override { return weighted_sum(conv_.forward(x_).data, w_.data); }
  void gradients() override {
    conv_.kernels().zero_grad();
    conv_.bias().zero_grad();
    conv_.forward(x_);
    dx_ = conv_.backward(w_).data;
  }

 private:
  Conv1d conv_;
  FeatureMap x_, w_;
  std::vector<double> dx_;
};

class PoolProblem final : public GradProblem {
 public:
  PoolProblem(PoolKind kind, Rng& rng) {
    PoolSpec spec;
    spec.kind = kind;
    spec.kernel_size = pick(rng, 1, 4);
    spec.stride = pick(rng, 1, 3);
    spec.padding = pick(rng, 0, spec.kernel_size - 1);
    const std::size_t len = pick(rng, spec.kernel_size, spec.kernel_size + 9);
    pool_ = Pool1d(spec);
    x_ = random_map(pick(rng, 1, 3), len, rng);
    w_ = random_map(x_.channels, spec.out_length(len), rng);
  }

  std::vector<Tensor> tensors() override { return {{"input", &x_.data, &dx_}}; }
  double loss() override { return weighted_sum(pool_.forward(x_).data, w_.data); }
  void gradients() override {
    pool_.forward(x_);
    dx_ = pool_.backward(w_).data;
  }
  void pattern(std::vector<std::uint32_t>& out) override {
    for (std::size_t a : pool_.argmax()) out.push_back(static_cast<std::uint32_t>(a));
  }

 private:
  Pool1d pool_;
  FeatureMap x_, w_;
  std::vector<double> dx_;
};

class DenseProblem final : public GradProblem {
 public:
  explicit DenseProblem(Rng& rng) {
    const std::size_t in = pick(rng, 1, 6);
    const std::size_t out = pick(rng, 1, 6);
    dense_ = Dense("dense", in, out, rng);
    for (double& b : dense_.bias().values) b = rng.normal();
    x_ = gaussian(in, rng);
    w_ = gaussian(out, rng);
  }

  std::vector<Tensor> tensors() override {
    return {{"weight", &dense_.weight().values, &dense_.weight().grad},
            {"bias", &dense_.bias().values, &dense_.bias().grad},
            {"input", &x_, &dx_}};
  }
  double loss() override { return weighted_sum(dense_.forward(x_), w_); }
  void gradients() override {
    dense_.weight().zero_grad();
    dense_.bias().zero_grad();
    dense_.forward(x_);
    dx_ = dense_.backward(w_);
  }

 private:
  Dense dense_;
  std::vector<double> x_, w_, dx_;
};

class ActivationProblem final : public GradProblem {
 public:
  ActivationProblem(Activation kind, Rng& rng) : act_(kind) {
    const std::size_t n = pick(rng, 1, 8);
    x_ = gaussian(n, rng, 2.0);
    w_ = gaussian(n, rng);
  }

  std::vector<Tensor> tensors() override { return {{"input", &x_, &dx_}}; }
  double loss() override { return weighted_sum(act_.forward(x_), w_); }
  void gradients() override {
    act_.forward(x_);
    dx_ = act_.backward(w_);
  }
  void pattern(std::vector<std::uint32_t>& out) override { act_.append_pattern(out); }

 private:
  ActivationLayer act_;
  std::vector<double> x_, w_, dx_;
};

class LstmProblem final : public GradProblem {
 public:
  LstmProblem(Rng& rng, std::size_t steps) {
    const std::size_t in = pick(rng, 1, 4);
    const std::size_t hid = pick(rng, 1, 4);
    lstm_ = Lstm(in, hid, rng);
    for (Param* p : lstm_.parameters()) {
      for (double& v : p->values) v += 0.5 * rng.normal();
    }
    x_ = random_map(in, steps, rng);
    w_ = gaussian(hid, rng);
  }

  std::vector<Tensor> tensors() override {
    std::vector<Tensor> out;
    for (Param* p : lstm_.parameters()) out.push_back({p->name, &p->values, &p->grad});
    out.push_back({"input", &x_.data, &dx_});
    return out;
  }
  double loss() override { return weighted_sum(lstm_.forward(x_), w_); }
  void gradients() override {
    for (Param* p : lstm_.parameters()) p->zero_grad();
    lstm_.forward(x_);
    dx_ = lstm_.backward(w_).data;
  }

 private:
  Lstm lstm_;
  FeatureMap x_;
  std::vector<double> w_, dx_;
};

class ModelProblem final : public GradProblem {
 public:
  ModelProblem(const ModelSpec& spec, Rng& rng) : model_(build_model(spec, rng)) {
    for (Param* p : model_->parameters()) {
      for (double& v : p->values) v += 0.2 * rng.normal();
    }
    const WindowNeeds needs = window_needs(spec.kind);
    if (needs.long_window) in_.long_window = random_map(spec.n_vars, spec.long_len, rng);
    if (needs.short_window) in_.short_window = random_map(spec.n_vars, spec.short_len, rng);
    if (needs.daily_window) in_.daily_window = random_map(spec.n_vars, spec.daily_len, rng);
  }

  std::vector<Tensor> tensors() override {
    std::vector<Tensor> out;
    for (Param* p : model_->parameters()) out.push_back({p->name, &p->values, &p->grad});
    return out;
  }
  double loss() override { return model_->forward(in_); }
  void gradients() override {
    model_->zero_grad();
    model_->forward(in_);
    model_->backward(1.0);
  }
  void pattern(std::vector<std::uint32_t>& out) override { model_->append_pattern(out); }

 private:
  std::unique_ptr<Model> model_;
  AssembledInput in_;
};

struct TensorCheck {
  bool kink = false;
  double rel_err = 0.0;
};

inline TensorCheck check_tensor(GradProblem& prob, const GradProblem::Tensor& t, Rng& rng,
                                const GradcheckOptions& opt, bool corrupt) {
  std::vector<double>& theta = *t.values;
  const std::vector<double> base = theta;
  const std::vector<double> dir = gaussian(theta.size(), rng);
  prob.gradients();
  double analytic = weighted_sum(*t.grad, dir);
  if (corrupt) analytic *= 1.01;

  std::vector<std::uint32_t> p0, pp, pm;
  prob.loss();
  prob.pattern(p0);
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = base[i] + opt.step * dir[i];
  const double lp = prob.loss();
  prob.pattern(pp);
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = base[i] - opt.step * dir[i];
  const double lm = prob.loss();
  prob.pattern(pm);
  theta = base;
  if (pp != p0 || pm != p0) return {true, 0.0};

  const double numeric = (lp - lm) / (2.0 * opt.step);
  const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
  return {false, std::abs(analytic - numeric) / denom};
}

}  // namespace detail

/// Runs `opt.trials` randomized instances produced by `make` and checks every
/// tensor of each. A trial whose instance sits on a kink is redrawn.
template <typename Factory>
GradcheckResult run_gradcheck(const std::string& component, Factory make, const GradcheckOptions& opt) {
  GradcheckResult res;
  res.component = component;
  res.tolerance = opt.tolerance;
  std::uint64_t stream = 0xcbf29ce484222325ULL;
  for (unsigned char c : component) stream = (stream ^ c) * 0x100000001b3ULL;
  Rng rng = Rng(opt.seed).derive(stream);
  const bool corrupt = opt.corrupt == component;
  for (std::size_t trial = 0; trial < opt.trials; ++trial) {
    bool done = false;
    for (std::size_t attempt = 0; attempt <= opt.max_redraws && !done; ++attempt) {
      std::unique_ptr<GradProblem> prob = make(rng);
      std::vector<detail::TensorCheck> checks;
      bool kink = false;
      for (const auto& t : prob->tensors()) {
        checks.push_back(detail::check_tensor(*prob, t, rng, opt, corrupt));
        if (checks.back().kink) {
          kink = true;
          break;
        }
      }
      if (kink) {
        ++res.redraws;
        continue;
      }
      const auto tensors = prob->tensors();
      for (std::size_t i = 0; i < checks.size(); ++i) {
        ++res.checks;
        if (checks[i].rel_err > res.max_rel_err || !std::isfinite(checks[i].rel_err)) {
          res.max_rel_err = std::isfinite(checks[i].rel_err) ? checks[i].rel_err : INFINITY;
          res.worst_tensor = tensors[i].name;
        }
      }
      done = true;
    }
    if (!done) ++res.unresolved;
    ++res.trials;
  }
  return res;
}

/// Miniature geometry used for the end-to-end checks: 24-hour long window,
/// 6-step LSTM input, two input variables, hidden size 3.
inline ModelSpec gradcheck_spec(ModelKind kind) {
  ModelSpec s = ModelSpec::defaults(kind, 2, 2, 24);
  s.hidden_size = 3;
  s.short_len = 6;
  s.daily_len = 6;
  switch (kind) {
    case ModelKind::CnnSLstm: s.conv = {{4, 2, 1}, {3, 1, 1}, {2, 2, 0}}; break;
    case ModelKind::CnnOnly: s.fc_widths = {6, 4}; break;
    case ModelKind::CnnPLstm:
      s.fc_widths = {5};
      s.head_widths = {4};
      break;
    default: break;
  }
  s.validate();
  return s;
}

inline std::vector<std::string> gradcheck_components() {
  std::vector<std::string> out = {"conv1d", "pool1d_max", "pool1d_avg", "dense", "relu", "sigmoid", "tanh", "lstm_cell"};
  for (ModelKind k : kAllKinds) out.push_back(kind_id(k));
  return out;
}

/// Checks one named component (a layer from gradcheck_components() or an
/// architecture id).
inline GradcheckResult gradcheck_component(const std::string& name, const GradcheckOptions& opt) {
  using P = std::unique_ptr<GradProblem>;
  if (name == "conv1d") return run_gradcheck(name, [](Rng& r) -> P { return std::make_unique<detail::ConvProblem>(r); }, opt);
  if (name == "pool1d_max") {
    return run_gradcheck(name, [](Rng& r) -> P { return std::make_unique<detail::PoolProblem>(PoolKind::Max, r); }, opt);
  }
  if (name == "pool1d_avg") {
    return run_gradcheck(name, [](Rng& r) -> P { return std::make_unique<detail::PoolProblem>(PoolKind::Average, r); },
                         opt);
  }
  if (name == "dense") return run_gradcheck(name, [](Rng& r) -> P { return std::make_unique<detail::DenseProblem>(r); }, opt);
  if (name == "relu" || name == "sigmoid" || name == "tanh") {
    const Activation a = name == "relu" ? Activation::Relu : name == "sigmoid" ? Activation::Sigmoid : Activation::Tanh;
    return run_gradcheck(name, [a](Rng& r) -> P { return std::make_unique<detail::ActivationProblem>(a, r); }, opt);
  }
  if (name == "lstm_cell") {
    return run_gradcheck(name, [](Rng& r) -> P { return std::make_unique<detail::LstmProblem>(r, 5); }, opt);
  }
  const ModelSpec spec = gradcheck_spec(parse_kind(name));
  return run_gradcheck(kind_id(spec.kind), [spec](Rng& r) -> P { return std::make_unique<detail::ModelProblem>(spec, r); },
                       opt);
}

}  // namespace rrnet
