// SPDX-License-Identifier: Apache-2.0
//
// Single-layer LSTM with backpropagation through time, and the affine output
// head that maps the final hidden state to one flow value.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rrnet/errors.hpp"
#include "rrnet/layers.hpp"
#include "rrnet/numerics.hpp"

namespace rrnet {

/// Gate index order used by every array below: input, forget, output, cell input.
enum Gate : std::size_t { kInputGate = 0, kForgetGate = 1, kOutputGate = 2, kCellInput = 3 };
inline constexpr std::size_t kGates = 4;

/// The sixteen LSTM tensors. Input weights are [hidden x input], recurrent
/// weights [hidden x hidden]; each gate has separate input and recurrent biases.
struct LstmCellParams {
  std::array<Param, kGates> w_input;   // W_ii, W_if, W_io, W_ic
  std::array<Param, kGates> w_hidden;  // W_hi, W_hf, W_ho, W_hc
  std::array<Param, kGates> b_input;   // b_ii, b_if, b_io, b_ic
  std::array<Param, kGates> b_hidden;  // b_hi, b_hf, b_ho, b_hc

  static constexpr std::array<char, kGates> kSuffix{'i', 'f', 'o', 'c'};

  /// Zero-valued tensors of the right shapes.
  static LstmCellParams zeros(std::size_t input_size, std::size_t hidden_size, const std::string& prefix = "lstm") {
    LstmCellParams p;
    for (std::size_t g = 0; g < kGates; ++g) {
      const std::string s(1, kSuffix[g]);
      p.w_input[g] = Param(prefix + ".W_i" + s, {hidden_size, input_size});
      p.w_hidden[g] = Param(prefix + ".W_h" + s, {hidden_size, hidden_size});
      p.b_input[g] = Param(prefix + ".b_i" + s, {hidden_size});
      p.b_hidden[g] = Param(prefix + ".b_h" + s, {hidden_size});
    }
    return p;
  }

  /// Glorot-uniform weights, zero biases (the forget bias included).
  static LstmCellParams random(std::size_t input_size, std::size_t hidden_size, Rng& rng,
                               const std::string& prefix = "lstm") {
    LstmCellParams p = zeros(input_size, hidden_size, prefix);
    for (std::size_t g = 0; g < kGates; ++g) {
      p.w_input[g] = init_params(p.w_input[g].name, p.w_input[g].shape, input_size, hidden_size, rng);
      p.w_hidden[g] = init_params(p.w_hidden[g].name, p.w_hidden[g].shape, hidden_size, hidden_size, rng);
    }
    return p;
  }

  std::size_t input_size() const { return w_input[0].shape.at(1); }
  std::size_t hidden_size() const { return w_input[0].shape.at(0); }

  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    for (auto& p : w_input) out.push_back(&p);
    for (auto& p : w_hidden) out.push_back(&p);
    for (auto& p : b_input) out.push_back(&p);
    for (auto& p : b_hidden) out.push_back(&p);
    return out;
  }
};

struct LstmState {
  std::vector<double> h;
  std::vector<double> c;

  static LstmState zeros(std::size_t hidden_size) {
    return {std::vector<double>(hidden_size, 0.0), std::vector<double>(hidden_size, 0.0)};
  }
};

/// Gate activations of one step.
struct LstmStepCache {
  std::array<std::vector<double>, kGates> gates;
  std::vector<double> tanh_c;
};

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    s0 += a[k] * b[k];
    s1 += a[k + 1] * b[k + 1];
    s2 += a[k + 2] * b[k + 2];
    s3 += a[k + 3] * b[k + 3];
  }
  for (; k < n; ++k) s0 += a[k] * b[k];
  return (s0 + s1) + (s2 + s3);
}

inline void lstm_gates(const double* x, const double* h_prev, const LstmCellParams& p, std::size_t in,
                       std::size_t hid, double* gates /* [4][hid] */) {
  for (std::size_t g = 0; g < kGates; ++g) {
    const double* wi = p.w_input[g].values.data();
    const double* wh = p.w_hidden[g].values.data();
    const double* bi = p.b_input[g].values.data();
    const double* bh = p.b_hidden[g].values.data();
    for (std::size_t r = 0; r < hid; ++r) {
      const double acc = bi[r] + bh[r] + dot(wi + r * in, x, in) + dot(wh + r * hid, h_prev, hid);
      gates[g * hid + r] = (g == kCellInput) ? std::tanh(acc) : sigmoid(acc);
    }
  }
}

}  // namespace detail

/// One LSTM step: sigmoid gates, tanh cell input, c = f*c_prev + i*g,
/// h = o*tanh(c).
inline LstmState lstm_step(std::span<const double> x, const LstmState& prev, const LstmCellParams& params,
                           LstmStepCache* cache = nullptr) {
  const std::size_t in = params.input_size();
  const std::size_t hid = params.hidden_size();
  if (x.size() != in) {
    throw ShapeError("lstm_step: input has " + std::to_string(x.size()) + " entries, expected " + std::to_string(in));
  }
  if (prev.h.size() != hid || prev.c.size() != hid) {
    throw ShapeError("lstm_step: state size does not match hidden size " + std::to_string(hid));
  }
  std::vector<double> gates(kGates * hid);
  detail::lstm_gates(x.data(), prev.h.data(), params, in, hid, gates.data());
  LstmState next = LstmState::zeros(hid);
  std::vector<double> tanh_c(hid);
  for (std::size_t r = 0; r < hid; ++r) {
    next.c[r] = gates[kForgetGate * hid + r] * prev.c[r] + gates[kInputGate * hid + r] * gates[kCellInput * hid + r];
    tanh_c[r] = std::tanh(next.c[r]);
    next.h[r] = gates[kOutputGate * hid + r] * tanh_c[r];
  }
  if (cache) {
    for (std::size_t g = 0; g < kGates; ++g) {
      cache->gates[g].assign(gates.begin() + static_cast<std::ptrdiff_t>(g * hid),
                             gates.begin() + static_cast<std::ptrdiff_t>((g + 1) * hid));
    }
    cache->tanh_c = std::move(tanh_c);
  }
  return next;
}

/// Many-to-one LSTM over a [input_size x T] sequence, starting from the zero
/// state. Keeps the per-step cache for backward.
class Lstm {
 public:
  Lstm() = default;
  Lstm(std::size_t input_size, std::size_t hidden_size, Rng& rng, const std::string& prefix = "lstm")
      : params_(LstmCellParams::random(input_size, hidden_size, rng, prefix)) {}
  explicit Lstm(LstmCellParams params) : params_(std::move(params)) {}

  std::size_t input_size() const { return params_.input_size(); }
  std::size_t hidden_size() const { return params_.hidden_size(); }
  LstmCellParams& cell() { return params_; }
  const LstmCellParams& cell() const { return params_; }
  std::vector<Param*> parameters() { return params_.parameters(); }

  /// Returns h(T).
  std::vector<double> forward(const FeatureMap& sequence) {
    const std::size_t in = input_size();
    const std::size_t hid = hidden_size();
    if (sequence.channels != in) {
      throw ShapeError("lstm: sequence has " + std::to_string(sequence.channels) + " channels, expected " +
                       std::to_string(in));
    }
    if (sequence.length < 1) throw ShapeError("lstm: empty sequence");
    const std::size_t steps = sequence.length;
    steps_ = steps;
    x_.resize(steps * in);
    for (std::size_t n = 0; n < in; ++n) {
      for (std::size_t s = 0; s < steps; ++s) x_[s * in + n] = sequence.at(n, s);
    }
    gates_.resize(steps * kGates * hid);
    h_.assign((steps + 1) * hid, 0.0);
    c_.assign((steps + 1) * hid, 0.0);
    tanh_c_.resize(steps * hid);
    for (std::size_t s = 0; s < steps; ++s) {
      double* gates = gates_.data() + s * kGates * hid;
      const double* h_prev = h_.data() + s * hid;
      const double* c_prev = c_.data() + s * hid;
      double* h_next = h_.data() + (s + 1) * hid;
      double* c_next = c_.data() + (s + 1) * hid;
      double* tc = tanh_c_.data() + s * hid;
      detail::lstm_gates(x_.data() + s * in, h_prev, params_, in, hid, gates);
      for (std::size_t r = 0; r < hid; ++r) {
        c_next[r] = gates[kForgetGate * hid + r] * c_prev[r] + gates[kInputGate * hid + r] * gates[kCellInput * hid + r];
        tc[r] = std::tanh(c_next[r]);
        h_next[r] = gates[kOutputGate * hid + r] * tc[r];
      }
    }
    has_cache_ = true;
    return {h_.end() - static_cast<std::ptrdiff_t>(hid), h_.end()};
  }

  /// BPTT from dL/dh(T). Accumulates into all sixteen tensors and returns
  /// dL/dx as a [input_size x T] map.
  FeatureMap backward(std::span<const double> dh_final) {
    if (!has_cache_) throw StateError("lstm backward called without a forward cache");
    const std::size_t in = input_size();
    const std::size_t hid = hidden_size();
    if (dh_final.size() != hid) throw ShapeError("lstm backward: gradient size does not match hidden size");
    const std::size_t steps = steps_;
    FeatureMap dx(in, steps);
    std::vector<double> dh(dh_final.begin(), dh_final.end());
    std::vector<double> dc(hid, 0.0);
    std::vector<double> dpre(kGates * hid);
    std::vector<double> dh_prev(hid);
    std::vector<double> dx_step(in);
    for (std::size_t s = steps; s-- > 0;) {
      const double* gates = gates_.data() + s * kGates * hid;
      const double* c_prev = c_.data() + s * hid;
      const double* h_prev = h_.data() + s * hid;
      const double* tc = tanh_c_.data() + s * hid;
      const double* x = x_.data() + s * in;
      for (std::size_t r = 0; r < hid; ++r) {
        const double gi = gates[kInputGate * hid + r];
        const double gf = gates[kForgetGate * hid + r];
        const double go = gates[kOutputGate * hid + r];
        const double gc = gates[kCellInput * hid + r];
        const double dcell = dc[r] + dh[r] * go * (1.0 - tc[r] * tc[r]);
        dpre[kOutputGate * hid + r] = dh[r] * tc[r] * go * (1.0 - go);
        dpre[kInputGate * hid + r] = dcell * gc * gi * (1.0 - gi);
        dpre[kCellInput * hid + r] = dcell * gi * (1.0 - gc * gc);
        dpre[kForgetGate * hid + r] = dcell * c_prev[r] * gf * (1.0 - gf);
        dc[r] = dcell * gf;
      }
      std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
      std::fill(dx_step.begin(), dx_step.end(), 0.0);
      for (std::size_t g = 0; g < kGates; ++g) {
        Param& wi = params_.w_input[g];
        Param& wh = params_.w_hidden[g];
        double* dbi = params_.b_input[g].grad.data();
        double* dbh = params_.b_hidden[g].grad.data();
        for (std::size_t r = 0; r < hid; ++r) {
          const double d = dpre[g * hid + r];
          dbi[r] += d;
          dbh[r] += d;
          const double* wir = wi.values.data() + r * in;
          double* dwir = wi.grad.data() + r * in;
          for (std::size_t k = 0; k < in; ++k) {
            dwir[k] += d * x[k];
            dx_step[k] += wir[k] * d;
          }
          const double* whr = wh.values.data() + r * hid;
          double* dwhr = wh.grad.data() + r * hid;
          for (std::size_t k = 0; k < hid; ++k) {
            dwhr[k] += d * h_prev[k];
            dh_prev[k] += whr[k] * d;
          }
        }
      }
      for (std::size_t k = 0; k < in; ++k) dx.at(k, s) = dx_step[k];
      dh.swap(dh_prev);
    }
    return dx;
  }

  std::size_t cached_steps() const { return has_cache_ ? steps_ : 0; }

  /// Gate activations (gate g, step s, unit r) from the last forward pass.
  double cached_gate(std::size_t s, std::size_t g, std::size_t r) const {
    return gates_[s * kGates * hidden_size() + g * hidden_size() + r];
  }
  double cached_tanh_c(std::size_t s, std::size_t r) const { return tanh_c_[s * hidden_size() + r]; }
  /// h(s) for s = 1..T (index s), h(0) = 0.
  double cached_h(std::size_t s, std::size_t r) const { return h_[s * hidden_size() + r]; }

 private:
  LstmCellParams params_;
  std::vector<double> x_;       // [T][in]
  std::vector<double> gates_;   // [T][4][hid]
  std::vector<double> h_;       // [T+1][hid]
  std::vector<double> c_;       // [T+1][hid]
  std::vector<double> tanh_c_;  // [T][hid]
  std::size_t steps_ = 0;
  bool has_cache_ = false;
};

/// y = W_out . h + b_out.
inline double output_head(std::span<const double> h, const Param& weight, const Param& bias) {
  if (weight.size() != h.size() || bias.size() != 1) {
    throw ShapeError("output_head: weight '" + weight.name + "' is " + shape_string(weight.shape) +
                     ", hidden state has " + std::to_string(h.size()) + " entries");
  }
  return dense_forward(h, weight, bias)[0];
}

}  // namespace rrnet
