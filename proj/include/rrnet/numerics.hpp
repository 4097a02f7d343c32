// SPDX-License-Identifier: Apache-2.0
//
// Seeded randomness, learnable parameter storage, the MSE loss and the Adam
// optimizer. Everything is 64-bit floating point.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rrnet/errors.hpp"

namespace rrnet {

/// SplitMix64 generator (Steele, Lea & Flood 2014). The whole state is one
/// 64-bit counter, so a seed reproduces the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) (Lemire's multiply-shift with rejection).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below: n must be positive");
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Standard normal draw (Box-Muller, one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Exponential draw with the given mean.
  double exponential(double mean) {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return -mean * std::log(u);
  }

  /// Independent stream derived from this generator's seed and a stream id.
  Rng derive(std::uint64_t stream) const {
    Rng mixer(seed_ ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
    return Rng(mixer.next_u64());
  }

  /// In-place Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

inline std::size_t shape_size(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out.empty() ? "scalar" : out;
}

/// A learnable tensor: values, gradient accumulator and Adam moments, all
/// the same flat size. Layout is row-major over `shape`.
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step_count = 0;

  Param() = default;
  Param(std::string param_name, std::vector<std::size_t> param_shape)
      : name(std::move(param_name)), shape(std::move(param_shape)) {
    const std::size_t n = shape_size(shape);
    values.assign(n, 0.0);
    grad.assign(n, 0.0);
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }

  std::size_t size() const { return values.size(); }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  void reset_optimizer() {
    std::fill(m.begin(), m.end(), 0.0);
    std::fill(v.begin(), v.end(), 0.0);
    step_count = 0;
  }
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean squared error and its gradient with respect to `pred`.
inline LossAndGrad mse_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw ShapeError("mse_loss: pred has " + std::to_string(pred.size()) + " entries, target has " +
                     std::to_string(target.size()));
  }
  if (pred.empty()) throw EmptyInputError("mse_loss: empty input");
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  LossAndGrad out;
  out.grad.resize(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    sum += d * d;
    out.grad[i] = 2.0 * inv_n * d;
  }
  out.loss = sum * inv_n;
  return out;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0) || !(eps > 0.0)) throw ConfigError("Adam: lr and eps must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw ConfigError("Adam: betas must lie in (0, 1)");
    }
  }
};

/// One bias-corrected Adam update of every parameter. Gradients are left in
/// place; the caller clears them. All gradients are checked for finiteness
/// before any value is touched.
inline void adam_step(std::span<Param* const> params, const AdamConfig& cfg) {
  cfg.validate();
  for (const Param* p : params) {
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(p->grad[i])) {
        throw NumericError("adam_step: non-finite gradient in parameter '" + p->name + "' at index " +
                           std::to_string(i));
      }
    }
  }
  for (Param* p : params) {
    p->step_count += 1;
    const auto t = static_cast<double>(p->step_count);
    const double correction1 = 1.0 - std::pow(cfg.beta1, t);
    const double correction2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < p->values.size(); ++i) {
      const double g = p->grad[i];
      p->m[i] = cfg.beta1 * p->m[i] + (1.0 - cfg.beta1) * g;
      p->v[i] = cfg.beta2 * p->v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = p->m[i] / correction1;
      const double v_hat = p->v[i] / correction2;
      p->values[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)).
inline Param init_params(std::string name, std::vector<std::size_t> shape, std::size_t fan_in,
                         std::size_t fan_out, Rng& rng) {
  if (fan_in < 1 || fan_out < 1) throw ConfigError("init_params: fan_in and fan_out must be >= 1");
  Param p(std::move(name), std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& x : p.values) x = rng.uniform(-limit, limit);
  return p;
}

/// Biases start at zero.
inline Param init_bias(std::string name, std::vector<std::size_t> shape) {
  return Param(std::move(name), std::move(shape));
}

}  // namespace rrnet
