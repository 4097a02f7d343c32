// SPDX-License-Identifier: Apache-2.0
//
// 1-D convolution, 1-D pooling, fully-connected layers and elementwise
// activations. Each operation comes as a stateless forward/backward pair of
// free functions plus a small layer object that owns its parameters and the
// forward cache needed by backward.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rrnet/errors.hpp"
#include "rrnet/numerics.hpp"

namespace rrnet {

/// channels x length array, laid out [channel][position].
struct FeatureMap {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(std::size_t c, std::size_t l, double fill = 0.0) : channels(c), length(l), data(c * l, fill) {}

  double& at(std::size_t c, std::size_t i) { return data[c * length + i]; }
  double at(std::size_t c, std::size_t i) const { return data[c * length + i]; }

  std::span<double> row(std::size_t c) { return {data.data() + c * length, length}; }
  std::span<const double> row(std::size_t c) const { return {data.data() + c * length, length}; }

  bool same_shape(const FeatureMap& other) const {
    return channels == other.channels && length == other.length;
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
  }

  std::string shape_str() const { return std::to_string(channels) + "x" + std::to_string(length); }
};

/// floor((length + 2*padding - kernel) / stride) + 1, or ConfigError when the
/// window does not fit even once.
inline std::size_t sliding_out_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                      std::size_t padding) {
  if (kernel < 1 || stride < 1) throw ConfigError("kernel size and stride must be >= 1");
  if (length + 2 * padding < kernel) {
    throw ConfigError("window of size " + std::to_string(kernel) + " does not fit input of length " +
                      std::to_string(length) + " with padding " + std::to_string(padding));
  }
  return (length + 2 * padding - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_size = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_length(std::size_t length) const {
    return sliding_out_length(length, kernel_size, stride, padding);
  }
};

namespace detail {

// Range [first, last) of output positions i whose tap m lands inside the input.
inline std::pair<std::size_t, std::size_t> valid_positions(std::size_t tap, std::size_t length,
                                                           std::size_t stride, std::size_t padding,
                                                           std::size_t out_len) {
  // need 0 <= i*stride + tap - padding <= length - 1
  std::size_t first = 0;
  if (padding > tap) first = (padding - tap + stride - 1) / stride;
  if (length + padding < tap + 1) return {0, 0};
  std::size_t last = (length - 1 + padding - tap) / stride + 1;
  last = std::min(last, out_len);
  if (first >= last) return {0, 0};
  return {first, last};
}

inline void check_conv_params(const Param& kernels, const Param& bias, const ConvSpec& spec) {
  if (kernels.size() != spec.out_channels * spec.in_channels * spec.kernel_size) {
    throw ShapeError("conv1d: kernel tensor '" + kernels.name + "' has " + std::to_string(kernels.size()) +
                     " entries, expected " + std::to_string(spec.out_channels) + "x" +
                     std::to_string(spec.in_channels) + "x" + std::to_string(spec.kernel_size));
  }
  if (bias.size() != spec.out_channels) {
    throw ShapeError("conv1d: bias '" + bias.name + "' has " + std::to_string(bias.size()) +
                     " entries, expected " + std::to_string(spec.out_channels));
  }
}

}  // namespace detail

/// v[p][i] = sum_n sum_m k[p][n][m] * u[n][i*S + m - pad] + b[p], with zeros
/// outside the input.
inline FeatureMap conv1d_forward(const FeatureMap& input, const Param& kernels, const Param& bias,
                                 const ConvSpec& spec) {
  if (input.channels != spec.in_channels) {
    throw ShapeError("conv1d: input has " + std::to_string(input.channels) + " channels, expected " +
                     std::to_string(spec.in_channels));
  }
  detail::check_conv_params(kernels, bias, spec);
  const std::size_t out_len = spec.out_length(input.length);
  const std::size_t in_len = input.length;
  const std::size_t taps = spec.kernel_size;
  const std::size_t stride = spec.stride;
  FeatureMap out(spec.out_channels, out_len);
  for (std::size_t p = 0; p < spec.out_channels; ++p) {
    double* o = out.data.data() + p * out_len;
    std::fill(o, o + out_len, bias.values[p]);
    for (std::size_t n = 0; n < spec.in_channels; ++n) {
      const double* u = input.data.data() + n * in_len;
      const double* k = kernels.values.data() + (p * spec.in_channels + n) * taps;
      for (std::size_t m = 0; m < taps; ++m) {
        const auto [first, last] = detail::valid_positions(m, in_len, stride, spec.padding, out_len);
        const double w = k[m];
        const double* src = u + (m + first * stride - spec.padding);
        for (std::size_t i = first; i < last; ++i, src += stride) o[i] += w * *src;
      }
    }
  }
  return out;
}

/// Accumulates dL/dk and dL/db into the parameters and returns dL/du (padding
/// positions dropped).
inline FeatureMap conv1d_backward(const FeatureMap& output_grad, const FeatureMap& input, Param& kernels,
                                  Param& bias, const ConvSpec& spec) {
  detail::check_conv_params(kernels, bias, spec);
  const std::size_t out_len = spec.out_length(input.length);
  if (output_grad.channels != spec.out_channels || output_grad.length != out_len) {
    throw ShapeError("conv1d backward: output gradient is " + output_grad.shape_str() + ", expected " +
                     std::to_string(spec.out_channels) + "x" + std::to_string(out_len));
  }
  const std::size_t in_len = input.length;
  const std::size_t taps = spec.kernel_size;
  const std::size_t stride = spec.stride;
  FeatureMap grad_in(input.channels, in_len);
  for (std::size_t p = 0; p < spec.out_channels; ++p) {
    const double* g = output_grad.data.data() + p * out_len;
    double bsum = 0.0;
    for (std::size_t i = 0; i < out_len; ++i) bsum += g[i];
    bias.grad[p] += bsum;
    for (std::size_t n = 0; n < spec.in_channels; ++n) {
      const double* u = input.data.data() + n * in_len;
      double* du = grad_in.data.data() + n * in_len;
      const std::size_t koff = (p * spec.in_channels + n) * taps;
      const double* k = kernels.values.data() + koff;
      double* dk = kernels.grad.data() + koff;
      for (std::size_t m = 0; m < taps; ++m) {
        const auto [first, last] = detail::valid_positions(m, in_len, stride, spec.padding, out_len);
        const std::size_t base = m + first * stride - spec.padding;
        const double* src = u + base;
        double* dst = du + base;
        const double w = k[m];
        double acc = 0.0;
        for (std::size_t i = first; i < last; ++i, src += stride, dst += stride) {
          acc += g[i] * *src;
          *dst += w * g[i];
        }
        dk[m] += acc;
      }
    }
  }
  return grad_in;
}

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(std::string name, const ConvSpec& spec, Rng& rng)
      : spec_(spec),
        kernels_(init_params(name + ".kernel", {spec.out_channels, spec.in_channels, spec.kernel_size},
                             spec.in_channels * spec.kernel_size, spec.out_channels * spec.kernel_size, rng)),
        bias_(init_bias(name + ".bias", {spec.out_channels})) {}

  const ConvSpec& spec() const { return spec_; }

  FeatureMap forward(const FeatureMap& input) {
    FeatureMap out = conv1d_forward(input, kernels_, bias_, spec_);
    cache_ = input;
    return out;
  }

  FeatureMap backward(const FeatureMap& output_grad) {
    if (!cache_) throw StateError("conv1d backward called without a forward cache");
    return conv1d_backward(output_grad, *cache_, kernels_, bias_, spec_);
  }

  std::vector<Param*> parameters() { return {&kernels_, &bias_}; }
  Param& kernels() { return kernels_; }
  Param& bias() { return bias_; }

 private:
  ConvSpec spec_;
  Param kernels_;
  Param bias_;
  std::optional<FeatureMap> cache_;
};

// ---------------------------------------------------------------------------
// Pooling

enum class PoolKind { Max, Average };

struct PoolSpec {
  std::size_t kernel_size = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  PoolKind kind = PoolKind::Max;

  std::size_t out_length(std::size_t length) const {
    if (padding >= kernel_size) {
      throw ConfigError("pool1d: padding " + std::to_string(padding) + " must be smaller than kernel " +
                        std::to_string(kernel_size));
    }
    return sliding_out_length(length, kernel_size, stride, padding);
  }
};

/// Per channel, per window: max or mean over the in-bounds elements (padding
/// is treated as absent). For max pooling `argmax` receives the input index
/// of the first maximal element of each window.
inline FeatureMap pool1d_forward(const FeatureMap& input, const PoolSpec& spec,
                                 std::vector<std::size_t>* argmax = nullptr) {
  const std::size_t out_len = spec.out_length(input.length);
  FeatureMap out(input.channels, out_len);
  if (argmax) argmax->assign(input.channels * out_len, 0);
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  const auto len = static_cast<std::ptrdiff_t>(input.length);
  for (std::size_t c = 0; c < input.channels; ++c) {
    const double* u = input.data.data() + c * input.length;
    for (std::size_t i = 0; i < out_len; ++i) {
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(i * spec.stride) - pad;
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(start, 0);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(start + static_cast<std::ptrdiff_t>(spec.kernel_size), len);
      double result;
      if (spec.kind == PoolKind::Max) {
        std::ptrdiff_t best = lo;
        for (std::ptrdiff_t j = lo + 1; j < hi; ++j) {
          if (u[j] > u[best]) best = j;
        }
        result = u[best];
        if (argmax) (*argmax)[c * out_len + i] = static_cast<std::size_t>(best);
      } else {
        double sum = 0.0;
        for (std::ptrdiff_t j = lo; j < hi; ++j) sum += u[j];
        result = sum / static_cast<double>(hi - lo);
      }
      out.at(c, i) = result;
    }
  }
  return out;
}

/// Max: each output gradient goes to the recorded argmax. Average: spread
/// evenly over the in-bounds window positions.
inline FeatureMap pool1d_backward(const FeatureMap& output_grad, std::size_t input_length,
                                  std::span<const std::size_t> argmax, const PoolSpec& spec) {
  const std::size_t out_len = spec.out_length(input_length);
  if (output_grad.length != out_len) {
    throw ShapeError("pool1d backward: output gradient length " + std::to_string(output_grad.length) +
                     ", expected " + std::to_string(out_len));
  }
  FeatureMap grad_in(output_grad.channels, input_length);
  if (spec.kind == PoolKind::Max) {
    if (argmax.size() != output_grad.channels * out_len) {
      throw StateError("pool1d backward: argmax cache does not match the output gradient");
    }
    for (std::size_t c = 0; c < output_grad.channels; ++c) {
      for (std::size_t i = 0; i < out_len; ++i) {
        grad_in.at(c, argmax[c * out_len + i]) += output_grad.at(c, i);
      }
    }
    return grad_in;
  }
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  const auto len = static_cast<std::ptrdiff_t>(input_length);
  for (std::size_t c = 0; c < output_grad.channels; ++c) {
    for (std::size_t i = 0; i < out_len; ++i) {
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(i * spec.stride) - pad;
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(start, 0);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(start + static_cast<std::ptrdiff_t>(spec.kernel_size), len);
      const double share = output_grad.at(c, i) / static_cast<double>(hi - lo);
      for (std::ptrdiff_t j = lo; j < hi; ++j) grad_in.at(c, static_cast<std::size_t>(j)) += share;
    }
  }
  return grad_in;
}

class Pool1d {
 public:
  Pool1d() = default;
  explicit Pool1d(const PoolSpec& spec) : spec_(spec) {}

  const PoolSpec& spec() const { return spec_; }

  FeatureMap forward(const FeatureMap& input) {
    FeatureMap out = pool1d_forward(input, spec_, &argmax_);
    input_length_ = input.length;
    has_cache_ = true;
    return out;
  }

  FeatureMap backward(const FeatureMap& output_grad) const {
    if (!has_cache_) throw StateError("pool1d backward called without a forward cache");
    return pool1d_backward(output_grad, input_length_, argmax_, spec_);
  }

  /// Argmax indices of the last forward pass; changes mark a non-smooth point.
  std::span<const std::size_t> argmax() const { return argmax_; }

 private:
  PoolSpec spec_;
  std::vector<std::size_t> argmax_;
  std::size_t input_length_ = 0;
  bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Fully-connected

/// out = W * input + b with W stored [out][in].
inline std::vector<double> dense_forward(std::span<const double> input, const Param& weight, const Param& bias) {
  const std::size_t out_dim = bias.size();
  if (weight.size() != out_dim * input.size()) {
    throw ShapeError("dense: weight '" + weight.name + "' is " + shape_string(weight.shape) +
                     ", incompatible with input of length " + std::to_string(input.size()) + " and bias of length " +
                     std::to_string(out_dim));
  }
  std::vector<double> out(out_dim);
  const std::size_t in_dim = input.size();
  for (std::size_t r = 0; r < out_dim; ++r) {
    const double* w = weight.values.data() + r * in_dim;
    double acc = bias.values[r];
    for (std::size_t c = 0; c < in_dim; ++c) acc += w[c] * input[c];
    out[r] = acc;
  }
  return out;
}

/// Accumulates dL/dW, dL/db and returns W^T * output_grad.
inline std::vector<double> dense_backward(std::span<const double> output_grad, std::span<const double> input,
                                          Param& weight, Param& bias) {
  const std::size_t out_dim = bias.size();
  const std::size_t in_dim = input.size();
  if (output_grad.size() != out_dim || weight.size() != out_dim * in_dim) {
    throw ShapeError("dense backward: gradient of length " + std::to_string(output_grad.size()) +
                     " does not match weight '" + weight.name + "' " + shape_string(weight.shape));
  }
  std::vector<double> grad_in(in_dim, 0.0);
  for (std::size_t r = 0; r < out_dim; ++r) {
    const double g = output_grad[r];
    bias.grad[r] += g;
    const double* w = weight.values.data() + r * in_dim;
    double* dw = weight.grad.data() + r * in_dim;
    for (std::size_t c = 0; c < in_dim; ++c) {
      dw[c] += g * input[c];
      grad_in[c] += w[c] * g;
    }
  }
  return grad_in;
}

class Dense {
 public:
  Dense() = default;
  Dense(std::string name, std::size_t in_dim, std::size_t out_dim, Rng& rng)
      : weight_(init_params(name + ".weight", {out_dim, in_dim}, in_dim, out_dim, rng)),
        bias_(init_bias(name + ".bias", {out_dim})) {}

  std::size_t in_dim() const { return weight_.shape.at(1); }
  std::size_t out_dim() const { return weight_.shape.at(0); }

  std::vector<double> forward(std::span<const double> input) {
    auto out = dense_forward(input, weight_, bias_);
    cache_.assign(input.begin(), input.end());
    has_cache_ = true;
    return out;
  }

  std::vector<double> backward(std::span<const double> output_grad) {
    if (!has_cache_) throw StateError("dense backward called without a forward cache");
    return dense_backward(output_grad, cache_, weight_, bias_);
  }

  std::vector<Param*> parameters() { return {&weight_, &bias_}; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  Param weight_;
  Param bias_;
  std::vector<double> cache_;
  bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Activations

enum class Activation { Relu, Sigmoid, Tanh };

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double activate(Activation kind, double x) {
  switch (kind) {
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Sigmoid: return sigmoid(x);
    case Activation::Tanh: return std::tanh(x);
  }
  return x;
}

/// Derivative expressed through the input x and the output y = f(x).
/// relu'(0) is taken as 0.
inline double activation_derivative(Activation kind, double x, double y) {
  switch (kind) {
    case Activation::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::Sigmoid: return y * (1.0 - y);
    case Activation::Tanh: return 1.0 - y * y;
  }
  return 1.0;
}

inline std::vector<double> activation_forward(Activation kind, std::span<const double> input) {
  std::vector<double> out(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = activate(kind, input[i]);
  return out;
}

inline std::vector<double> activation_backward(Activation kind, std::span<const double> input,
                                               std::span<const double> output,
                                               std::span<const double> output_grad) {
  if (input.size() != output_grad.size() || output.size() != input.size()) {
    throw ShapeError("activation backward: size mismatch");
  }
  std::vector<double> grad(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    grad[i] = output_grad[i] * activation_derivative(kind, input[i], output[i]);
  }
  return grad;
}

/// Elementwise activation with cache. Works on flat vectors; feature maps
/// pass their data array and keep their shape.
class ActivationLayer {
 public:
  ActivationLayer() = default;
  explicit ActivationLayer(Activation kind) : kind_(kind) {}

  Activation kind() const { return kind_; }

  std::vector<double> forward(std::span<const double> input) {
    input_.assign(input.begin(), input.end());
    output_ = activation_forward(kind_, input);
    has_cache_ = true;
    return output_;
  }

  FeatureMap forward(const FeatureMap& input) {
    FeatureMap out(input.channels, input.length);
    out.data = forward(std::span<const double>(input.data));
    return out;
  }

  std::vector<double> backward(std::span<const double> output_grad) const {
    if (!has_cache_) throw StateError("activation backward called without a forward cache");
    return activation_backward(kind_, input_, output_, output_grad);
  }

  FeatureMap backward(const FeatureMap& output_grad) const {
    FeatureMap g(output_grad.channels, output_grad.length);
    g.data = backward(std::span<const double>(output_grad.data));
    return g;
  }

  /// Sign pattern of the cached input for ReLU (empty for smooth kinds).
  void append_pattern(std::vector<std::uint32_t>& out) const {
    if (kind_ != Activation::Relu) return;
    for (double x : input_) out.push_back(x > 0.0 ? 1u : 0u);
  }

 private:
  Activation kind_ = Activation::Relu;
  std::vector<double> input_;
  std::vector<double> output_;
  bool has_cache_ = false;
};

}  // namespace rrnet
