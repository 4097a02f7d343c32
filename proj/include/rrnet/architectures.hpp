// SPDX-License-Identifier: Apache-2.0
//
// The five rainfall-runoff models:
//
//   cnn        conv/pool x3 -> flatten -> FC -> FC -> 1
//   lstmwhour  LSTM over the long hourly window -> head
//   lstmwdph   LSTM over stacked [short hourly ; daily] rows -> head
//   cnnplstm   (conv/pool x3 -> FC on the long window) || (LSTM on the short
//              window) -> concat -> FC -> 1
//   cnnslstm   conv x3 on the long window, its feature map stacked under the
//              short hourly window -> LSTM -> head
//
// ModelSpec is the declarative description, build_model() turns it into a
// Model with freshly initialised parameters.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "rrnet/errors.hpp"
#include "rrnet/layers.hpp"
#include "rrnet/numerics.hpp"
#include "rrnet/recurrent.hpp"

namespace rrnet {

enum class ModelKind { CnnOnly, LstmWHour, LstmWDpH, CnnPLstm, CnnSLstm };

inline constexpr ModelKind kAllKinds[] = {ModelKind::CnnOnly, ModelKind::LstmWHour, ModelKind::LstmWDpH,
                                          ModelKind::CnnPLstm, ModelKind::CnnSLstm};

inline std::string kind_id(ModelKind kind) {
  switch (kind) {
    case ModelKind::CnnOnly: return "cnn";
    case ModelKind::LstmWHour: return "lstmwhour";
    case ModelKind::LstmWDpH: return "lstmwdph";
    case ModelKind::CnnPLstm: return "cnnplstm";
    case ModelKind::CnnSLstm: return "cnnslstm";
  }
  return "?";
}

inline std::string kind_display(ModelKind kind) {
  switch (kind) {
    case ModelKind::CnnOnly: return "1D-CNN";
    case ModelKind::LstmWHour: return "LSTMwHour";
    case ModelKind::LstmWDpH: return "LSTMwDpH";
    case ModelKind::CnnPLstm: return "CNNpLSTM";
    case ModelKind::CnnSLstm: return "CNNsLSTM";
  }
  return "?";
}

inline ModelKind parse_kind(const std::string& text) {
  std::string s;
  for (char c : text) {
    if (c != '-' && c != '_') s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  if (s == "cnn" || s == "1dcnn" || s == "cnnonly") return ModelKind::CnnOnly;
  if (s == "lstmwhour") return ModelKind::LstmWHour;
  if (s == "lstmwdph") return ModelKind::LstmWDpH;
  if (s == "cnnplstm") return ModelKind::CnnPLstm;
  if (s == "cnnslstm") return ModelKind::CnnSLstm;
  throw ConfigError("unknown architecture '" + text + "' (expected cnn, lstmwhour, lstmwdph, cnnplstm, cnnslstm)");
}

/// Kernel/stride/padding of one sliding-window layer.
struct LayerGeom {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  bool operator==(const LayerGeom&) const = default;
};

/// Which windows a kind consumes.
struct WindowNeeds {
  bool long_window = false;
  bool short_window = false;
  bool daily_window = false;
};

inline WindowNeeds window_needs(ModelKind kind) {
  switch (kind) {
    case ModelKind::CnnOnly: return {true, false, false};
    case ModelKind::LstmWHour: return {true, false, false};
    case ModelKind::LstmWDpH: return {false, true, true};
    case ModelKind::CnnPLstm: return {true, true, false};
    case ModelKind::CnnSLstm: return {true, true, false};
  }
  return {};
}

inline bool uses_pooling(ModelKind kind) { return kind == ModelKind::CnnOnly || kind == ModelKind::CnnPLstm; }
inline bool uses_conv(ModelKind kind) { return uses_pooling(kind) || kind == ModelKind::CnnSLstm; }

struct ModelSpec {
  ModelKind kind = ModelKind::CnnSLstm;
  std::size_t nchf = 8;          // channels of the first conv layer, doubled per layer
  std::size_t n_vars = 6;        // meteorological input channels
  std::size_t long_len = 5040;   // hours fed to the CNN / to LSTMwHour
  std::size_t short_len = 210;   // hours fed to the LSTM of the hybrids and LSTMwDpH
  std::size_t daily_len = 210;   // days fed to LSTMwDpH
  std::size_t hidden_size = 30;
  std::vector<LayerGeom> conv;   // one entry per conv layer
  std::vector<LayerGeom> pool;   // one per conv layer for the pooled kinds, else empty
  std::vector<std::size_t> fc_widths;    // cnn: hidden FC widths; cnnplstm: CNN-branch FC widths
  std::vector<std::size_t> head_widths;  // cnnplstm: hidden widths after the concatenation
  bool align_padding = false;    // left-pad mismatched LSTM input rows with zeros instead of failing

  /// Reference layer tables. short_len becomes the serial conv stack's output
  /// length on long_len and daily_len = long_len / 24, which reproduces the
  /// 5040 h -> 210 h / 210 d configuration at the default long_len.
  static ModelSpec defaults(ModelKind kind, std::size_t n_vars, std::size_t nchf = 8, std::size_t long_len = 5040) {
    ModelSpec s;
    s.kind = kind;
    s.n_vars = n_vars;
    s.nchf = nchf;
    s.long_len = long_len;
    const std::vector<LayerGeom> serial{{6, 3, 3}, {4, 2, 2}, {4, 4, 0}};
    const std::vector<LayerGeom> pooled{{6, 3, 3}, {4, 2, 2}, {4, 4, 2}};
    s.short_len = stack_length(long_len, serial, {});
    s.daily_len = std::max<std::size_t>(1, long_len / 24);
    switch (kind) {
      case ModelKind::CnnOnly:
        s.conv = pooled;
        s.pool = {{4, 2, 2}, {4, 2, 2}, {4, 2, 2}};
        s.fc_widths = {256, 128};
        break;
      case ModelKind::CnnPLstm:
        s.conv = pooled;
        s.pool = {{4, 2, 2}, {4, 2, 2}, {4, 2, 2}};
        s.fc_widths = {128};
        s.head_widths = {64};
        break;
      case ModelKind::CnnSLstm:
        s.conv = serial;
        break;
      case ModelKind::LstmWHour:
      case ModelKind::LstmWDpH:
        break;
    }
    return s;
  }

  /// Length after each conv (and pool, when present) layer, in order.
  static std::vector<std::size_t> stack_lengths(std::size_t length, const std::vector<LayerGeom>& conv,
                                                const std::vector<LayerGeom>& pool) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < conv.size(); ++i) {
      length = sliding_out_length(length, conv[i].kernel, conv[i].stride, conv[i].padding);
      out.push_back(length);
      if (i < pool.size()) {
        PoolSpec ps{pool[i].kernel, pool[i].stride, pool[i].padding, PoolKind::Max};
        length = ps.out_length(length);
        out.push_back(length);
      }
    }
    return out;
  }

  static std::size_t stack_length(std::size_t length, const std::vector<LayerGeom>& conv,
                                  const std::vector<LayerGeom>& pool) {
    const auto lens = stack_lengths(length, conv, pool);
    return lens.empty() ? length : lens.back();
  }

  std::size_t conv_channels(std::size_t layer) const { return nchf << layer; }
  std::size_t last_conv_channels() const { return conv.empty() ? 0 : conv_channels(conv.size() - 1); }

  /// Lengths through the CNN part (empty for the pure LSTM kinds).
  std::vector<std::size_t> internal_lengths() const {
    if (!uses_conv(kind)) return {};
    return stack_lengths(long_len, conv, uses_pooling(kind) ? pool : std::vector<LayerGeom>{});
  }

  /// Sequence length and input width of the LSTM, where there is one.
  std::size_t lstm_steps() const {
    switch (kind) {
      case ModelKind::LstmWHour: return long_len;
      case ModelKind::LstmWDpH: return std::max(short_len, daily_len);
      case ModelKind::CnnPLstm: return short_len;
      case ModelKind::CnnSLstm: return std::max(short_len, internal_lengths().back());
      case ModelKind::CnnOnly: return 0;
    }
    return 0;
  }

  std::size_t lstm_input_size() const {
    switch (kind) {
      case ModelKind::LstmWHour: return n_vars;
      case ModelKind::LstmWDpH: return 2 * n_vars;
      case ModelKind::CnnPLstm: return n_vars;
      case ModelKind::CnnSLstm: return n_vars + last_conv_channels();
      case ModelKind::CnnOnly: return 0;
    }
    return 0;
  }

  /// Size of the flattened CNN output for the pooled kinds.
  std::size_t flattened_size() const {
    if (!uses_pooling(kind)) return 0;
    return internal_lengths().back() * last_conv_channels();
  }

  void validate() const {
    auto fail = [&](const std::string& what) { throw ConfigError(kind_id(kind) + " spec: " + what); };
    if (n_vars < 1) fail("n_vars must be >= 1");
    if (long_len < 1 || short_len < 1 || daily_len < 1) fail("window lengths must be >= 1");
    if (kind != ModelKind::CnnOnly && hidden_size < 1) fail("hidden_size must be >= 1");
    if (uses_conv(kind)) {
      if (nchf < 1) fail("nchf must be >= 1");
      if (conv.empty()) fail("no conv layers");
      if (uses_pooling(kind) && pool.size() != conv.size()) fail("pooled kinds need one pool layer per conv layer");
      if (!uses_pooling(kind) && !pool.empty()) fail("cnnslstm takes no pooling layers");
      std::vector<std::size_t> lens;
      try {
        lens = internal_lengths();
      } catch (const ConfigError& e) {
        fail(std::string("layer geometry does not fit long_len ") + std::to_string(long_len) + ": " + e.what());
      }
      if (kind == ModelKind::CnnSLstm && lens.back() != short_len && !align_padding) {
        fail("conv stack maps long_len " + std::to_string(long_len) + " to " + std::to_string(lens.back()) +
             " but short_len is " + std::to_string(short_len) + " (enable align_padding to zero-pad instead)");
      }
    }
    if (kind == ModelKind::LstmWDpH && short_len != daily_len && !align_padding) {
      fail("short_len " + std::to_string(short_len) + " differs from daily_len " + std::to_string(daily_len) +
           " (enable align_padding to zero-pad instead)");
    }
    if (kind == ModelKind::CnnOnly && fc_widths.empty()) fail("needs at least one hidden FC layer");
    if (kind == ModelKind::CnnPLstm && fc_widths.empty()) fail("needs a CNN-branch FC layer");
    for (auto w : fc_widths) {
      if (w < 1) fail("FC widths must be >= 1");
    }
    for (auto w : head_widths) {
      if (w < 1) fail("head widths must be >= 1");
    }
  }

  std::string to_text() const {
    auto geoms = [](const std::vector<LayerGeom>& g) {
      std::string s;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(g[i].kernel) + "/" + std::to_string(g[i].stride) + "/" + std::to_string(g[i].padding);
      }
      return s;
    };
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
      }
      return s;
    };
    std::ostringstream os;
    os << "kind=" << kind_id(kind) << "\n"
       << "nchf=" << nchf << "\n"
       << "n_vars=" << n_vars << "\n"
       << "long_len=" << long_len << "\n"
       << "short_len=" << short_len << "\n"
       << "daily_len=" << daily_len << "\n"
       << "hidden_size=" << hidden_size << "\n"
       << "conv=" << geoms(conv) << "\n"
       << "pool=" << geoms(pool) << "\n"
       << "fc=" << list(fc_widths) << "\n"
       << "head=" << list(head_widths) << "\n"
       << "align_padding=" << (align_padding ? 1 : 0) << "\n";
    return os.str();
  }

  static ModelSpec from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("model spec: malformed line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) -> const std::string& {
      auto it = kv.find(key);
      if (it == kv.end()) throw ParseError("model spec: missing key '" + key + "'");
      return it->second;
    };
    auto number = [&](const std::string& key) -> std::size_t {
      const std::string& v = need(key);
      try {
        std::size_t pos = 0;
        const auto n = std::stoull(v, &pos);
        if (pos != v.size()) throw ParseError("");
        return static_cast<std::size_t>(n);
      } catch (const std::exception&) {
        throw ParseError("model spec: key '" + key + "' is not an integer: '" + v + "'");
      }
    };
    auto split = [](const std::string& s, char sep) {
      std::vector<std::string> parts;
      if (s.empty()) return parts;
      std::string cur;
      for (char c : s) {
        if (c == sep) {
          parts.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      parts.push_back(cur);
      return parts;
    };
    auto to_size = [](const std::string& s) {
      try {
        return static_cast<std::size_t>(std::stoull(s));
      } catch (const std::exception&) {
        throw ParseError("model spec: bad integer '" + s + "'");
      }
    };
    auto geoms = [&](const std::string& key) {
      std::vector<LayerGeom> out;
      for (const auto& item : split(need(key), ',')) {
        const auto f = split(item, '/');
        if (f.size() != 3) throw ParseError("model spec: bad layer geometry '" + item + "'");
        out.push_back({to_size(f[0]), to_size(f[1]), to_size(f[2])});
      }
      return out;
    };
    auto list = [&](const std::string& key) {
      std::vector<std::size_t> out;
      for (const auto& item : split(need(key), ',')) out.push_back(to_size(item));
      return out;
    };
    ModelSpec s;
    s.kind = parse_kind(need("kind"));
    s.nchf = number("nchf");
    s.n_vars = number("n_vars");
    s.long_len = number("long_len");
    s.short_len = number("short_len");
    s.daily_len = number("daily_len");
    s.hidden_size = number("hidden_size");
    s.conv = geoms("conv");
    s.pool = geoms("pool");
    s.fc_widths = list("fc");
    s.head_widths = list("head");
    s.align_padding = number("align_padding") != 0;
    return s;
  }

  bool operator==(const ModelSpec&) const = default;
};

/// Windows ending at one target time. Unused windows are left empty
/// (0 channels).
struct AssembledInput {
  FeatureMap long_window;   // [N x long_len]
  FeatureMap short_window;  // [N x short_len]
  FeatureMap daily_window;  // [N x daily_len]
};

/// Abstract trainable model: scalar output per sample, gradients accumulated
/// into the parameters by backward().
class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }

  virtual double forward(const AssembledInput& input) = 0;
  /// Propagates dL/dy of the last forward call.
  virtual void backward(double output_grad) = 0;
  /// All learnable tensors in declaration order (fixed per spec).
  virtual std::vector<Param*> parameters() = 0;
  /// ReLU signs and max-pool argmax indices of the last forward pass.
  virtual void append_pattern(std::vector<std::uint32_t>& /*out*/) const {}

  std::vector<const Param*> parameters() const {
    auto params = const_cast<Model*>(this)->parameters();
    return {params.begin(), params.end()};
  }

  void zero_grad() {
    for (Param* p : parameters()) p->zero_grad();
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Param* p : parameters()) n += p->size();
    return n;
  }

 protected:
  void check_window(const FeatureMap& w, const char* name, std::size_t length) const {
    if (w.channels != spec_.n_vars || w.length != length) {
      throw ShapeError(std::string(name) + " window is " + w.shape_str() + ", expected " +
                       std::to_string(spec_.n_vars) + "x" + std::to_string(length));
    }
  }

  ModelSpec spec_;
};

namespace detail {

/// conv -> ReLU [-> max pool] repeated.
class ConvStack {
 public:
  ConvStack() = default;
  ConvStack(const ModelSpec& spec, bool pooled, Rng& rng) {
    std::size_t in_ch = spec.n_vars;
    for (std::size_t i = 0; i < spec.conv.size(); ++i) {
      const auto& g = spec.conv[i];
      ConvSpec cs{in_ch, spec.conv_channels(i), g.kernel, g.stride, g.padding};
      convs_.emplace_back("conv" + std::to_string(i + 1), cs, rng);
      relus_.emplace_back(Activation::Relu);
      if (pooled) {
        const auto& p = spec.pool.at(i);
        pools_.emplace_back(PoolSpec{p.kernel, p.stride, p.padding, PoolKind::Max});
      }
      in_ch = cs.out_channels;
    }
  }

  FeatureMap forward(const FeatureMap& input) {
    FeatureMap x = input;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      x = relus_[i].forward(convs_[i].forward(x));
      if (!pools_.empty()) x = pools_[i].forward(x);
    }
    return x;
  }

  FeatureMap backward(FeatureMap grad) {
    for (std::size_t i = convs_.size(); i-- > 0;) {
      if (!pools_.empty()) grad = pools_[i].backward(grad);
      grad = convs_[i].backward(relus_[i].backward(grad));
    }
    return grad;
  }

  void collect(std::vector<Param*>& out) {
    for (auto& c : convs_) {
      for (Param* p : c.parameters()) out.push_back(p);
    }
  }

  void append_pattern(std::vector<std::uint32_t>& out) const {
    for (std::size_t i = 0; i < relus_.size(); ++i) {
      relus_[i].append_pattern(out);
      if (!pools_.empty()) {
        for (auto a : pools_[i].argmax()) out.push_back(static_cast<std::uint32_t>(a));
      }
    }
  }

 private:
  std::vector<Conv1d> convs_;
  std::vector<ActivationLayer> relus_;
  std::vector<Pool1d> pools_;
};

/// Dense layers with ReLU between them; the last layer is linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& prefix, std::size_t in_dim, const std::vector<std::size_t>& widths, bool relu_last,
      Rng& rng, std::size_t first_index = 1) {
    std::size_t d = in_dim;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      layers_.emplace_back(prefix + std::to_string(first_index + i), d, widths[i], rng);
      const bool relu = (i + 1 < widths.size()) || relu_last;
      acts_.emplace_back(Activation::Relu);
      use_act_.push_back(relu);
      d = widths[i];
    }
  }

  std::vector<double> forward(std::span<const double> input) {
    std::vector<double> x(input.begin(), input.end());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i].forward(x);
      if (use_act_[i]) x = acts_[i].forward(x);
    }
    return x;
  }

  std::vector<double> backward(std::vector<double> grad) {
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (use_act_[i]) grad = acts_[i].backward(grad);
      grad = layers_[i].backward(grad);
    }
    return grad;
  }

  void collect(std::vector<Param*>& out) {
    for (auto& l : layers_) {
      for (Param* p : l.parameters()) out.push_back(p);
    }
  }

  void append_pattern(std::vector<std::uint32_t>& out) const {
    for (std::size_t i = 0; i < acts_.size(); ++i) {
      if (use_act_[i]) acts_[i].append_pattern(out);
    }
  }

  std::vector<Dense>& layers() { return layers_; }

 private:
  std::vector<Dense> layers_;
  std::vector<ActivationLayer> acts_;
  std::vector<bool> use_act_;
};

/// Stacks `top` over `bottom` row-wise, left-padding the shorter one with
/// zeros so both end at the same (latest) step.
inline FeatureMap stack_rows(const FeatureMap& top, const FeatureMap& bottom) {
  const std::size_t len = std::max(top.length, bottom.length);
  FeatureMap out(top.channels + bottom.channels, len);
  const std::size_t top_off = len - top.length;
  const std::size_t bot_off = len - bottom.length;
  for (std::size_t c = 0; c < top.channels; ++c) {
    std::copy(top.row(c).begin(), top.row(c).end(), out.row(c).begin() + static_cast<std::ptrdiff_t>(top_off));
  }
  for (std::size_t c = 0; c < bottom.channels; ++c) {
    std::copy(bottom.row(c).begin(), bottom.row(c).end(),
              out.row(top.channels + c).begin() + static_cast<std::ptrdiff_t>(bot_off));
  }
  return out;
}

/// Inverse of stack_rows for gradients: returns the bottom block.
inline FeatureMap bottom_rows(const FeatureMap& stacked, std::size_t top_channels, std::size_t channels,
                              std::size_t length) {
  FeatureMap out(channels, length);
  const std::size_t off = stacked.length - length;
  for (std::size_t c = 0; c < channels; ++c) {
    auto src = stacked.row(top_channels + c);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(off), src.end(), out.row(c).begin());
  }
  return out;
}

}  // namespace detail

class CnnModel final : public Model {
 public:
  CnnModel(const ModelSpec& spec, Rng& rng) : Model(spec), stack_(spec, true, rng) {
    std::vector<std::size_t> widths = spec.fc_widths;
    widths.push_back(1);
    mlp_ = detail::Mlp("fc", spec.flattened_size(), widths, false, rng);
  }

  double forward(const AssembledInput& input) override {
    check_window(input.long_window, "long", spec_.long_len);
    fmap_ = stack_.forward(input.long_window);
    return mlp_.forward(fmap_.data)[0];
  }

  void backward(double output_grad) override {
    auto g = mlp_.backward({output_grad});
    FeatureMap gm(fmap_.channels, fmap_.length);
    gm.data = std::move(g);
    stack_.backward(std::move(gm));
  }

  std::vector<Param*> parameters() override {
    std::vector<Param*> out;
    stack_.collect(out);
    mlp_.collect(out);
    return out;
  }

  void append_pattern(std::vector<std::uint32_t>& out) const override {
    stack_.append_pattern(out);
    mlp_.append_pattern(out);
  }

 private:
  detail::ConvStack stack_;
  detail::Mlp mlp_;
  FeatureMap fmap_;
};

/// LSTM followed by the affine head; shared by the two pure-LSTM kinds.
class LstmModel final : public Model {
 public:
  LstmModel(const ModelSpec& spec, Rng& rng)
      : Model(spec),
        lstm_(spec.lstm_input_size(), spec.hidden_size, rng),
        head_("head", spec.hidden_size, 1, rng) {}

  double forward(const AssembledInput& input) override {
    if (spec_.kind == ModelKind::LstmWHour) {
      check_window(input.long_window, "long", spec_.long_len);
      h_ = lstm_.forward(input.long_window);
    } else {
      check_window(input.short_window, "short", spec_.short_len);
      check_window(input.daily_window, "daily", spec_.daily_len);
      h_ = lstm_.forward(detail::stack_rows(input.short_window, input.daily_window));
    }
    return head_.forward(h_)[0];
  }

  void backward(double output_grad) override {
    auto dh = head_.backward(std::vector<double>{output_grad});
    lstm_.backward(dh);
  }

  std::vector<Param*> parameters() override {
    auto out = lstm_.parameters();
    for (Param* p : head_.parameters()) out.push_back(p);
    return out;
  }

  Lstm& lstm() { return lstm_; }
  Dense& head() { return head_; }

 private:
  Lstm lstm_;
  Dense head_;
  std::vector<double> h_;
};

class CnnSLstmModel final : public Model {
 public:
  CnnSLstmModel(const ModelSpec& spec, Rng& rng)
      : Model(spec),
        stack_(spec, false, rng),
        lstm_(spec.lstm_input_size(), spec.hidden_size, rng),
        head_("head", spec.hidden_size, 1, rng) {}

  double forward(const AssembledInput& input) override {
    check_window(input.long_window, "long", spec_.long_len);
    check_window(input.short_window, "short", spec_.short_len);
    fmap_ = stack_.forward(input.long_window);
    const FeatureMap combined = detail::stack_rows(input.short_window, fmap_);
    const auto h = lstm_.forward(combined);
    return head_.forward(h)[0];
  }

  void backward(double output_grad) override {
    const auto dh = head_.backward(std::vector<double>{output_grad});
    const FeatureMap dx = lstm_.backward(dh);
    stack_.backward(detail::bottom_rows(dx, spec_.n_vars, fmap_.channels, fmap_.length));
  }

  std::vector<Param*> parameters() override {
    std::vector<Param*> out;
    stack_.collect(out);
    for (Param* p : lstm_.parameters()) out.push_back(p);
    for (Param* p : head_.parameters()) out.push_back(p);
    return out;
  }

  void append_pattern(std::vector<std::uint32_t>& out) const override { stack_.append_pattern(out); }

  /// Feature map of the last forward pass ([P x I]).
  const FeatureMap& feature_map() const { return fmap_; }
  Lstm& lstm() { return lstm_; }

 private:
  detail::ConvStack stack_;
  Lstm lstm_;
  Dense head_;
  FeatureMap fmap_;
};

class CnnPLstmModel final : public Model {
 public:
  CnnPLstmModel(const ModelSpec& spec, Rng& rng)
      : Model(spec),
        stack_(spec, true, rng),
        cnn_fc_("cnn_fc", spec.flattened_size(), spec.fc_widths, true, rng),
        lstm_(spec.lstm_input_size(), spec.hidden_size, rng) {
    std::vector<std::size_t> widths = spec.head_widths;
    widths.push_back(1);
    head_ = detail::Mlp("head", spec.fc_widths.back() + spec.hidden_size, widths, false, rng);
  }

  double forward(const AssembledInput& input) override {
    check_window(input.long_window, "long", spec_.long_len);
    check_window(input.short_window, "short", spec_.short_len);
    fmap_ = stack_.forward(input.long_window);
    std::vector<double> joined = cnn_fc_.forward(fmap_.data);
    cnn_width_ = joined.size();
    const auto h = lstm_.forward(input.short_window);
    joined.insert(joined.end(), h.begin(), h.end());
    return head_.forward(joined)[0];
  }

  void backward(double output_grad) override {
    const auto g = head_.backward({output_grad});
    std::vector<double> g_cnn(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(cnn_width_));
    std::vector<double> g_lstm(g.begin() + static_cast<std::ptrdiff_t>(cnn_width_), g.end());
    lstm_.backward(g_lstm);
    FeatureMap gm(fmap_.channels, fmap_.length);
    gm.data = cnn_fc_.backward(std::move(g_cnn));
    stack_.backward(std::move(gm));
  }

  std::vector<Param*> parameters() override {
    std::vector<Param*> out;
    stack_.collect(out);
    cnn_fc_.collect(out);
    for (Param* p : lstm_.parameters()) out.push_back(p);
    head_.collect(out);
    return out;
  }

  void append_pattern(std::vector<std::uint32_t>& out) const override {
    stack_.append_pattern(out);
    cnn_fc_.append_pattern(out);
    head_.append_pattern(out);
  }

 private:
  detail::ConvStack stack_;
  detail::Mlp cnn_fc_;
  Lstm lstm_;
  detail::Mlp head_;
  FeatureMap fmap_;
  std::size_t cnn_width_ = 0;
};

/// Validates the spec and instantiates the model with parameters drawn from rng.
inline std::unique_ptr<Model> build_model(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  switch (spec.kind) {
    case ModelKind::CnnOnly: return std::make_unique<CnnModel>(spec, rng);
    case ModelKind::LstmWHour:
    case ModelKind::LstmWDpH: return std::make_unique<LstmModel>(spec, rng);
    case ModelKind::CnnPLstm: return std::make_unique<CnnPLstmModel>(spec, rng);
    case ModelKind::CnnSLstm: return std::make_unique<CnnSLstmModel>(spec, rng);
  }
  throw ConfigError("unknown model kind");
}

/// Copies parameter values between two models built from the same spec.
inline void copy_parameters(Model& from, Model& to) {
  auto src = from.parameters();
  auto dst = to.parameters();
  if (src.size() != dst.size()) throw ShapeError("copy_parameters: tensor count differs");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->shape != dst[i]->shape) throw ShapeError("copy_parameters: shape differs at " + src[i]->name);
    dst[i]->values = src[i]->values;
  }
}

}  // namespace rrnet
