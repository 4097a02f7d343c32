// SPDX-License-Identifier: Apache-2.0
//
// Mini-batch Adam training with patience-based early stopping, multi-trial
// execution and the versioned binary checkpoint format.
//
// Checkpoint layout (all integers and reals little-endian):
//
//   8 bytes   magic "RRNETCKP"
//   u32       format version
//   u64       header length in bytes, followed by the header text
//   u64       number of reals in the payload, followed by the payload (f64)
//   u64       FNV-1a checksum of every preceding byte
//
// The header is key=value text: the ModelSpec (prefixed "spec."), hourly and
// daily normalisation stats, best_val_loss, epoch_of_best, seed and one
// "tensor.<i>=<name> <shape>" line per parameter tensor in payload order.
// Reals in the header use hexadecimal float notation so they round-trip.

#pragma once

#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "rrnet/architectures.hpp"
#include "rrnet/data.hpp"
#include "rrnet/errors.hpp"
#include "rrnet/numerics.hpp"

namespace rrnet {

struct TrainConfig {
  std::size_t batch_size = 512;
  std::size_t patience = 30;
  std::size_t max_epochs = 500;
  std::size_t n_trials = 5;
  std::size_t parallel_trials = 1;
  AdamConfig adam;
  std::uint64_t base_seed = 0;
  double improvement_tol = 1e-12;  // relative margin a new validation minimum must clear
  double stop_loss = 0.0;          // stop once validation loss reaches this value; 0 disables

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (n_trials < 1) throw ConfigError("n_trials must be >= 1");
    if (parallel_trials < 1) throw ConfigError("parallel_trials must be >= 1");
    if (!(stop_loss >= 0.0)) throw ConfigError("stop_loss must be >= 0");
    adam.validate();
  }
};

struct TensorRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;

  bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t format_version = kFormatVersion;
  ModelSpec spec;
  NormStats hourly_stats;
  NormStats daily_stats;
  std::vector<TensorRecord> tensors;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t epoch_of_best = 0;
  std::uint64_t seed = 0;
};

/// Snapshot of a model's current parameter values.
inline std::vector<TensorRecord> snapshot(Model& model) {
  std::vector<TensorRecord> out;
  for (Param* p : model.parameters()) out.push_back({p->name, p->shape, p->values});
  return out;
}

/// Writes checkpoint tensors into a model built from a compatible spec.
inline void load_into(Model& model, const Checkpoint& ckpt) {
  auto params = model.parameters();
  const std::size_t n = std::min(params.size(), ckpt.tensors.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = ckpt.tensors[i];
    if (t.name != params[i]->name || t.shape != params[i]->shape) {
      throw ShapeError("checkpoint tensor #" + std::to_string(i) + " '" + t.name + "' " + shape_string(t.shape) +
                       " does not match model tensor '" + params[i]->name + "' " + shape_string(params[i]->shape));
    }
  }
  if (params.size() != ckpt.tensors.size()) {
    const std::size_t i = n;
    const std::string model_side = i < params.size() ? params[i]->name + " " + shape_string(params[i]->shape) : "(none)";
    const std::string ckpt_side =
        i < ckpt.tensors.size() ? ckpt.tensors[i].name + " " + shape_string(ckpt.tensors[i].shape) : "(none)";
    throw ShapeError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model has " +
                     std::to_string(params.size()) + "; first mismatch at #" + std::to_string(i) + ": checkpoint " +
                     ckpt_side + " vs model " + model_side);
  }
  for (std::size_t i = 0; i < n; ++i) params[i]->values = ckpt.tensors[i].values;
}

/// Builds a model from the checkpoint's spec and loads its parameters.
inline std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt) {
  Rng rng(ckpt.seed);
  auto model = build_model(ckpt.spec, rng);
  load_into(*model, ckpt);
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace detail {

inline std::string hex_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", x);
  return buf;
}

inline double parse_hex_real(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw FormatError("checkpoint header: bad real '" + s + "'");
  return v;
}

inline std::string join_reals(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += hex_real(v[i]);
  }
  return out;
}

inline std::vector<double> split_reals(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  std::size_t pos = 0;
  while (true) {
    const auto comma = s.find(',', pos);
    out.push_back(parse_hex_real(s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CorruptionError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 8;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline constexpr char kMagic[8] = {'R', 'R', 'N', 'E', 'T', 'C', 'K', 'P'};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream header;
  {
    std::istringstream spec_lines(ckpt.spec.to_text());
    std::string line;
    while (std::getline(spec_lines, line)) header << "spec." << line << "\n";
  }
  header << "stats.hourly.mean=" << detail::join_reals(ckpt.hourly_stats.mean) << "\n"
         << "stats.hourly.std=" << detail::join_reals(ckpt.hourly_stats.std) << "\n"
         << "stats.daily.mean=" << detail::join_reals(ckpt.daily_stats.mean) << "\n"
         << "stats.daily.std=" << detail::join_reals(ckpt.daily_stats.std) << "\n"
         << "best_val_loss=" << detail::hex_real(ckpt.best_val_loss) << "\n"
         << "epoch_of_best=" << ckpt.epoch_of_best << "\n"
         << "seed=" << ckpt.seed << "\n"
         << "tensors=" << ckpt.tensors.size() << "\n";
  std::size_t total = 0;
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    if (t.values.size() != shape_size(t.shape)) throw ShapeError("tensor '" + t.name + "' size does not match its shape");
    header << "tensor." << i << "=" << t.name << " " << shape_string(t.shape) << "\n";
    total += t.values.size();
  }
  const std::string text = header.str();
  std::string out(detail::kMagic, detail::kMagic + 8);
  detail::put_u32(out, ckpt.format_version);
  detail::put_u64(out, text.size());
  out += text;
  detail::put_u64(out, total);
  out.reserve(out.size() + total * 8);
  for (const auto& t : ckpt.tensors) {
    for (double x : t.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
  detail::put_u64(out, detail::fnv1a(out));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader rd(bytes);
  const std::string magic = rd.take(8, "magic");
  if (magic != std::string(detail::kMagic, 8)) throw FormatError("not a checkpoint file (bad magic)");
  Checkpoint ckpt;
  ckpt.format_version = rd.u32("format version");
  if (ckpt.format_version != Checkpoint::kFormatVersion) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(ckpt.format_version) + " (expected " +
                      std::to_string(Checkpoint::kFormatVersion) + ")");
  }
  const std::uint64_t header_len = rd.u64("header length");
  const std::string header = rd.take(header_len, "header");

  std::map<std::string, std::string> kv;
  std::string spec_text;
  std::istringstream lines(header);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptionError("checkpoint header: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    if (key.rfind("spec.", 0) == 0) {
      spec_text += key.substr(5) + "=" + line.substr(eq + 1) + "\n";
    } else {
      kv[key] = line.substr(eq + 1);
    }
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw CorruptionError("checkpoint header: missing '" + key + "'");
    return it->second;
  };
  auto to_size = [](const std::string& s) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw CorruptionError("checkpoint header: bad integer '" + s + "'");
    return v;
  };
  try {
    ckpt.spec = ModelSpec::from_text(spec_text);
  } catch (const ParseError& e) {
    throw CorruptionError(std::string("checkpoint header: ") + e.what());
  }
  ckpt.hourly_stats = {detail::split_reals(need("stats.hourly.mean")), detail::split_reals(need("stats.hourly.std"))};
  ckpt.daily_stats = {detail::split_reals(need("stats.daily.mean")), detail::split_reals(need("stats.daily.std"))};
  ckpt.best_val_loss = detail::parse_hex_real(need("best_val_loss"));
  ckpt.epoch_of_best = to_size(need("epoch_of_best"));
  ckpt.seed = std::stoull(need("seed"));
  const std::size_t n_tensors = to_size(need("tensors"));
  std::size_t expected = 0;
  for (std::size_t i = 0; i < n_tensors; ++i) {
    const std::string& entry = need("tensor." + std::to_string(i));
    const auto sp = entry.rfind(' ');
    if (sp == std::string::npos) throw CorruptionError("checkpoint header: bad tensor entry '" + entry + "'");
    TensorRecord t;
    t.name = entry.substr(0, sp);
    const std::string shape = entry.substr(sp + 1);
    if (shape != "scalar") {
      std::size_t pos = 0;
      while (true) {
        const auto x = shape.find('x', pos);
        t.shape.push_back(to_size(shape.substr(pos, x == std::string::npos ? std::string::npos : x - pos)));
        if (x == std::string::npos) break;
        pos = x + 1;
      }
    }
    expected += shape_size(t.shape);
    ckpt.tensors.push_back(std::move(t));
  }
  const std::uint64_t count = rd.u64("payload length");
  if (count != expected) {
    throw CorruptionError("checkpoint payload declares " + std::to_string(count) + " reals, manifest needs " +
                          std::to_string(expected));
  }
  if (rd.remaining() != count * 8 + 8) {
    throw CorruptionError("checkpoint payload and checksum have " + std::to_string(rd.remaining()) +
                          " bytes, expected " + std::to_string(count * 8 + 8));
  }
  for (auto& t : ckpt.tensors) {
    t.values.resize(shape_size(t.shape));
    for (double& x : t.values) x = std::bit_cast<double>(rd.u64("payload"));
  }
  if (rd.u64("checksum") != detail::fnv1a(std::string_view(bytes).substr(0, bytes.size() - 8))) {
    throw CorruptionError("checkpoint checksum mismatch");
  }
  return ckpt;
}

/// Writes to a temporary file and renames it into place.
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("write failed for checkpoint '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrialOutcome {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  std::size_t epochs_run = 0;
  std::size_t updates = 0;
};

/// Mean squared error over every sample, forward passes only.
inline double evaluate_loss(Model& model, const SampleSource& samples) {
  if (samples.size() == 0) throw EmptyInputError("loss over an empty sample set");
  AssembledInput in;
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples.assemble(i, in);
    const double d = model.forward(in) - samples.target(i);
    sum += d * d;
  }
  return sum / static_cast<double>(samples.size());
}

/// Shuffled index order split into batches of `batch_size`; the last batch
/// may be short.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < n; b += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  }
  return batches;
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains until `patience` epochs pass without a new validation minimum (or
/// max_epochs), then restores the parameters of the best epoch. The returned
/// checkpoint holds those parameters; spec and seed are filled in, stats are
/// left for the caller.
inline TrialOutcome train_one_trial(Model& model, const SampleSource& train, const SampleSource& val,
                                    const TrainConfig& cfg, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.size() == 0) throw EmptyInputError("no training samples");
  if (val.size() == 0) throw EmptyInputError("no validation samples");
  Rng batch_rng = Rng(seed).derive(0x5A3D);
  const auto params = model.parameters();
  TrialOutcome out;
  out.checkpoint.spec = model.spec();
  out.checkpoint.seed = seed;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_values;
  std::size_t since_best = 0;
  AssembledInput in;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto batches = make_batches(train.size(), cfg.batch_size, batch_rng);
    double sq_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      model.zero_grad();
      const double scale = 2.0 / static_cast<double>(batch.size());
      for (std::size_t idx : batch) {
        train.assemble(idx, in);
        const double d = model.forward(in) - train.target(idx);
        if (!std::isfinite(d)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
        }
        sq_sum += d * d;
        model.backward(scale * d);
      }
      try {
        adam_step(params, cfg.adam);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) + ": " + e.what());
      }
      ++out.updates;
    }
    EpochLog entry{epoch, sq_sum / static_cast<double>(train.size()), evaluate_loss(model, val)};
    if (!std::isfinite(entry.val_loss)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    out.log.push_back(entry);
    out.epochs_run = epoch;
    if (on_epoch) on_epoch(entry);

    const bool improved = !std::isfinite(best) || entry.val_loss < best - cfg.improvement_tol * std::abs(best);
    if (improved) {
      best = entry.val_loss;
      out.checkpoint.best_val_loss = best;
      out.checkpoint.epoch_of_best = epoch;
      best_values.clear();
      for (const Param* p : params) best_values.push_back(p->values);
      since_best = 0;
      if (cfg.stop_loss > 0.0 && entry.val_loss <= cfg.stop_loss) break;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->values = best_values[i];
  out.checkpoint.tensors = snapshot(model);
  return out;
}

struct TrialRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::optional<TrialOutcome> outcome;
  std::string error;  // set when the trial aborted
};

struct TrialsResult {
  std::vector<TrialRecord> trials;
  std::size_t best = 0;  // index of the surviving trial with the lowest validation loss

  const Checkpoint& best_checkpoint() const { return trials.at(best).outcome->checkpoint; }
};

using TrialLogSink = std::function<void(std::size_t trial, const EpochLog&)>;

inline std::uint64_t trial_seed(std::uint64_t base_seed, std::size_t trial) { return base_seed ^ trial; }

/// Argmin of validation loss over surviving trials; ties go to the lower index.
inline std::size_t select_best_trial(const std::vector<TrialRecord>& trials) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (!trials[i].outcome) continue;
    if (!best || trials[i].outcome->checkpoint.best_val_loss < trials[*best].outcome->checkpoint.best_val_loss) best = i;
  }
  if (!best) throw NumericError("every training trial aborted");
  return *best;
}

/// Runs cfg.n_trials independent trials (trial k seeded with base_seed ^ k),
/// at most cfg.parallel_trials at a time. Aborted trials are kept with their
/// error; at least one must survive.
inline TrialsResult run_trials(const ModelSpec& spec, const PreparedData& data, const SampleSource& train,
                               const SampleSource& val, const TrainConfig& cfg, const TrialLogSink& sink = {}) {
  cfg.validate();
  spec.validate();
  TrialsResult result;
  result.trials.resize(cfg.n_trials);
  std::mutex sink_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t k = next++; k < cfg.n_trials; k = next++) {
      TrialRecord& rec = result.trials[k];
      rec.index = k;
      rec.seed = trial_seed(cfg.base_seed, k);
      try {
        Rng init(rec.seed);
        auto model = build_model(spec, init);
        EpochCallback cb;
        if (sink) {
          cb = [&, k](const EpochLog& e) {
            std::lock_guard lock(sink_mutex);
            sink(k, e);
          };
        }
        TrialOutcome outcome = train_one_trial(*model, train, val, cfg, rec.seed, cb);
        outcome.checkpoint.hourly_stats = data.hourly_stats;
        outcome.checkpoint.daily_stats = data.daily_stats;
        rec.outcome = std::move(outcome);
      } catch (const Error& e) {
        rec.error = e.what();
      }
    }
  };
  const std::size_t threads = std::min(cfg.parallel_trials, cfg.n_trials);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  result.best = select_best_trial(result.trials);
  return result;
}

}  // namespace rrnet
