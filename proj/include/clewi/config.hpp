#pragma once

// Experiment configuration: a flat text file of `key = value` lines with
// dotted section names. `#` starts a comment. Lists are comma separated.
// Every key must be known; the file must declare `version = 1`.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "clewi/errors.hpp"
#include "clewi/models.hpp"
#include "clewi/trainers.hpp"
#include "clewi/weight_matching.hpp"

namespace clewi {

inline constexpr int kConfigVersion = 1;

struct DatasetConfig {
  /// "split-synth-10" (Gaussian blobs) or "split-idx" (IDX image files).
  std::string id = "split-synth-10";
  std::uint64_t seed = 0;
  std::size_t test_ratio = 5;
  std::size_t synth_classes = 10;
  std::size_t synth_dim = 32;
  std::size_t synth_n_per_class = 300;
  double synth_separation = 4.5;
  double synth_noise = 1.0;
  std::string idx_train_images, idx_train_labels, idx_test_images, idx_test_labels;
  double idx_mean = 0.0;
  double idx_std = 1.0;
  std::size_t idx_classes = 0;
};

struct ClewiConfig {
  bool enabled = false;
  double alpha = 0.3;
  std::size_t batch_size = kMatchBatchSize;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::string run_id = "run";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out_dir = "out";
  bool checkpoints = true;
  DatasetConfig dataset;
  std::size_t num_tasks = 5;
  ArchId arch = ArchId::SmallMlp;
  std::size_t width = 1;
  std::size_t base_width = 0;
  TrainConfig train;
  std::size_t buffer_capacity = 200;
  ClewiConfig clewi;
  std::vector<double> sweep_alphas{0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<std::size_t> sweep_widths{1, 2, 4};
  /// interp-plot grid: `interp_steps + 1` evenly spaced values in [0, 1].
  std::size_t interp_steps = 20;

  void validate() const;
};

/// Default interpolation coefficient per rehearsal method.
inline double default_alpha(Method m) {
  switch (m) {
    case Method::Agem: return 0.5;
    case Method::Derpp: return 0.2;
    default: return 0.3;
  }
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end)
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + v + "'");
}

}  // namespace detail

/// Applies one key. `alpha_set` records an explicit clewi.alpha.
inline void apply_config_key(ExperimentConfig& c, const std::string& key, const std::string& v,
                             bool* alpha_set = nullptr) {
  using detail::parse_bool;
  using detail::parse_number;
  auto size = [&] { return parse_number<std::size_t>(key, v); };
  auto real = [&] { return parse_number<double>(key, v); };

  if (key == "version") c.version = parse_number<int>(key, v);
  else if (key == "run.id") c.run_id = v;
  else if (key == "run.seeds") {
    c.seeds.clear();
    for (const auto& s : detail::split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>(key, s));
  } else if (key == "run.out") c.out_dir = v;
  else if (key == "run.checkpoints") c.checkpoints = parse_bool(key, v);
  else if (key == "dataset.id") c.dataset.id = v;
  else if (key == "dataset.seed") c.dataset.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "dataset.test_ratio") c.dataset.test_ratio = size();
  else if (key == "dataset.synth.classes") c.dataset.synth_classes = size();
  else if (key == "dataset.synth.dim") c.dataset.synth_dim = size();
  else if (key == "dataset.synth.n_per_class") c.dataset.synth_n_per_class = size();
  else if (key == "dataset.synth.separation") c.dataset.synth_separation = real();
  else if (key == "dataset.synth.noise") c.dataset.synth_noise = real();
  else if (key == "dataset.idx.train_images") c.dataset.idx_train_images = v;
  else if (key == "dataset.idx.train_labels") c.dataset.idx_train_labels = v;
  else if (key == "dataset.idx.test_images") c.dataset.idx_test_images = v;
  else if (key == "dataset.idx.test_labels") c.dataset.idx_test_labels = v;
  else if (key == "dataset.idx.mean") c.dataset.idx_mean = real();
  else if (key == "dataset.idx.std") c.dataset.idx_std = real();
  else if (key == "dataset.idx.classes") c.dataset.idx_classes = size();
  else if (key == "stream.num_tasks") c.num_tasks = size();
  else if (key == "model.arch") c.arch = parse_arch_id(v);
  else if (key == "model.width") c.width = size();
  else if (key == "model.base_width") c.base_width = size();
  else if (key == "train.method") c.train.method = parse_method(v);
  else if (key == "train.lr") c.train.lr = real();
  else if (key == "train.epochs") c.train.epochs = size();
  else if (key == "train.batch_size") c.train.batch_size = size();
  else if (key == "train.replay_batch_size") c.train.replay_batch_size = size();
  else if (key == "train.momentum") c.train.momentum = real();
  else if (key == "train.derpp.mse_weight") c.train.derpp_mse_weight = real();
  else if (key == "train.derpp.ce_weight") c.train.derpp_ce_weight = real();
  else if (key == "train.rehearsal") c.train.rehearsal = parse_bool(key, v);
  else if (key == "buffer.capacity") c.buffer_capacity = size();
  else if (key == "clewi.enabled") c.clewi.enabled = parse_bool(key, v);
  else if (key == "clewi.alpha") {
    c.clewi.alpha = real();
    if (alpha_set) *alpha_set = true;
  } else if (key == "clewi.batch_size") c.clewi.batch_size = size();
  else if (key == "sweep.alphas") {
    c.sweep_alphas.clear();
    for (const auto& s : detail::split_list(v)) c.sweep_alphas.push_back(parse_number<double>(key, s));
  } else if (key == "sweep.widths") {
    c.sweep_widths.clear();
    for (const auto& s : detail::split_list(v)) c.sweep_widths.push_back(parse_number<std::size_t>(key, s));
  } else if (key == "interp.steps") c.interp_steps = size();
  else throw ConfigError("config: unknown key '" + key + "'");
}

/// Parses config text. `overrides` are extra `key=value` pairs applied after
/// the file. A missing clewi.alpha takes the method default.
inline ExperimentConfig parse_config(std::string_view text,
                                     const std::vector<std::string>& overrides = {}) {
  ExperimentConfig c;
  bool alpha_set = false, version_seen = false;
  std::set<std::string> seen;
  std::stringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  auto apply = [&](const std::string& raw, const std::string& where, bool from_file) {
    const auto eq = raw.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = detail::trim(std::string_view(raw).substr(0, eq));
    const auto value = detail::trim(std::string_view(raw).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (from_file && !seen.insert(key).second)
      throw ConfigError(where + ": duplicate key '" + key + "'");
    if (key == "version") version_seen = true;
    try {
      apply_config_key(c, key, value, &alpha_set);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const auto body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    apply(body, "line " + std::to_string(lineno), true);
  }
  for (const auto& o : overrides) apply(o, "override '" + o + "'", false);
  if (!version_seen) throw ConfigError("config: missing 'version = 1'");
  if (!alpha_set) c.clewi.alpha = default_alpha(c.train.method);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path,
                                    const std::vector<std::string>& overrides = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), overrides);
}

inline void ExperimentConfig::validate() const {
  if (version != kConfigVersion)
    throw ConfigError("config: unsupported version " + std::to_string(version));
  if (seeds.empty()) throw ConfigError("config: run.seeds is empty");
  if (run_id.empty() || run_id.find_first_of(",\"\n") != std::string::npos)
    throw ConfigError("config: run.id must be non-empty without commas or quotes");
  if (dataset.id != "split-synth-10" && dataset.id != "split-idx")
    throw ConfigError("config: unknown dataset.id '" + dataset.id + "'");
  if (dataset.id == "split-idx" &&
      (dataset.idx_train_images.empty() || dataset.idx_train_labels.empty() ||
       dataset.idx_test_images.empty() || dataset.idx_test_labels.empty()))
    throw ConfigError("config: split-idx needs all four dataset.idx.* paths");
  if (!(dataset.idx_std > 0.0)) throw ConfigError("config: dataset.idx.std must be > 0");
  if (dataset.test_ratio == 0) throw ConfigError("config: dataset.test_ratio must be >= 1");
  if (num_tasks == 0) throw ConfigError("config: stream.num_tasks must be >= 1");
  if (width == 0) throw ConfigError("config: model.width must be >= 1");
  train.validate();
  if (!(clewi.alpha >= 0.0 && clewi.alpha <= 1.0))
    throw ConfigError("config: clewi.alpha must be in [0, 1]");
  for (double a : sweep_alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("config: sweep.alphas must be in [0, 1]");
  for (auto w : sweep_widths)
    if (w == 0) throw ConfigError("config: sweep.widths must be >= 1");
  if (clewi.batch_size == 0) throw ConfigError("config: clewi.batch_size must be >= 1");
  if (interp_steps == 0) throw ConfigError("config: interp.steps must be >= 1");
}

}  // namespace clewi
