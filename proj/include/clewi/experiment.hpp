#pragma once

// Config-driven experiment runner: task-stream training with optional
// weight interpolation after every task, plus sweeps, interpolation plots
// and memory accounting. Writers emit results.csv, timing.csv and
// summary.json with deterministic number formatting.

#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "clewi/checkpoint.hpp"
#include "clewi/config.hpp"
#include "clewi/data.hpp"
#include "clewi/metrics.hpp"
#include "clewi/models.hpp"
#include "clewi/replay_buffer.hpp"
#include "clewi/trainers.hpp"
#include "clewi/weight_matching.hpp"

namespace clewi {

/// splitmix64 finaliser over seed ^ salt-derived offset.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct ResultsRow {
  std::string run_id;
  std::uint64_t seed = 0;
  std::size_t after_task = 0;
  std::string metric;
  double value = 0.0;
};

struct TimingRow {
  std::string run_id;
  std::uint64_t seed = 0;
  std::size_t after_task = 0;
  std::string phase;
  double seconds = 0.0;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  ///< population (ddof = 0)
  std::vector<double> values;
};

inline MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  for (double v : s.values) s.mean += v;
  s.mean /= double(s.values.size());
  double ss = 0.0;
  for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / double(s.values.size()));
  return s;
}

/// Final-task metrics summarised over seeds.
inline constexpr const char* kSummaryMetrics[] = {"acc", "acc_last", "fm"};

struct RunResult {
  std::string run_id;
  std::vector<ResultsRow> rows;
  std::vector<TimingRow> timing;
  std::vector<AccuracyMatrix> matrices;  ///< one per seed
  std::map<std::string, MetricSummary> summary;
};

/// State visible right before the interpolation step of task `task` (>= 1).
struct PreInterpolation {
  std::uint64_t seed;
  std::size_t task;
  const ModelArch& arch;
  const ParamSet& theta;
  const ParamSet& theta_p;
  const MemoryBuffer& buffer;
  std::vector<const Dataset*> seen_tests;
};

struct RunHooks {
  TraceHook trace;
  std::function<void(std::size_t task, const InterpolationResult&)> on_interpolation;
  std::function<void(const PreInterpolation&)> before_interpolation;
  /// Called with the rows of a seed as soon as that seed finishes or aborts.
  std::function<void(const RunResult&)> on_flush;
};

// ---------------------------------------------------------------------------
// Data

/// Train and test pools for the configured dataset. `flatten` turns image
/// samples into vectors for the MLP.
inline LabeledSplit load_dataset(const DatasetConfig& d, bool flatten) {
  LabeledSplit s;
  if (d.id == "split-synth-10") {
    BlobOptions o;
    o.num_classes = d.synth_classes;
    o.dim = d.synth_dim;
    o.n_per_class = d.synth_n_per_class;
    o.separation = d.synth_separation;
    o.noise = d.synth_noise;
    o.seed = d.seed;
    s = split_train_test(synth_blobs(o), d.test_ratio);
  } else if (d.id == "split-idx") {
    for (const auto* p : {&d.idx_train_images, &d.idx_train_labels, &d.idx_test_images,
                          &d.idx_test_labels})
      if (!std::filesystem::exists(*p)) throw DataError("dataset file not found: " + *p);
    const Normalization norm{float(d.idx_mean), float(d.idx_std)};
    s.train = load_idx(d.idx_train_images, d.idx_train_labels, norm, d.idx_classes);
    s.test = load_idx(d.idx_test_images, d.idx_test_labels, norm, d.idx_classes);
    const std::size_t K = std::max(s.train.num_classes, s.test.num_classes);
    s.train.num_classes = s.test.num_classes = K;
    if (s.train.sample_shape != s.test.sample_shape)
      throw DataError("train and test images have different shapes");
  } else {
    throw ConfigError("unknown dataset.id '" + d.id + "'");
  }
  if (flatten && s.train.sample_shape.size() > 1) {
    const Shape flat{s.train.sample_size()};
    s.train.sample_shape = s.test.sample_shape = flat;
  }
  return s;
}

inline ModelArch arch_for(const ExperimentConfig& c, const LabeledSplit& data) {
  ModelArch a;
  a.id = c.arch;
  a.width = c.width;
  a.base_width = c.base_width;
  a.num_classes = data.train.num_classes;
  a.input_shape = data.train.sample_shape;
  if (a.id != ArchId::SmallMlp && a.input_shape.size() != 3)
    throw ConfigError("convolutional models need image data (dataset.id = split-idx)");
  return a;
}

// ---------------------------------------------------------------------------
// Runs

namespace detail {

inline constexpr std::uint64_t kSaltInit = 1, kSaltBuffer = 2, kSaltTrain = 100;

inline std::string checkpoint_name(const std::string& run_id, std::uint64_t seed,
                                   std::size_t task) {
  std::string safe = run_id;
  for (char& ch : safe)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.'))
      ch = '_';
  return safe + "_seed" + std::to_string(seed) + "_task" + std::to_string(task) + ".ckpt";
}

}  // namespace detail

/// One seed of Algorithm-style continual training. Rows are appended to
/// `out` as each task finishes so an abort keeps everything before it.
inline void run_seed(const ExperimentConfig& c, const LabeledSplit& data, std::uint64_t seed,
                     RunResult& out, const RunHooks& hooks = {}) {
  const TaskStream stream = split_by_class(data, c.num_tasks, seed);
  const ModelArch arch = arch_for(c, data);
  const std::size_t T = stream.num_tasks();

  ParamSet theta = build_model(arch, mix_seed(seed, detail::kSaltInit));
  MemoryBuffer buffer(c.buffer_capacity, data.train.sample_shape,
                      mix_seed(seed, detail::kSaltBuffer),
                      c.train.uses_logits() ? arch.num_classes : 0);
  AccuracyMatrix A(T);
  std::vector<ParamSet> after_task;
  std::vector<const Dataset*> tests, trains;
  for (const auto& t : stream.tasks) tests.push_back(&t.test);

  auto row = [&](std::size_t t, const std::string& m, double v) {
    if (!std::isfinite(v)) throw DivergenceError("metric " + m + " is not finite");
    out.rows.push_back({out.run_id, seed, t, m, v});
  };
  auto timing = [&](std::size_t t, const std::string& phase, double s) {
    out.timing.push_back({out.run_id, seed, t, phase, s});
  };

  for (std::size_t t = 0; t < T; ++t) {
    trains.push_back(&stream.tasks[t].train);
    const ParamSet theta_p = theta;
    const std::uint64_t train_seed = mix_seed(seed, detail::kSaltTrain + t);
    TaskReport rep = c.train.method == Method::Joint
                         ? train_joint(arch, theta, trains, c.train, train_seed, &buffer,
                                       hooks.trace)
                         : train_task(arch, theta, stream.tasks[t].train, &buffer, c.train,
                                      train_seed, hooks.trace);
    theta = std::move(rep.params);
    timing(t, "train", rep.wall_seconds);

    std::optional<InterpolationResult> ir;
    if (c.clewi.enabled && t > 0) {
      if (hooks.before_interpolation) {
        const std::vector<const Dataset*> seen(tests.begin(), tests.begin() + std::ptrdiff_t(t + 1));
        hooks.before_interpolation({seed, t, arch, theta, theta_p, buffer, seen});
      }
      // Newest-task accuracy before mixing; compare with acc_last.
      row(t, "acc_last_before_interpolation", accuracy(arch, theta, *tests[t]));
      const auto t0 = std::chrono::steady_clock::now();
      ir = clewi_task_step(arch, theta, theta_p, buffer, c.clewi.alpha, c.clewi.batch_size);
      theta = ir->params;
      timing(t, "interpolate",
             std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      if (hooks.on_interpolation) hooks.on_interpolation(t, *ir);
    }

    const auto t0 = std::chrono::steady_clock::now();
    A.set_row(t, evaluate(arch, theta, tests));
    for (std::size_t i = 0; i <= t; ++i) row(t, "acc_task" + std::to_string(i), A.at(t, i));
    row(t, "acc", final_acc(A, t));
    row(t, "acc_last", last_task_acc(A, t));
    row(t, "fm", forgetting_measure(A, t));
    row(t, "loss_forgetting", loss_forgetting(arch, theta, after_task, tests));
    row(t, "train_loss", rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back());
    if (c.train.method == Method::Agem) {
      row(t, "projections", double(rep.projections));
      row(t, "max_projection_residual", rep.max_projection_residual);
    }
    if (ir) {
      double s = 0.0;
      for (double v : ir->mean_matched_correlation) s += v;
      row(t, "matched_correlation",
          ir->mean_matched_correlation.empty() ? 0.0
                                               : s / double(ir->mean_matched_correlation.size()));
    }
    timing(t, "evaluate",
           std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    if (c.checkpoints) {
      const auto dir = std::filesystem::path(c.out_dir) / "checkpoints";
      std::filesystem::create_directories(dir);
      save_checkpoint_file(theta, (dir / detail::checkpoint_name(out.run_id, seed, t)).string());
    }
    after_task.push_back(theta);
  }
  out.matrices.push_back(A);
}

/// Every seed of `c`, then the over-seed summary of the final-task metrics.
inline RunResult run_experiment(const ExperimentConfig& c, const RunHooks& hooks = {},
                                std::optional<std::string> run_id = std::nullopt) {
  c.validate();
  RunResult r;
  r.run_id = run_id.value_or(c.run_id);
  const LabeledSplit data = load_dataset(c.dataset, c.arch == ArchId::SmallMlp);
  for (auto seed : c.seeds) {
    try {
      run_seed(c, data, seed, r, hooks);
    } catch (const DivergenceError&) {
      if (hooks.on_flush) hooks.on_flush(r);
      throw;
    }
  }
  const std::size_t last = c.num_tasks - 1;
  for (const char* m : kSummaryMetrics) {
    std::vector<double> v;
    for (const auto& row : r.rows)
      if (row.after_task == last && row.metric == m) v.push_back(row.value);
    r.summary[m] = summarize(std::move(v));
  }
  if (hooks.on_flush) hooks.on_flush(r);
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

struct AlphaSweepRow {
  double alpha;
  MetricSummary acc, acc_last, fm;
};

/// One full CLeWI run per alpha.
inline std::vector<AlphaSweepRow> sweep_alpha(const ExperimentConfig& c,
                                              const std::vector<double>& alphas,
                                              std::vector<RunResult>* runs = nullptr,
                                              const RunHooks& hooks = {}) {
  std::vector<AlphaSweepRow> table;
  for (double a : alphas) {
    ExperimentConfig ca = c;
    ca.clewi.enabled = true;
    ca.clewi.alpha = a;
    auto r = run_experiment(ca, hooks, c.run_id + "/alpha=" + format_double(a));
    table.push_back({a, r.summary["acc"], r.summary["acc_last"], r.summary["fm"]});
    if (runs) runs->push_back(std::move(r));
  }
  return table;
}

struct WidthSweepRow {
  std::size_t width;
  std::string method;
  std::size_t param_count;
  MetricSummary acc;
};

inline std::vector<WidthSweepRow> width_sweep(const ExperimentConfig& c,
                                              const std::vector<std::size_t>& widths,
                                              std::vector<RunResult>* runs = nullptr,
                                              const RunHooks& hooks = {}) {
  std::vector<WidthSweepRow> table;
  const std::string method = (c.clewi.enabled ? "clewi+" : "") + to_string(c.train.method);
  for (auto w : widths) {
    ExperimentConfig cw = c;
    cw.width = w;
    auto r = run_experiment(cw, hooks, c.run_id + "/width=" + std::to_string(w));
    const auto data = load_dataset(cw.dataset, cw.arch == ArchId::SmallMlp);
    const auto arch = arch_for(cw, data);
    table.push_back({w, method, param_count(build_model(arch, 0)), r.summary["acc"]});
    if (runs) runs->push_back(std::move(r));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Interpolation curves

struct InterpPoint {
  std::size_t task;
  double alpha;
  double accuracy;
};

/// Evenly spaced grid of `steps + 1` values from 0 to 1.
inline std::vector<double> alpha_grid(std::size_t steps) {
  std::vector<double> g;
  for (std::size_t i = 0; i <= steps; ++i) g.push_back(double(i) / double(steps));
  return g;
}

/// Accuracy on each test set along the permuted interpolation path. The
/// endpoints are the unrepaired networks: theta at 0, permuted theta_p at 1.
inline std::vector<InterpPoint> interp_plot(const ModelArch& arch, const ParamSet& theta,
                                            const ParamSet& theta_p, const MemoryBuffer& buffer,
                                            const std::vector<double>& alphas,
                                            const std::vector<const Dataset*>& test_sets,
                                            std::size_t batch_size = kMatchBatchSize) {
  const auto spec = permutation_spec_of(arch);
  const auto stats = collect_activations(arch, theta, theta_p, buffer, spec, batch_size);
  const auto pi = permutation_from_stats(stats);
  const ParamSet aligned = apply_permutation(theta_p, pi, spec);
  const auto aligned_stats = permute_stats(stats, pi);
  std::vector<InterpPoint> out;
  for (double a : alphas) {
    ParamSet p;
    if (a == 0.0) p = theta;
    else if (a == 1.0) p = aligned;
    else {
      const ParamSet mixed = interpolate(theta, aligned, a);
      p = arch.has_batchnorm() ? update_batchnorm(arch, mixed, buffer, batch_size)
                               : repair_affine(arch, mixed, aligned_stats, a, buffer, batch_size);
    }
    const auto accs = evaluate(arch, p, test_sets);
    for (std::size_t t = 0; t < accs.size(); ++t) out.push_back({t, a, accs[t]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Memory accounting

struct MemoryBudget {
  std::size_t param_count = 0;
  std::size_t weight_bytes = 0;
  std::size_t image_bytes = 0;
  std::size_t equivalent_images = 0;
  std::size_t buffer_images = 0;
  std::size_t er_equivalent_buffer = 0;
};

/// Prices fp32 weights in 8-bit-per-channel images.
inline MemoryBudget memory_budget(std::size_t param_count, std::size_t image_bytes,
                                  std::size_t buffer_images) {
  if (image_bytes == 0) throw ConfigError("image size must be >= 1 byte");
  MemoryBudget m;
  m.param_count = param_count;
  m.weight_bytes = param_count * 4;
  m.image_bytes = image_bytes;
  m.equivalent_images = m.weight_bytes / image_bytes;
  m.buffer_images = buffer_images;
  m.er_equivalent_buffer = buffer_images + m.equivalent_images;
  return m;
}

/// Bytes per stored image for a known dataset id.
inline std::size_t dataset_image_bytes(const std::string& id) {
  if (id == "cifar10" || id == "cifar100") return 32 * 32 * 3;
  if (id == "tiny-imagenet") return 64 * 64 * 3;
  if (id == "split-synth-10") return 32;
  throw ConfigError("no image size known for dataset '" + id + "'");
}

// ---------------------------------------------------------------------------
// Writers

inline void write_results_csv(const std::string& path, const std::vector<ResultsRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << "run_id,seed,after_task,metric,value\n";
  for (const auto& r : rows)
    f << r.run_id << ',' << r.seed << ',' << r.after_task << ',' << r.metric << ','
      << format_double(r.value) << '\n';
}

inline void write_timing_csv(const std::string& path, const std::vector<TimingRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << "run_id,seed,after_task,phase,seconds\n";
  for (const auto& r : rows)
    f << r.run_id << ',' << r.seed << ',' << r.after_task << ',' << r.phase << ','
      << format_double(r.seconds) << '\n';
}

inline nlohmann::ordered_json summary_json(const RunResult& r) {
  nlohmann::ordered_json j;
  j["run_id"] = r.run_id;
  for (const auto& [name, s] : r.summary)
    j["metrics"][name] = {{"mean", s.mean}, {"std", s.std}, {"values", s.values}};
  return j;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
}

}  // namespace clewi
