#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "clewi/config.hpp"
#include "clewi/experiment.hpp"

using namespace clewi;
namespace fs = std::filesystem;

namespace {

// A small stream that runs in well under a second per seed.
const char* kSmall = R"(
version = 1
run.id = small
run.seeds = 0, 1
run.checkpoints = false
dataset.id = split-synth-10
dataset.synth.n_per_class = 60
dataset.synth.dim = 16
stream.num_tasks = 5
model.arch = small-mlp
model.base_width = 16
train.method = er
train.epochs = 2
buffer.capacity = 50
)";

ExperimentConfig small(std::vector<std::string> overrides = {}) {
  return parse_config(kSmall, overrides);
}

std::size_t count_metric(const RunResult& r, const std::string& m) {
  std::size_t n = 0;
  for (const auto& row : r.rows) n += row.metric == m;
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("clewi_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultsAndComments) {
  const auto c = parse_config("# comment\nversion = 1   # trailing\n\n");
  EXPECT_EQ(c.train.method, Method::Er);
  EXPECT_EQ(c.buffer_capacity, 200u);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_DOUBLE_EQ(c.train.lr, 0.03);
  EXPECT_EQ(c.train.epochs, 5u);
  EXPECT_FALSE(c.clewi.enabled);
}

TEST(Config, MethodDefaultAlpha) {
  EXPECT_DOUBLE_EQ(parse_config("version=1\ntrain.method=er").clewi.alpha, 0.3);
  EXPECT_DOUBLE_EQ(parse_config("version=1\ntrain.method=agem").clewi.alpha, 0.5);
  EXPECT_DOUBLE_EQ(parse_config("version=1\ntrain.method=derpp").clewi.alpha, 0.2);
  EXPECT_DOUBLE_EQ(parse_config("version=1\ntrain.method=derpp\nclewi.alpha=0.7").clewi.alpha, 0.7);
}

TEST(Config, RejectsSchemaViolations) {
  EXPECT_THROW(parse_config("train.lr = 0.1"), ConfigError);              // no version
  EXPECT_THROW(parse_config("version = 2"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\ntrain.speed = 3"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\ntrain.lr"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\ntrain.lr = fast"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\ntrain.lr = 0.1\ntrain.lr = 0.2"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\nclewi.alpha = 1.5"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\nclewi.enabled = maybe"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\ndataset.id = cifar100"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\ndataset.id = split-idx"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\nmodel.arch = vgg"), ConfigError);
  EXPECT_THROW(parse_config("version = 1\nrun.seeds = "), ConfigError);
}

TEST(Config, UnimplementedMethodsAreNamed) {
  try {
    parse_config("version = 1\ntrain.method = icarl");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("not implemented"), std::string::npos);
  }
}

TEST(Config, OverridesApplyAfterFile) {
  const auto c = parse_config("version = 1\ntrain.lr = 0.1\nrun.seeds = 4,5",
                              {"train.lr=0.2", "run.seeds = 9"});
  EXPECT_DOUBLE_EQ(c.train.lr, 0.2);
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{9});
  EXPECT_THROW(parse_config("version = 1", {"nope=1"}), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& e : fs::directory_iterator(CLEWI_CONFIG_DIR))
    if (e.path().extension() == ".cfg") EXPECT_NO_THROW(load_config(e.path().string())) << e.path();
}

// ---------------------------------------------------------------------------
// Runs

TEST(Run, RowCountContract) {
  const auto c = small();
  const auto r = run_experiment(c);
  for (const char* m : {"acc", "acc_last", "fm", "loss_forgetting", "train_loss"})
    EXPECT_EQ(count_metric(r, m), 5u * c.seeds.size()) << m;
  EXPECT_EQ(count_metric(r, "acc_task0"), 5u * c.seeds.size());
  EXPECT_EQ(count_metric(r, "acc_task4"), c.seeds.size());
  EXPECT_EQ(count_metric(r, "matched_correlation"), 0u);
  EXPECT_EQ(r.matrices.size(), c.seeds.size());
  for (const auto& row : r.rows) EXPECT_TRUE(std::isfinite(row.value));
}

TEST(Run, SummaryRecomputableFromRows) {
  const auto r = run_experiment(small());
  for (const char* m : kSummaryMetrics) {
    std::vector<double> v;
    for (const auto& row : r.rows)
      if (row.after_task == 4 && row.metric == m) v.push_back(row.value);
    ASSERT_EQ(v.size(), 2u);
    const double mean = (v[0] + v[1]) / 2;
    EXPECT_DOUBLE_EQ(r.summary.at(m).mean, mean);
    EXPECT_DOUBLE_EQ(r.summary.at(m).std, std::abs(v[0] - v[1]) / 2);
  }
}

TEST(Run, MatrixRowsMatchMetrics) {
  const auto r = run_experiment(small({"run.seeds=3"}));
  const auto& A = r.matrices.at(0);
  for (const auto& row : r.rows) {
    if (row.metric == "acc") EXPECT_EQ(row.value, final_acc(A, row.after_task));
    if (row.metric == "fm") EXPECT_EQ(row.value, forgetting_measure(A, row.after_task));
    if (row.metric == "acc_last") EXPECT_EQ(row.value, A.at(row.after_task, row.after_task));
  }
}

TEST(Run, DeterministicFilesAcrossExecutions) {
  const auto d = temp_dir("determinism");
  std::string bytes[2], summary[2];
  for (int k = 0; k < 2; ++k) {
    const auto r = run_experiment(small({"clewi.enabled=true", "train.method=derpp"}));
    write_results_csv((d / "results.csv").string(), r.rows);
    bytes[k] = slurp(d / "results.csv");
    summary[k] = summary_json(r).dump(2);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
  EXPECT_EQ(summary[0], summary[1]);
  EXPECT_NE(bytes[0].find("run_id,seed,after_task,metric,value\n"), std::string::npos);
}

TEST(Run, ClewiOffNeverInterpolatesAndEqualsPlainEr) {
  const auto c = small({"run.seeds=7"});
  std::size_t interpolations = 0, before = 0;
  RunHooks hooks;
  hooks.on_interpolation = [&](std::size_t, const InterpolationResult&) { ++interpolations; };
  hooks.before_interpolation = [&](const PreInterpolation&) { ++before; };
  const auto r = run_experiment(c, hooks);
  EXPECT_EQ(interpolations, 0u);
  EXPECT_EQ(before, 0u);

  // Hand-rolled ER loop with the runner's seed derivation.
  const auto data = load_dataset(c.dataset, true);
  const auto arch = arch_for(c, data);
  const auto stream = split_by_class(data, c.num_tasks, 7);
  ParamSet p = build_model(arch, mix_seed(7, 1));
  MemoryBuffer buf(c.buffer_capacity, data.train.sample_shape, mix_seed(7, 2));
  std::vector<const Dataset*> tests;
  for (const auto& t : stream.tasks) tests.push_back(&t.test);
  for (std::size_t t = 0; t < 5; ++t) {
    p = train_er(arch, p, stream.tasks[t].train, buf, c.train, mix_seed(7, 100 + t)).params;
    const auto row = evaluate(arch, p, tests);
    for (std::size_t i = 0; i <= t; ++i) {
      const auto it = std::find_if(r.rows.begin(), r.rows.end(), [&](const ResultsRow& x) {
        return x.after_task == t && x.metric == "acc_task" + std::to_string(i);
      });
      ASSERT_NE(it, r.rows.end());
      EXPECT_EQ(it->value, row[i]);
    }
  }
}

TEST(Run, ClewiOnInterpolatesAfterEveryLaterTask) {
  std::vector<std::size_t> tasks;
  RunHooks hooks;
  hooks.on_interpolation = [&](std::size_t t, const InterpolationResult& ir) {
    tasks.push_back(t);
    EXPECT_DOUBLE_EQ(ir.alpha, 0.3);
  };
  const auto r = run_experiment(small({"run.seeds=0", "clewi.enabled=true"}), hooks);
  EXPECT_EQ(tasks, (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(count_metric(r, "matched_correlation"), 4u);
  EXPECT_EQ(count_metric(r, "acc_last_before_interpolation"), 4u);
}

TEST(Run, NoRehearsalHasOneLossTermPerStep) {
  // Step indices restart every task, so compare totals.
  std::size_t terms = 0, steps = 0, buffer_updates = 0;
  RunHooks hooks;
  hooks.trace = [&](const TraceRecord& rec) {
    terms += rec.event == TraceEvent::LossTerm;
    steps += rec.event == TraceEvent::Step;
    buffer_updates += rec.event == TraceEvent::BufferUpdate;
  };
  run_experiment(small({"run.seeds=0", "train.rehearsal=false", "clewi.enabled=true"}), hooks);
  EXPECT_GT(steps, 0u);
  EXPECT_EQ(terms, steps);
  EXPECT_GT(buffer_updates, 0u);

  terms = steps = 0;
  run_experiment(small({"run.seeds=0"}), hooks);
  EXPECT_GT(terms, steps);
}

TEST(Run, RehearsalFlagOnIsNormalRun) {
  const auto a = run_experiment(small({"run.seeds=0"}));
  const auto b = run_experiment(small({"run.seeds=0", "train.rehearsal=true"}));
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].value, b.rows[i].value);
}

TEST(Run, CheckpointsPerTaskRoundTrip) {
  const auto d = temp_dir("checkpoints");
  const auto c = small({"run.seeds=0", "run.checkpoints=true", "run.out=" + d.string()});
  const auto r = run_experiment(c);
  for (std::size_t t = 0; t < 5; ++t)
    EXPECT_TRUE(fs::exists(d / "checkpoints" / ("small_seed0_task" + std::to_string(t) + ".ckpt")));
  const auto data = load_dataset(c.dataset, true);
  const auto arch = arch_for(c, data);
  const auto p = load_checkpoint_file((d / "checkpoints" / "small_seed0_task4.ckpt").string());
  const auto stream = split_by_class(data, 5, 0);
  EXPECT_EQ(accuracy(arch, p, stream.tasks[0].test), r.matrices[0].at(4, 0));
}

TEST(Run, DivergenceFlushesEarlierRows) {
  // Inject a divergence partway through the third task of the first seed.
  const auto c = small();
  const std::size_t steps_per_task = (c.dataset.synth_n_per_class * 5 / 6 * 2 + 31) / 32 * 2;
  std::size_t steps = 0;
  bool flushed = false;
  RunResult partial;
  RunHooks hooks;
  hooks.trace = [&](const TraceRecord& r) {
    if (r.event == TraceEvent::Step && ++steps == 2 * steps_per_task + 1)
      throw DivergenceError("injected");
  };
  hooks.on_flush = [&](const RunResult& r) {
    flushed = true;
    partial = r;
  };
  EXPECT_THROW(run_experiment(c, hooks), DivergenceError);
  ASSERT_TRUE(flushed);
  EXPECT_EQ(count_metric(partial, "acc"), 2u);
  EXPECT_EQ(partial.rows.back().after_task, 1u);
}

TEST(Run, HugeLearningRateDiverges) {
  EXPECT_THROW(run_experiment(small({"run.seeds=0", "train.lr=1e7"})), DivergenceError);
}

TEST(Run, MissingIdxFileIsDataError) {
  auto c = small({"dataset.id=split-idx", "dataset.idx.train_images=/no/such",
                  "dataset.idx.train_labels=/no/such", "dataset.idx.test_images=/no/such",
                  "dataset.idx.test_labels=/no/such"});
  EXPECT_THROW(run_experiment(c), DataError);
}

TEST(Run, IdxStreamTrainsConvNet) {
  const auto d = temp_dir("idx");
  std::mt19937_64 rng(0);
  std::vector<std::uint8_t> px, labels;
  for (int i = 0; i < 80; ++i) {
    const int y = i % 4;
    labels.push_back(std::uint8_t(y));
    for (int p = 0; p < 64; ++p) px.push_back(std::uint8_t((p % 4 == y ? 200 : 20) + rng() % 30));
  }
  write_idx_images((d / "tr-img").string(), 8, 8, px);
  write_idx_labels((d / "tr-lab").string(), labels);
  const auto c = small({"run.seeds=0", "dataset.id=split-idx", "stream.num_tasks=2",
                        "model.arch=small-convnet", "model.base_width=4", "clewi.enabled=true",
                        "dataset.idx.train_images=" + (d / "tr-img").string(),
                        "dataset.idx.train_labels=" + (d / "tr-lab").string(),
                        "dataset.idx.test_images=" + (d / "tr-img").string(),
                        "dataset.idx.test_labels=" + (d / "tr-lab").string()});
  const auto r = run_experiment(c);
  EXPECT_EQ(count_metric(r, "acc"), 2u);
  EXPECT_EQ(count_metric(r, "matched_correlation"), 1u);
  // The MLP sees the same images flattened.
  const auto m = run_experiment(small({"run.seeds=0", "dataset.id=split-idx", "stream.num_tasks=2",
                                       "dataset.idx.train_images=" + (d / "tr-img").string(),
                                       "dataset.idx.train_labels=" + (d / "tr-lab").string(),
                                       "dataset.idx.test_images=" + (d / "tr-img").string(),
                                       "dataset.idx.test_labels=" + (d / "tr-lab").string()}));
  EXPECT_EQ(count_metric(m, "acc"), 2u);
}

// ---------------------------------------------------------------------------
// Sweeps and plots

TEST(SweepAlpha, SingleAlphaEqualsRun) {
  const auto c = small({"run.seeds=0", "clewi.enabled=true", "clewi.alpha=0.4"});
  const auto direct = run_experiment(c);
  std::vector<RunResult> runs;
  const auto table = sweep_alpha(c, {0.4}, &runs);
  ASSERT_EQ(table.size(), 1u);
  ASSERT_EQ(runs[0].rows.size(), direct.rows.size());
  for (std::size_t i = 0; i < direct.rows.size(); ++i) {
    EXPECT_EQ(runs[0].rows[i].metric, direct.rows[i].metric);
    EXPECT_EQ(runs[0].rows[i].value, direct.rows[i].value);
  }
  EXPECT_EQ(table[0].fm.mean, direct.summary.at("fm").mean);
  EXPECT_EQ(runs[0].run_id, "small/alpha=0.4");
}

TEST(WidthSweep, ParamCountGrowsAndWidthOneIsBaseRun) {
  const auto c = small({"run.seeds=0", "train.epochs=1"});
  std::vector<RunResult> runs;
  const auto table = width_sweep(c, {1, 2, 4}, &runs);
  ASSERT_EQ(table.size(), 3u);
  EXPECT_LT(table[0].param_count, table[1].param_count);
  EXPECT_LT(table[1].param_count, table[2].param_count);
  EXPECT_EQ(table[0].method, "er");
  const auto base = run_experiment(c);
  EXPECT_EQ(table[0].acc.mean, base.summary.at("acc").mean);
}

TEST(InterpPlot, GridShapeAndEndpoints) {
  const auto c = small({"run.seeds=0", "clewi.enabled=true"});
  std::size_t calls = 0;
  RunHooks hooks;
  hooks.before_interpolation = [&](const PreInterpolation& s) {
    ++calls;
    const auto grid = alpha_grid(20);
    ASSERT_EQ(grid.size(), 21u);
    const auto pts = interp_plot(s.arch, s.theta, s.theta_p, s.buffer, grid, s.seen_tests);
    EXPECT_EQ(pts.size(), 21u * s.seen_tests.size());
    const auto new_acc = evaluate(s.arch, s.theta, s.seen_tests);
    const auto old_acc = evaluate(s.arch, s.theta_p, s.seen_tests);
    for (const auto& p : pts) {
      if (p.alpha == 0.0) EXPECT_EQ(p.accuracy, new_acc[p.task]);
      if (p.alpha == 1.0) EXPECT_NEAR(p.accuracy, old_acc[p.task], 1e-9);
    }
  };
  const auto with = run_experiment(c, hooks);
  EXPECT_EQ(calls, 4u);
  // The plot is pure: the run's results do not change.
  const auto without = run_experiment(c);
  ASSERT_EQ(with.rows.size(), without.rows.size());
  for (std::size_t i = 0; i < with.rows.size(); ++i)
    EXPECT_EQ(with.rows[i].value, without.rows[i].value);
}

// ---------------------------------------------------------------------------
// Memory accounting and formatting

TEST(MemoryBudget, ReferenceNetworks) {
  EXPECT_EQ(memory_budget(11220132, dataset_image_bytes("cifar100"), 0).equivalent_images, 14609u);
  // floor(2351972 * 4 / 3072) = floor(3062.46)
  EXPECT_EQ(memory_budget(2351972, 3072, 0).equivalent_images, 3062u);
  const auto zero = memory_budget(0, 3072, 500);
  EXPECT_EQ(zero.equivalent_images, 0u);
  EXPECT_EQ(zero.er_equivalent_buffer, 500u);
  EXPECT_EQ(memory_budget(11220132, 3072, 200).er_equivalent_buffer, 14809u);
  EXPECT_EQ(dataset_image_bytes("tiny-imagenet"), 64u * 64u * 3u);
  EXPECT_THROW(memory_budget(1, 0, 0), ConfigError);
  EXPECT_THROW(dataset_image_bytes("imagenet"), ConfigError);
}

TEST(Format, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(0.0), "0");
  EXPECT_EQ(format_double(2.0 / 3.0), "0.6666666666666666");
  EXPECT_EQ(std::stod(format_double(1.0 / 7.0)), 1.0 / 7.0);
}

TEST(Summary, PopulationStd) {
  const auto s = summarize({1.0, 3.0});
  EXPECT_EQ(s.mean, 2.0);
  EXPECT_EQ(s.std, 1.0);
  EXPECT_EQ(summarize({}).mean, 0.0);
}
