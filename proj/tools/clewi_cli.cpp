// Command-line front end for continual-learning experiments.
//
// Exit codes: 0 ok, 1 other error, 2 config error, 3 data error, 4 divergence.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "clewi/checkpoint.hpp"
#include "clewi/config.hpp"
#include "clewi/experiment.hpp"

namespace fs = std::filesystem;
using namespace clewi;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> set;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c, bool config_required = true) {
  auto* opt = sub->add_option("--config", c.config_path, "experiment config file");
  if (config_required) opt->required();
  sub->add_option("--seed", c.seed, "run a single seed instead of run.seeds");
  sub->add_option("--out", c.out, "output directory (overrides run.out)");
  sub->add_option("--set", c.set, "extra key=value override, repeatable");
  sub->add_flag("--quiet", c.quiet, "suppress progress output");
}

ExperimentConfig load(const Common& c) {
  auto overrides = c.set;
  if (c.seed) overrides.push_back("run.seeds=" + std::to_string(*c.seed));
  if (c.out) overrides.push_back("run.out=" + *c.out);
  return load_config(c.config_path, overrides);
}

std::string out_file(const ExperimentConfig& c, const std::string& name) {
  fs::create_directories(c.out_dir);
  return (fs::path(c.out_dir) / name).string();
}

RunHooks progress_hooks(const ExperimentConfig& c, bool quiet) {
  RunHooks h;
  // Partial results survive a divergence abort.
  h.on_flush = [&c](const RunResult& r) {
    write_results_csv(out_file(c, "results.csv"), r.rows);
    write_timing_csv(out_file(c, "timing.csv"), r.timing);
  };
  if (!quiet)
    h.on_interpolation = [](std::size_t task, const InterpolationResult& ir) {
      double s = 0.0;
      for (double v : ir.mean_matched_correlation) s += v;
      std::cerr << "  task " << task << ": interpolated at alpha " << ir.alpha
                << ", matched correlation "
                << s / double(std::max<std::size_t>(1, ir.mean_matched_correlation.size()))
                << "\n";
    };
  return h;
}

void print_summary(const RunResult& r, bool quiet) {
  if (quiet) return;
  std::cerr << r.run_id << ":";
  for (const auto& [k, s] : r.summary) std::cerr << "  " << k << " " << s.mean << " +/- " << s.std;
  std::cerr << "\n";
}

int cmd_run(const Common& cm) {
  const auto c = load(cm);
  auto hooks = progress_hooks(c, cm.quiet);
  const auto r = run_experiment(c, hooks);
  write_text(out_file(c, "summary.json"), summary_json(r).dump(2) + "\n");
  print_summary(r, cm.quiet);
  return 0;
}

void write_all_rows(const ExperimentConfig& c, const std::vector<RunResult>& runs) {
  std::vector<ResultsRow> rows;
  std::vector<TimingRow> timing;
  for (const auto& r : runs) {
    rows.insert(rows.end(), r.rows.begin(), r.rows.end());
    timing.insert(timing.end(), r.timing.begin(), r.timing.end());
  }
  write_results_csv(out_file(c, "results.csv"), rows);
  write_timing_csv(out_file(c, "timing.csv"), timing);
}

int cmd_sweep_alpha(const Common& cm, const std::vector<double>& cli_alphas) {
  const auto c = load(cm);
  const auto alphas = cli_alphas.empty() ? c.sweep_alphas : cli_alphas;
  std::vector<RunResult> runs;
  RunHooks hooks;
  const auto table = sweep_alpha(c, alphas, &runs, hooks);
  write_all_rows(c, runs);
  std::ostringstream csv;
  csv << "alpha,acc_mean,acc_std,acc_last_mean,acc_last_std,fm_mean,fm_std\n";
  for (const auto& row : table)
    csv << format_double(row.alpha) << ',' << format_double(row.acc.mean) << ','
        << format_double(row.acc.std) << ',' << format_double(row.acc_last.mean) << ','
        << format_double(row.acc_last.std) << ',' << format_double(row.fm.mean) << ','
        << format_double(row.fm.std) << '\n';
  write_text(out_file(c, "sweep_alpha.csv"), csv.str());
  if (!cm.quiet) std::cout << csv.str();
  return 0;
}

int cmd_width_sweep(const Common& cm, const std::vector<std::size_t>& cli_widths) {
  const auto c = load(cm);
  const auto widths = cli_widths.empty() ? c.sweep_widths : cli_widths;
  std::vector<RunResult> runs;
  const auto table = width_sweep(c, widths, &runs);
  write_all_rows(c, runs);
  std::ostringstream csv;
  csv << "width,method,param_count,acc_mean,acc_std\n";
  for (const auto& row : table)
    csv << row.width << ',' << row.method << ',' << row.param_count << ','
        << format_double(row.acc.mean) << ',' << format_double(row.acc.std) << '\n';
  write_text(out_file(c, "width_sweep.csv"), csv.str());
  if (!cm.quiet) std::cout << csv.str();
  return 0;
}

/// Trains as `run` does; before each interpolation step records the whole
/// accuracy-vs-alpha curve on the tasks seen so far.
int cmd_interp_plot(const Common& cm) {
  auto c = load(cm);
  c.clewi.enabled = true;
  const auto grid = alpha_grid(c.interp_steps);
  std::ostringstream csv;
  csv << "seed,after_task,eval_task,alpha,accuracy\n";
  RunHooks hooks;
  hooks.before_interpolation = [&](const PreInterpolation& s) {
    for (const auto& p :
         interp_plot(s.arch, s.theta, s.theta_p, s.buffer, grid, s.seen_tests, c.clewi.batch_size))
      csv << s.seed << ',' << s.task << ',' << p.task << ',' << format_double(p.alpha) << ','
          << format_double(p.accuracy) << '\n';
  };
  run_experiment(c, hooks);
  write_text(out_file(c, "interp_plot.csv"), csv.str());
  return 0;
}

int cmd_memory_budget(const Common& cm, std::optional<std::size_t> params,
                      std::optional<std::string> dataset, std::optional<std::size_t> buffer) {
  std::size_t n = 0, image_bytes = 0, buf = buffer.value_or(0);
  if (!cm.config_path.empty()) {
    const auto c = load(cm);
    const auto data = load_dataset(c.dataset, c.arch == ArchId::SmallMlp);
    n = param_count(build_model(arch_for(c, data), 0));
    image_bytes = data.train.sample_size();
    if (!buffer) buf = c.buffer_capacity;
  }
  if (params) n = *params;
  if (dataset) image_bytes = dataset_image_bytes(*dataset);
  if (image_bytes == 0) throw ConfigError("memory-budget needs --config or --dataset");
  const auto m = memory_budget(n, image_bytes, buf);
  nlohmann::ordered_json j{{"param_count", m.param_count},
                           {"weight_bytes", m.weight_bytes},
                           {"image_bytes", m.image_bytes},
                           {"equivalent_images", m.equivalent_images},
                           {"buffer_images", m.buffer_images},
                           {"er_equivalent_buffer", m.er_equivalent_buffer}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_eval(const Common& cm, const std::string& checkpoint) {
  const auto c = load(cm);
  const auto data = load_dataset(c.dataset, c.arch == ArchId::SmallMlp);
  const auto arch = arch_for(c, data);
  const auto params = load_checkpoint_file(checkpoint);
  check_params(arch, params);
  const auto seed = c.seeds.front();
  const auto stream = split_by_class(data, c.num_tasks, seed);
  std::cout << "task,accuracy\n";
  for (std::size_t t = 0; t < stream.num_tasks(); ++t)
    std::cout << t << ',' << format_double(accuracy(arch, params, stream.tasks[t].test)) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with weight interpolation"};
  app.require_subcommand(1);

  Common run_c, sweep_c, width_c, interp_c, mem_c, eval_c;
  std::vector<double> alphas;
  std::vector<std::size_t> widths;
  std::optional<std::size_t> mem_params, mem_buffer;
  std::optional<std::string> mem_dataset;
  std::string checkpoint;

  auto* run = app.add_subcommand("run", "train a task stream for every seed");
  add_common(run, run_c);
  auto* sweep = app.add_subcommand("sweep-alpha", "one interpolated run per alpha");
  add_common(sweep, sweep_c);
  sweep->add_option("--alphas", alphas, "alphas (default sweep.alphas)")->delimiter(',');
  auto* width = app.add_subcommand("width-sweep", "one run per width multiplier");
  add_common(width, width_c);
  width->add_option("--widths", widths, "widths (default sweep.widths)")->delimiter(',');
  auto* interp = app.add_subcommand("interp-plot", "accuracy along the interpolation path");
  add_common(interp, interp_c);
  auto* mem = app.add_subcommand("memory-budget", "weights priced in stored images");
  add_common(mem, mem_c, false);
  mem->add_option("--param-count", mem_params, "parameter count (overrides the config model)");
  mem->add_option("--dataset", mem_dataset, "cifar10, cifar100, tiny-imagenet or split-synth-10");
  mem->add_option("--buffer", mem_buffer, "images already in the buffer");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on every task");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(run_c);
    if (*sweep) return cmd_sweep_alpha(sweep_c, alphas);
    if (*width) return cmd_width_sweep(width_c, widths);
    if (*interp) return cmd_interp_plot(interp_c);
    if (*mem) return cmd_memory_budget(mem_c, mem_params, mem_dataset, mem_buffer);
    if (*ev) return cmd_eval(eval_c, checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
