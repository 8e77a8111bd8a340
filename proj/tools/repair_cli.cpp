// Command-line front end: measure, repair, resample, colored-mnist, experiment.
// Exit codes: 0 success, 2 input errors, 3 numeric failures.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "repair/experiment.hpp"
#include "repair/manifest.hpp"
#include "repair/repair.hpp"

namespace fs = std::filesystem;
using namespace repair;

#ifndef REPAIR_DEFAULT_DATA_DIR
#define REPAIR_DEFAULT_DATA_DIR "data/mnist"
#endif

namespace {

constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

std::string default_data_dir() {
  const char* env = std::getenv("REPAIR_DATA_DIR");
  return env && *env ? env : REPAIR_DEFAULT_DATA_DIR;
}

std::vector<double> parse_double_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  if (text.empty()) return out;
  for (auto cell : io_detail::split(text)) {
    const auto v = io_detail::parse_double(cell);
    if (!v) throw InputError(flag + ": '" + std::string(cell) + "' is not a number");
    out.push_back(*v);
  }
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  if (text.empty()) return out;
  for (auto cell : io_detail::split(text)) {
    const auto v = io_detail::parse_int(cell);
    if (!v || *v < 0) throw InputError("--seeds: '" + std::string(cell) + "' is not a nonnegative integer");
    out.push_back(static_cast<std::uint64_t>(*v));
  }
  return out;
}

std::vector<std::string> parse_word_list(const std::string& text) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  for (auto cell : io_detail::split(text)) out.emplace_back(cell);
  return out;
}

// Dataset inputs shared by measure, repair and resample.
struct DataFlags {
  std::string features, train, test, idx_images, idx_labels;
  std::optional<int> classes;

  void add(CLI::App* cmd, bool allow_split) {
    cmd->add_option("--features", features, "Feature CSV (id,label,f0,...)");
    if (allow_split) {
      cmd->add_option("--train", train, "Training feature CSV; combined with --test, ids tagged train/ and test/");
      cmd->add_option("--test", test, "Test feature CSV (requires --train)");
    }
    cmd->add_option("--idx-images", idx_images, "IDX image file (with --idx-labels)");
    cmd->add_option("--idx-labels", idx_labels, "IDX label file (with --idx-images)");
    cmd->add_option("--classes", classes, "Class count (default: max label + 1, or 10 for IDX)");
  }

  std::vector<fs::path> paths() const {
    std::vector<fs::path> out;
    for (const auto* p : {&features, &train, &test, &idx_images, &idx_labels}) {
      if (!p->empty()) out.emplace_back(*p);
    }
    return out;
  }

  bool split() const { return !train.empty(); }

  FeatureDataset load() const {
    const int sources = int(!features.empty()) + int(!train.empty() || !test.empty()) +
                        int(!idx_images.empty() || !idx_labels.empty());
    if (sources != 1) throw InputError("give exactly one of --features, --train/--test, or --idx-images/--idx-labels");
    if (!features.empty()) return load_features_csv(features, classes);
    if (!idx_images.empty() || !idx_labels.empty()) {
      if (idx_images.empty() || idx_labels.empty()) throw InputError("--idx-images and --idx-labels go together");
      return load_idx(idx_images, idx_labels, classes.value_or(kMnistClasses));
    }
    if (train.empty() || test.empty()) throw InputError("--train and --test go together");
    auto a = load_features_csv(train, classes);
    auto b = load_features_csv(test, classes);
    const int c = std::max(a.class_count(), b.class_count());
    const auto widen = [c](const FeatureDataset& d, std::string_view prefix) {
      return FeatureDataset(d.features(), {d.labels().begin(), d.labels().end()}, c,
                            with_id_prefix(d, prefix).ids());
    };
    return concat(widen(a, "train/"), widen(b, "test/"));
  }
};

struct EstimatorFlags {
  EstimatorConfig config;
  std::string sweep = "default";
  bool no_standardize = false;

  void add(CLI::App* cmd, std::string_view prefix = "") {
    const std::string p(prefix);
    cmd->add_option("--" + p + "lr", config.learning_rate, "Estimator learning rate")->capture_default_str();
    cmd->add_option("--" + p + "iters", config.iterations, "Estimator SGD iterations")->capture_default_str();
    cmd->add_option("--" + p + "batch", config.batch_size, "Estimator mini-batch size")->capture_default_str();
    cmd->add_option("--" + p + "weight-decay", config.weight_decay, "L2 decay when the sweep is off")
        ->capture_default_str();
    cmd->add_option("--decay-sweep", sweep, "Comma-separated decays, 'default' (1e-1..1e-5) or 'off'")
        ->capture_default_str();
    cmd->add_flag("--no-standardize", no_standardize, "Train on raw instead of standardized features");
  }

  EstimatorConfig resolve(std::uint64_t seed) const {
    auto c = config;
    c.seed = seed;
    c.standardize = !no_standardize;
    if (sweep == "default") {
      c.decay_sweep = default_decay_sweep();
    } else if (sweep == "off") {
      c.decay_sweep.clear();
    } else {
      c.decay_sweep = parse_double_list(sweep, "--decay-sweep");
    }
    c.validate();
    return c;
  }
};

struct RepairFlags {
  RepairConfig config;
  std::optional<double> lr_omega_per_n;
  std::optional<double> epochs;
  bool no_standardize = false;

  void add(CLI::App* cmd, bool with_iterations) {
    cmd->add_option("--lr-theta", config.lr_theta, "Estimator ascent rate")->capture_default_str();
    cmd->add_option("--lr-omega", config.lr_omega, "Weight descent rate")->capture_default_str();
    cmd->add_option("--lr-omega-per-n", lr_omega_per_n, "Weight rate per example (rate = value * n)");
    if (with_iterations) {
      cmd->add_option("--iters", config.iterations, "Mini-batch iterations")->capture_default_str();
      cmd->add_option("--epochs", epochs, "Passes over the data (overrides --iters)");
      cmd->add_option("--history-stride", config.history_stride, "Log every k steps")->capture_default_str();
    }
    cmd->add_option("--batch", config.batch_size, "Mini-batch size")->capture_default_str();
    cmd->add_option("--theta-steps", config.theta_steps_per_omega_step, "Estimator steps per weight step")
        ->capture_default_str();
    cmd->add_option("--repair-weight-decay", config.weight_decay, "L2 decay on the estimator during REPAIR")
        ->capture_default_str();
    cmd->add_option("--entropy-floor", config.entropy_floor, "Degenerate-denominator guard")->capture_default_str();
  }

  RepairConfig resolve(std::uint64_t seed, std::size_t n) const {
    auto c = config;
    c.seed = seed;
    c.standardize = !no_standardize;
    if (lr_omega_per_n) c.lr_omega_per_example = *lr_omega_per_n;
    if (epochs) {
      if (!(*epochs >= 0)) throw InputError("--epochs must be nonnegative");
      c.iterations = RepairConfig::iterations_for_epochs(*epochs, n, c.batch_size);
    }
    c.validate();
    return c;
  }
};

void write_report(const BiasReport& report, const fs::path& dir, std::string_view stem) {
  save_key_values(to_key_values(report), dir / (std::string(stem) + ".txt"));
  auto out = io_detail::open_for_write(dir / (std::string(stem) + "_decays.csv"));
  write_decay_table(out, report);
}

RunManifest start_manifest(const std::string& command, const std::vector<fs::path>& inputs, std::uint64_t seed) {
  RunManifest m;
  m.command = command;
  m.started_at = utc_timestamp();
  m.seeds = {seed};
  for (const auto& p : inputs) m.add_input(p);
  return m;
}

// ---------------------------------------------------------------------------

struct MeasureCmd {
  DataFlags data;
  EstimatorFlags estimator;
  std::string weights;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("measure", "Measure representation bias 1 - R*/H(Y) of a feature set");
    data.add(cmd, true);
    estimator.add(cmd);
    cmd->add_option("--weights", weights, "Weight CSV (id,omega,w) aligned by id");
    cmd->add_option("--seed", seed, "Seed")->capture_default_str();
    cmd->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto cfg = estimator.resolve(seed);
    auto inputs = data.paths();
    if (!weights.empty()) inputs.emplace_back(weights);
    auto manifest = start_manifest("measure", inputs, seed);
    manifest.config = {{"estimator", to_json(cfg)}, {"weights", weights}};
    const fs::path dir(out_dir);
    manifest.outputs = {(dir / "bias_report.txt").string(), (dir / "bias_report_decays.csv").string()};
    save_manifest(manifest, dir / "manifest.json");

    const auto dataset = data.load();
    std::vector<double> w;
    if (!weights.empty()) w = load_weights(weights, dataset).weights();
    const auto report = measure_bias(dataset, w, cfg);
    write_report(report, dir, "bias_report");
    std::cout << "bias=" << format_double17(report.bias) << " risk=" << format_double17(report.risk)
              << " entropy=" << format_double17(report.entropy) << '\n';
  }
};

struct RepairCmd {
  DataFlags data;
  RepairFlags repair;
  EstimatorFlags estimator;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("repair", "Learn per-example weights that minimize representation bias");
    data.add(cmd, true);
    repair.add(cmd, true);
    estimator.add(cmd, "est-");
    cmd->add_option("--seed", seed, "Seed")->capture_default_str();
    cmd->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto est = estimator.resolve(seed);
    auto manifest = start_manifest("repair", data.paths(), seed);
    const fs::path dir(out_dir);
    manifest.outputs = {(dir / "weights.csv").string(), (dir / "history.csv").string(),
                        (dir / "repair_report.txt").string()};
    const auto dataset = data.load();
    repair.no_standardize = estimator.no_standardize;
    const auto cfg = repair.resolve(seed, dataset.size());
    manifest.config = {{"repair", to_json(cfg)}, {"estimator", to_json(est)}};
    save_manifest(manifest, dir / "manifest.json");

    const auto initial = measure_bias(dataset, est);
    const auto result = repair_run(dataset, cfg);
    save_weights(result.weights, dataset.ids(), dir / "weights.csv");
    {
      auto out = io_detail::open_for_write(dir / "history.csv");
      write_history_csv(out, result.history);
    }
    const auto w = result.weights.weights();
    KeyValueRecord record{{"initial_bias", format_double17(initial.bias)}};
    std::optional<BiasReport> final_report;
    try {
      final_report = measure_bias(dataset, w, est);
      record.emplace_back("final_bias", format_double17(final_report->bias));
      record.emplace_back("final_entropy", format_double17(final_report->entropy));
    } catch (const InputError& e) {
      record.emplace_back("final_bias", "undefined");
      warn(std::string("final bias not measurable: ") + e.what());
    }
    double mean_w = 0;
    for (double x : w) mean_w += x;
    mean_w /= static_cast<double>(w.size());
    record.emplace_back("mean_w", format_double17(mean_w));
    if (!result.history.entries.empty()) {
      record.emplace_back("final_objective", format_double17(result.history.entries.back().objective));
    }
    record.emplace_back("skipped_omega_updates", std::to_string(result.history.skipped_omega_updates));
    record.emplace_back("aborted", result.aborted ? "true" : "false");
    if (result.aborted) record.emplace_back("abort_reason", result.abort_reason);
    save_key_values(record, dir / "repair_report.txt");
    std::cout << "initial_bias=" << format_double17(initial.bias);
    if (final_report) std::cout << " final_bias=" << format_double17(final_report->bias);
    std::cout << '\n';
    if (result.aborted) throw NumericError("REPAIR aborted: " + result.abort_reason);
  }
};

struct ResampleCmd {
  DataFlags data;
  std::string weights;
  std::string strategy = "rank";
  ResampleParams params;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("resample", "Turn weights into a retained subset");
    data.add(cmd, true);
    cmd->add_option("--weights", weights, "Weight CSV (id,omega,w)")->required();
    cmd->add_option("--strategy", strategy, "threshold|rank|cls_rank|sample|uniform")->capture_default_str();
    cmd->add_option("--threshold", params.threshold, "Keep w >= t (threshold)")->capture_default_str();
    cmd->add_option("--keep", params.keep_fraction, "Keep fraction (rank, cls_rank, uniform)")->capture_default_str();
    cmd->add_option("--seed", seed, "Seed (sample, uniform)")->capture_default_str();
    cmd->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto s = parse_strategy(strategy);
    auto inputs = data.paths();
    inputs.emplace_back(weights);
    auto manifest = start_manifest("resample", inputs, seed);
    manifest.config = {{"strategy", strategy}, {"threshold", params.threshold}, {"keep", params.keep_fraction}};
    const fs::path dir(out_dir);
    manifest.outputs.push_back((dir / "plan.csv").string());
    if (data.split()) {
      manifest.outputs.push_back((dir / "subset_train.csv").string());
      manifest.outputs.push_back((dir / "subset_test.csv").string());
    } else {
      manifest.outputs.push_back((dir / "subset.csv").string());
    }
    save_manifest(manifest, dir / "manifest.json");

    const auto dataset = data.load();
    const auto w = load_weights(weights, dataset);
    const auto plan = resample(w, dataset.labels(), s, params, seed, dataset.class_count());
    {
      auto out = io_detail::open_for_write(dir / "plan.csv");
      write_plan_csv(out, plan, dataset.ids());
    }
    const auto kept = subset(dataset, plan);
    warn_empty_classes(kept, "resampled set");
    if (data.split()) {
      for (std::string_view origin : {"train", "test"}) {
        const auto prefix = std::string(origin) + "/";
        const auto part = subset(kept, indices_with_id_prefix(kept, prefix));
        std::vector<std::string> ids;
        for (const auto& id : part.ids()) ids.push_back(id.substr(prefix.size()));
        save_features_csv(FeatureDataset(part.features(), {part.labels().begin(), part.labels().end()},
                                         part.class_count(), std::move(ids)),
                          dir / ("subset_" + std::string(origin) + ".csv"));
      }
    } else {
      save_features_csv(kept, dir / "subset.csv");
    }
    std::cout << "retained=" << plan.retained.size() << " of " << dataset.size() << '\n';
  }
};

struct ColoredMnistCmd {
  std::string data_dir = default_data_dir();
  double sigma = 0.02;
  std::uint64_t seed = 0;
  std::string scheme = "random";
  std::uint64_t color_seed = 0;
  std::string representation = "pixels";
  std::size_t limit = 0;
  std::string out_dir = "out";

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("colored-mnist", "Write Colored MNIST train/test CSVs and the color spec");
    cmd->add_option("--data-dir", data_dir, "Directory with the four MNIST IDX files (env REPAIR_DATA_DIR)")
        ->capture_default_str();
    cmd->add_option("--sigma", sigma, "Per-channel color standard deviation")->capture_default_str();
    cmd->add_option("--seed", seed, "Seed of the per-example color draws")->capture_default_str();
    cmd->add_option("--scheme", scheme, "Class color means: random|spread")->capture_default_str();
    cmd->add_option("--color-seed", color_seed, "Seed of the class color means")->capture_default_str();
    cmd->add_option("--representation", representation, "pixels (3x784) or color (mean RGB)")
        ->capture_default_str();
    cmd->add_option("--limit", limit, "Keep only the first N examples of each split (0 = all)");
    cmd->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
    cmd->callback([this] { run(); });
  }

  void run() {
    if (representation != "pixels" && representation != "color") {
      throw InputError("--representation must be pixels or color");
    }
    if (!(sigma >= 0)) throw InputError("--sigma must be nonnegative");
    const auto paths = MnistPaths::in_directory(data_dir);
    auto manifest = start_manifest("colored-mnist", paths.all(), seed);
    manifest.config = {{"sigma", sigma}, {"scheme", scheme}, {"color_seed", color_seed},
                       {"representation", representation}, {"limit", limit}};
    const fs::path dir(out_dir);
    manifest.outputs = {(dir / "train.csv").string(), (dir / "test.csv").string(),
                        (dir / "color_spec.txt").string()};
    save_manifest(manifest, dir / "manifest.json");

    const ColorSpec spec{make_color_means(kMnistClasses, color_seed, parse_color_scheme(scheme)), sigma, seed};
    save_key_values(to_key_values(spec), dir / "color_spec.txt");
    const auto write_split = [&](const fs::path& img, const fs::path& lbl, std::uint64_t stream,
                                 const std::string& name) {
      auto gray = load_idx(img, lbl, kMnistClasses);
      if (limit > 0 && limit < gray.size()) {
        std::vector<std::size_t> head(limit);
        std::iota(head.begin(), head.end(), std::size_t{0});
        gray = subset(gray, head);
      }
      const auto out = representation == "color" ? colorized_color_feature(gray, kMnistPixels, spec, stream)
                                                 : colorize(gray, kMnistPixels, spec, stream);
      save_features_csv(out, dir / name);
    };
    write_split(paths.train_images, paths.train_labels, 0, "train.csv");
    write_split(paths.test_images, paths.test_labels, 1, "test.csv");
  }
};

struct ExperimentCmd {
  std::string name;
  std::string data_dir = default_data_dir();
  std::optional<std::string> sigmas, seeds, strategies, rates;
  double threshold = 0.5;
  std::string scheme = "random";
  std::uint64_t color_seed = 0;
  RepairFlags repair;
  std::optional<double> repair_epochs;
  EstimatorFlags estimator;
  DownstreamConfig downstream;
  int jobs = 1;
  std::string out_dir = "out";
  std::string weight_cache;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("experiment", "Run a Colored MNIST grid into <out-dir>/results.csv");
    cmd->add_option("name", name, "bias-vs-sigma | repair-vs-uniform | generalization")->required();
    cmd->add_option("--data-dir", data_dir, "Directory with the four MNIST IDX files (env REPAIR_DATA_DIR)")
        ->capture_default_str();
    cmd->add_option("--sigmas", sigmas, "Comma-separated color standard deviations");
    cmd->add_option("--seeds", seeds, "Comma-separated run seeds");
    cmd->add_option("--strategies", strategies, "Comma-separated: none,threshold,rank,cls_rank,sample,uniform");
    cmd->add_option("--rates", rates, "Comma-separated keep fractions");
    cmd->add_option("--threshold", threshold, "Threshold strategy cut")->capture_default_str();
    cmd->add_option("--scheme", scheme, "Class color means: random|spread")->capture_default_str();
    cmd->add_option("--color-seed", color_seed, "Seed of the class color means")->capture_default_str();
    repair.config = default_experiment_repair();
    repair.add(cmd, false);
    cmd->add_option("--repair-epochs", repair_epochs, "REPAIR passes over train+test (default 200)");
    estimator.add(cmd, "est-");
    cmd->add_option("--hidden", downstream.hidden_units, "Downstream hidden units (0 = logistic)")
        ->capture_default_str();
    cmd->add_option("--ds-lr", downstream.learning_rate, "Downstream learning rate")->capture_default_str();
    cmd->add_option("--ds-epochs", downstream.epochs, "Downstream epochs")->capture_default_str();
    cmd->add_option("--ds-batch", downstream.batch_size, "Downstream batch size")->capture_default_str();
    cmd->add_option("--jobs", jobs, "Concurrent grid groups")->capture_default_str();
    cmd->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
    cmd->add_option("--weight-cache", weight_cache, "Directory of cached REPAIR weights (default <out-dir>/weights)");
    cmd->callback([this] { run(); });
  }

  void run() {
    auto cfg = ExperimentConfig::defaults(parse_experiment_kind(name));
    if (sigmas) cfg.sigmas = parse_double_list(*sigmas, "--sigmas");
    if (seeds) cfg.seeds = parse_seed_list(*seeds);
    if (strategies) cfg.strategies = parse_word_list(*strategies);
    if (rates) cfg.rates = parse_double_list(*rates, "--rates");
    cfg.threshold = threshold;
    cfg.scheme = parse_color_scheme(scheme);
    cfg.color_seed = color_seed;
    cfg.repair = repair.resolve(0, 1);
    if (repair_epochs) cfg.repair_epochs = *repair_epochs;
    cfg.estimator = estimator.resolve(0);
    cfg.downstream = downstream;
    cfg.jobs = jobs;
    cfg.validate();

    const auto paths = MnistPaths::in_directory(data_dir);
    RunManifest manifest;
    manifest.command = "experiment " + name;
    manifest.started_at = utc_timestamp();
    manifest.seeds = cfg.seeds;
    for (const auto& p : paths.all()) manifest.add_input(p);
    manifest.config = to_json(cfg);
    const fs::path dir(out_dir);
    manifest.outputs = {(dir / "results.csv").string()};
    save_manifest(manifest, dir / "manifest.json");

    const auto source = load_mnist(paths);
    const auto summary = run_experiment(cfg, source, dir, weight_cache);
    std::cout << "rows=" << summary.rows.size() << " computed=" << summary.computed_cells
              << " reused=" << summary.reused_cells << " results=" << summary.results_path.string() << '\n';
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Representation bias measurement and REPAIR dataset resampling"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  MeasureCmd measure;
  RepairCmd repair_cmd;
  ResampleCmd resample_cmd;
  ColoredMnistCmd colored;
  ExperimentCmd experiment;
  measure.add(app);
  repair_cmd.add(app);
  resample_cmd.add(app);
  colored.add(app);
  experiment.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return 0;
}
