#pragma once

// Colored MNIST experiment grids. Each cell becomes one row of the results
// table `sigma,strategy,rate,seed,train_bias,acc_biased,acc_unbiased`.

#include <algorithm>
#include <atomic>
#include <exception>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "repair/bias_meter.hpp"
#include "repair/biasgen.hpp"
#include "repair/dataset.hpp"
#include "repair/downstream.hpp"
#include "repair/errors.hpp"
#include "repair/io.hpp"
#include "repair/manifest.hpp"
#include "repair/repair_solver.hpp"
#include "repair/resampler.hpp"

namespace repair {

inline constexpr Index kMnistPixels = 784;
inline constexpr int kMnistClasses = 10;

struct MnistPaths {
  std::filesystem::path train_images, train_labels, test_images, test_labels;

  static MnistPaths in_directory(const std::filesystem::path& dir) {
    return {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", dir / "t10k-images-idx3-ubyte",
            dir / "t10k-labels-idx1-ubyte"};
  }

  std::vector<std::filesystem::path> all() const { return {train_images, train_labels, test_images, test_labels}; }
};

/// Grayscale MNIST with origin-tagged ids ("train/<k>", "test/<k>").
struct MnistSource {
  FeatureDataset train;
  FeatureDataset test;
  std::string digest;  // SHA-256 over the four file digests
};

inline MnistSource load_mnist(const MnistPaths& paths) {
  MnistSource src;
  src.train = load_idx(paths.train_images, paths.train_labels, kMnistClasses, "train/");
  src.test = load_idx(paths.test_images, paths.test_labels, kMnistClasses, "test/");
  std::string joined;
  for (const auto& p : paths.all()) joined += sha256_file(p);
  src.digest = sha256_hex(joined);
  return src;
}

enum class ExperimentKind { kBiasVsSigma, kRepairVsUniform, kGeneralization };

inline std::string_view to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kBiasVsSigma: return "bias-vs-sigma";
    case ExperimentKind::kRepairVsUniform: return "repair-vs-uniform";
    case ExperimentKind::kGeneralization: return "generalization";
  }
  return "unknown";
}

inline ExperimentKind parse_experiment_kind(std::string_view name) {
  for (auto k : {ExperimentKind::kBiasVsSigma, ExperimentKind::kRepairVsUniform, ExperimentKind::kGeneralization}) {
    if (to_string(k) == name) return k;
  }
  throw InputError("unknown experiment '" + std::string(name) +
                   "' (expected bias-vs-sigma, repair-vs-uniform or generalization)");
}

inline constexpr std::string_view kNoResampling = "none";

/// Bias measurement in experiments sweeps the five weight decays.
inline EstimatorConfig default_experiment_estimator() {
  EstimatorConfig e;
  e.decay_sweep = default_decay_sweep();
  return e;
}

/// Rates 1e-3 / 10 over 200 epochs; batch 32 with five theta steps per omega step.
inline RepairConfig default_experiment_repair() {
  RepairConfig r;
  r.batch_size = 32;
  r.theta_steps_per_omega_step = 5;
  return r;
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kBiasVsSigma;
  std::vector<double> sigmas;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> strategies;  // "none" or a resampling strategy
  std::vector<double> rates{0.5};       // keep fractions for rank, cls_rank, uniform
  double threshold = 0.5;
  ColorScheme scheme = ColorScheme::kRandom;
  std::uint64_t color_seed = 0;
  EstimatorConfig estimator = default_experiment_estimator();
  RepairConfig repair = default_experiment_repair();
  double repair_epochs = 200;
  DownstreamConfig downstream;
  int jobs = 1;

  /// Grid defaults per experiment.
  static ExperimentConfig defaults(ExperimentKind kind) {
    ExperimentConfig c;
    c.kind = kind;
    switch (kind) {
      case ExperimentKind::kBiasVsSigma:
        c.sigmas = {0.01, 0.02, 0.05, 0.1, 0.2, 0.5};
        c.seeds = {0};
        c.strategies = {std::string(kNoResampling)};
        break;
      case ExperimentKind::kRepairVsUniform:
        c.sigmas = {0.01, 0.02, 0.05, 0.1};
        c.seeds = {0, 1, 2, 3, 4};
        c.strategies = {"none", "threshold", "rank", "cls_rank", "sample", "uniform"};
        break;
      case ExperimentKind::kGeneralization:
        c.sigmas = {0.01, 0.02, 0.05, 0.1, 0.2, 0.5};
        c.seeds = {0};
        c.strategies = {std::string(kNoResampling)};
        break;
    }
    return c;
  }

  void validate() const {
    if (sigmas.empty() || seeds.empty() || strategies.empty() || rates.empty()) {
      throw InputError("experiment grid is empty: sigmas, seeds, strategies and rates all need values");
    }
    for (double s : sigmas) {
      if (!(s >= 0)) throw InputError("sigma values must be nonnegative");
    }
    for (double r : rates) {
      if (!(r > 0 && r <= 1)) throw InputError("rates must lie in (0, 1]");
    }
    for (const auto& s : strategies) {
      if (s != kNoResampling) parse_strategy(s);
    }
    if (kind == ExperimentKind::kBiasVsSigma &&
        std::any_of(strategies.begin(), strategies.end(), [](const auto& s) { return s != kNoResampling; })) {
      throw InputError("bias-vs-sigma measures unresampled data; use --strategies none");
    }
    if (!(threshold >= 0 && threshold <= 1)) throw InputError("threshold must lie in [0, 1]");
    if (!(repair_epochs >= 0)) throw InputError("repair epochs must be nonnegative");
    if (jobs < 1) throw InputError("jobs must be positive");
    estimator.validate();
    repair.validate();
    downstream.validate();
  }
};

inline nlohmann::ordered_json to_json(const EstimatorConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"iterations", c.iterations}, {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay},   {"decay_sweep", c.decay_sweep}, {"standardize", c.standardize},
          {"seed", c.seed}};
}

inline nlohmann::ordered_json to_json(const RepairConfig& c) {
  nlohmann::ordered_json j{{"lr_theta", c.lr_theta},
                           {"lr_omega", c.lr_omega},
                           {"iterations", c.iterations},
                           {"batch_size", c.batch_size},
                           {"seed", c.seed},
                           {"weight_decay", c.weight_decay},
                           {"entropy_floor", c.entropy_floor},
                           {"history_stride", c.history_stride},
                           {"theta_steps_per_omega_step", c.theta_steps_per_omega_step},
                           {"standardize", c.standardize}};
  j["lr_omega_per_example"] = c.lr_omega_per_example ? nlohmann::ordered_json(*c.lr_omega_per_example) : nullptr;
  return j;
}

inline nlohmann::ordered_json to_json(const DownstreamConfig& c) {
  return {{"hidden_units", c.hidden_units}, {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"epochs", c.epochs},             {"batch_size", c.batch_size},       {"seed", c.seed}};
}

/// Everything that determines row values; the grid itself and `jobs` are excluded.
inline nlohmann::ordered_json computation_json(const ExperimentConfig& c) {
  return {{"experiment", to_string(c.kind)},   {"threshold", c.threshold},
          {"scheme", to_string(c.scheme)},     {"color_seed", c.color_seed},
          {"estimator", to_json(c.estimator)}, {"repair", to_json(c.repair)},
          {"repair_epochs", c.repair_epochs},  {"downstream", to_json(c.downstream)}};
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  auto j = computation_json(c);
  j["sigmas"] = c.sigmas;
  j["seeds"] = c.seeds;
  j["strategies"] = c.strategies;
  j["rates"] = c.rates;
  j["jobs"] = c.jobs;
  return j;
}

// ---------------------------------------------------------------------------
// Results table

struct ResultRow {
  double sigma = 0;
  std::string strategy;
  double rate = 1;
  std::uint64_t seed = 0;
  double train_bias = 0;
  std::optional<double> acc_biased;
  std::optional<double> acc_unbiased;

  auto key() const { return std::make_tuple(sigma, strategy, rate, seed); }
};

inline constexpr std::string_view kResultsHeader = "sigma,strategy,rate,seed,train_bias,acc_biased,acc_unbiased";

inline void write_result_row(std::ostream& out, const ResultRow& r) {
  out << format_double(r.sigma) << ',' << r.strategy << ',' << format_double(r.rate) << ',' << r.seed << ','
      << format_double17(r.train_bias) << ',' << (r.acc_biased ? format_double17(*r.acc_biased) : "") << ','
      << (r.acc_unbiased ? format_double17(*r.acc_unbiased) : "") << '\n';
}

/// Rows sorted by (sigma, strategy, rate, seed).
inline void write_results_csv(std::ostream& out, std::vector<ResultRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
  out << kResultsHeader << '\n';
  for (const auto& r : rows) write_result_row(out, r);
}

struct ParsedResults {
  std::vector<ResultRow> rows;
  std::size_t rejected = 0;  // malformed or duplicate lines
};

inline std::optional<ResultRow> parse_result_row(std::string_view line) {
  const auto cells = io_detail::split(line);
  if (cells.size() != 7) return std::nullopt;
  ResultRow r;
  const auto sigma = io_detail::parse_double(cells[0]);
  const auto rate = io_detail::parse_double(cells[2]);
  const auto seed = io_detail::parse_int(cells[3]);
  const auto bias = io_detail::parse_double(cells[4]);
  if (!sigma || !rate || !seed || *seed < 0 || !bias || !std::isfinite(*bias)) return std::nullopt;
  r.sigma = *sigma;
  r.strategy = std::string(cells[1]);
  if (r.strategy != kNoResampling) {
    try {
      parse_strategy(r.strategy);
    } catch (const InputError&) {
      return std::nullopt;
    }
  }
  r.rate = *rate;
  r.seed = static_cast<std::uint64_t>(*seed);
  r.train_bias = *bias;
  for (auto [cell, slot] : {std::pair{cells[5], &r.acc_biased}, std::pair{cells[6], &r.acc_unbiased}}) {
    if (cell.empty()) continue;
    const auto v = io_detail::parse_double(cell);
    if (!v || !(*v >= 0 && *v <= 1)) return std::nullopt;
    *slot = *v;
  }
  return r;
}

/// Lenient parser for resuming: malformed lines and repeated keys are dropped and counted.
inline ParsedResults parse_results_csv(std::string_view text) {
  ParsedResults out;
  const auto all = io_detail::lines(text);
  std::set<std::tuple<double, std::string, double, std::uint64_t>> seen;
  for (std::size_t k = 0; k < all.size(); ++k) {
    const auto line = all[k];
    if (line.empty()) continue;
    if (k == 0 && line == kResultsHeader) continue;
    const auto row = parse_result_row(line);
    if (!row || !seen.insert(row->key()).second) {
      ++out.rejected;
      continue;
    }
    out.rows.push_back(*row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid cells

struct Cell {
  std::string strategy;
  double rate = 1;
};

/// Cells of one (sigma, seed) group. `rate` is the strategy's parameter: the
/// keep fraction for rank, cls_rank and uniform, the threshold for threshold,
/// and 1 for sample and none.
inline std::vector<Cell> group_cells(const ExperimentConfig& c) {
  std::vector<Cell> cells;
  for (const auto& s : c.strategies) {
    if (s == kNoResampling || s == "sample") {
      cells.push_back({s, 1.0});
    } else if (s == "threshold") {
      cells.push_back({s, c.threshold});
    } else {
      for (double r : c.rates) cells.push_back({s, r});
    }
  }
  return cells;
}

inline bool needs_repair_weights(std::string_view strategy) {
  return strategy == "threshold" || strategy == "rank" || strategy == "cls_rank" || strategy == "sample";
}

struct ExperimentSummary {
  std::vector<ResultRow> rows;  // every row of the grid, sorted
  std::size_t computed_cells = 0;
  std::size_t reused_cells = 0;
  std::size_t rejected_rows = 0;
  std::filesystem::path results_path;
};

namespace experiment_detail {

inline std::string cell_key(double sigma, const std::string& strategy, double rate, std::uint64_t seed) {
  return format_double(sigma) + "|" + strategy + "|" + format_double(rate) + "|" + std::to_string(seed);
}

inline ColorSpec color_spec(const ExperimentConfig& c, double sigma, std::uint64_t seed) {
  return ColorSpec{make_color_means(kMnistClasses, c.color_seed, c.scheme), sigma, seed};
}

inline EstimatorConfig estimator_for(const ExperimentConfig& c, std::uint64_t seed) {
  auto e = c.estimator;
  e.seed = mix_seed(c.estimator.seed, seed);
  return e;
}

/// REPAIR weights over the combined (train then test) color features, cached
/// on disk under a key covering every input that affects them.
inline std::vector<double> repair_weights(const ExperimentConfig& c, const MnistSource& src, const FeatureDataset& combined,
                                          double sigma, std::uint64_t seed, const std::filesystem::path& cache_dir) {
  auto rc = c.repair;
  rc.seed = seed;
  rc.iterations = RepairConfig::iterations_for_epochs(c.repair_epochs, combined.size(), rc.batch_size);
  rc.history_stride = std::max(1, rc.iterations / 50);
  const nlohmann::ordered_json key{{"source", src.digest}, {"scheme", to_string(c.scheme)},
                                   {"color_seed", c.color_seed}, {"sigma", sigma},
                                   {"seed", seed}, {"repair", to_json(rc)}};
  const auto stem = "sigma=" + format_double(sigma) + "_seed=" + std::to_string(seed) + "_" +
                    sha256_hex(key.dump()).substr(0, 16);
  const auto path = cache_dir / (stem + ".weights.csv");
  if (std::filesystem::exists(path)) {
    try {
      return load_weights(path, combined).weights();
    } catch (const InputError& e) {
      warn("recomputing REPAIR weights: cached file unusable (" + std::string(e.what()) + ")");
    }
  }
  const auto result = repair_run(combined, rc);
  if (result.aborted) warn("REPAIR run sigma=" + format_double(sigma) + " seed=" + std::to_string(seed) +
                           " aborted: " + result.abort_reason);
  {
    auto out = io_detail::open_for_write(cache_dir / (stem + ".history.csv"));
    write_history_csv(out, result.history);
  }
  const auto tmp = cache_dir / (stem + ".weights.csv.tmp");
  save_weights(result.weights, combined.ids(), tmp);
  std::filesystem::rename(tmp, path);
  return result.weights.weights();
}

inline ResamplePlan plan_for(const Cell& cell, const ExperimentConfig& c, std::span<const double> weights,
                             const FeatureDataset& combined, std::uint64_t seed) {
  ResampleParams params;
  params.threshold = c.threshold;
  params.keep_fraction = cell.rate;
  if (cell.strategy == "threshold") params.threshold = cell.rate;
  const auto strategy = parse_strategy(cell.strategy);
  const std::vector<double> ones(combined.size(), 1.0);
  const auto w = needs_repair_weights(cell.strategy) ? weights : std::span<const double>(ones);
  return resample(w, combined.labels(), strategy, params, mix_seed(seed, 7), combined.class_count());
}

struct Shared {
  const ExperimentConfig& config;
  const MnistSource& source;
  std::filesystem::path cache_dir;
  std::optional<FeatureDataset> gray_test;  // generalization only
};

inline std::vector<ResultRow> run_group(const Shared& sh, double sigma, std::uint64_t seed,
                                        const std::vector<Cell>& cells) {
  const auto& c = sh.config;
  const auto spec = color_spec(c, sigma, seed);
  const auto est = estimator_for(c, seed);
  std::vector<ResultRow> rows;
  const auto make_row = [&](const Cell& cell, double bias) {
    ResultRow r;
    r.sigma = sigma;
    r.strategy = cell.strategy;
    r.rate = cell.rate;
    r.seed = seed;
    r.train_bias = bias;
    return r;
  };

  if (c.kind == ExperimentKind::kBiasVsSigma) {
    const auto phi = colorized_color_feature(sh.source.test, kMnistPixels, spec, 1);
    const double bias = measure_bias(phi, est).bias;
    for (const auto& cell : cells) rows.push_back(make_row(cell, bias));
    return rows;
  }

  const auto phi_train = colorized_color_feature(sh.source.train, kMnistPixels, spec, 0);
  const auto phi_test = colorized_color_feature(sh.source.test, kMnistPixels, spec, 1);
  const auto combined = concat(phi_train, phi_test);
  std::vector<double> weights;
  if (std::any_of(cells.begin(), cells.end(), [](const Cell& x) { return needs_repair_weights(x.strategy); })) {
    weights = repair_weights(c, sh.source, combined, sigma, seed, sh.cache_dir);
  }

  if (c.kind == ExperimentKind::kRepairVsUniform) {
    for (const auto& cell : cells) {
      if (cell.strategy == kNoResampling) {
        rows.push_back(make_row(cell, measure_bias(combined, est).bias));
        continue;
      }
      const auto plan = plan_for(cell, c, weights, combined, seed);
      rows.push_back(make_row(cell, measure_bias(subset(combined, plan), est).bias));
    }
    return rows;
  }

  // Generalization: train on the train-origin part of each (resampled) set.
  const auto colored_test = colorize(sh.source.test, kMnistPixels, spec, 1);
  const std::size_t n_train = sh.source.train.size();
  for (const auto& cell : cells) {
    std::vector<std::size_t> train_rows;
    if (cell.strategy == kNoResampling) {
      train_rows.resize(n_train);
      std::iota(train_rows.begin(), train_rows.end(), std::size_t{0});
    } else {
      const auto plan = plan_for(cell, c, weights, combined, seed);
      for (auto i : plan.retained) {
        if (i < n_train) train_rows.push_back(i);
      }
    }
    const auto train_phi = subset(phi_train, train_rows);
    const auto train_colored = colorize_rows(sh.source.train, kMnistPixels, spec, 0, train_rows);
    auto dc = c.downstream;
    dc.seed = mix_seed(c.downstream.seed, seed);
    const auto model = train_downstream(train_colored, dc);
    auto row = make_row(cell, measure_bias(train_phi, est).bias);
    row.acc_biased = evaluate_accuracy(model.classifier, colored_test);
    row.acc_unbiased = evaluate_accuracy(model.classifier, *sh.gray_test);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace experiment_detail

/// Runs every missing cell of the grid and maintains `<out_dir>/results.csv`.
/// Rows already present (computed under the same configuration) are reused;
/// malformed rows are dropped and recomputed. The file is rewritten in sorted
/// order at the end, so its bytes do not depend on jobs or interruption.
/// REPAIR weights are cached in `weight_cache` (default `<out_dir>/weights`);
/// experiments sharing a cache reuse each other's runs.
inline ExperimentSummary run_experiment(const ExperimentConfig& config, const MnistSource& source,
                                        const std::filesystem::path& out_dir,
                                        const std::filesystem::path& weight_cache = {}) {
  config.validate();
  namespace fs = std::filesystem;
  ExperimentSummary summary;
  summary.results_path = out_dir / "results.csv";
  const auto fingerprint_path = out_dir / "results.fingerprint";
  auto computation = computation_json(config);
  computation["source"] = source.digest;
  const std::string fingerprint = sha256_hex(computation.dump());

  std::vector<ResultRow> kept;
  if (fs::exists(summary.results_path)) {
    const bool same = fs::exists(fingerprint_path) &&
                      io_detail::read_file(fingerprint_path).substr(0, fingerprint.size()) == fingerprint;
    if (same) {
      auto parsed = parse_results_csv(io_detail::read_file(summary.results_path));
      summary.rejected_rows = parsed.rejected;
      if (parsed.rejected > 0) {
        warn(std::to_string(parsed.rejected) + " malformed or duplicate result rows dropped; their cells are recomputed");
      }
      kept = std::move(parsed.rows);
    } else {
      warn("existing " + summary.results_path.string() + " was produced by a different configuration; starting over");
    }
  }
  {
    auto out = io_detail::open_for_write(fingerprint_path);
    out << fingerprint << '\n';
  }
  {
    auto out = io_detail::open_for_write(summary.results_path);
    write_results_csv(out, kept);
  }

  std::map<std::string, ResultRow> done;
  for (const auto& r : kept) done.emplace(experiment_detail::cell_key(r.sigma, r.strategy, r.rate, r.seed), r);

  struct Group {
    double sigma;
    std::uint64_t seed;
    std::vector<Cell> missing;
  };
  std::vector<Group> groups;
  const auto cells = group_cells(config);
  for (double sigma : config.sigmas) {
    for (auto seed : config.seeds) {
      Group g{sigma, seed, {}};
      for (const auto& cell : cells) {
        if (done.count(experiment_detail::cell_key(sigma, cell.strategy, cell.rate, seed))) {
          ++summary.reused_cells;
        } else {
          g.missing.push_back(cell);
        }
      }
      if (!g.missing.empty()) groups.push_back(std::move(g));
    }
  }

  experiment_detail::Shared shared{config, source, weight_cache.empty() ? out_dir / "weights" : weight_cache,
                                   std::nullopt};
  if (config.kind == ExperimentKind::kGeneralization && !groups.empty()) {
    shared.gray_test = replicate_channels(source.test);
  }

  std::mutex mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::ofstream append(summary.results_path, std::ios::binary | std::ios::app);
  const auto worker = [&] {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= groups.size()) return;
      {
        std::lock_guard lock(mutex);
        if (failure) return;
      }
      try {
        const auto rows = experiment_detail::run_group(shared, groups[k].sigma, groups[k].seed, groups[k].missing);
        std::lock_guard lock(mutex);
        for (const auto& r : rows) {
          write_result_row(append, r);
          done.emplace(experiment_detail::cell_key(r.sigma, r.strategy, r.rate, r.seed), r);
          ++summary.computed_cells;
        }
        append.flush();
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int threads = std::min<int>(config.jobs, static_cast<int>(std::max<std::size_t>(groups.size(), 1)));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  append.close();
  if (failure) std::rethrow_exception(failure);

  std::vector<ResultRow> all;
  for (const auto& [key, row] : done) all.push_back(row);
  {
    auto out = io_detail::open_for_write(summary.results_path);
    write_results_csv(out, all);
  }
  for (double sigma : config.sigmas) {
    for (auto seed : config.seeds) {
      for (const auto& cell : cells) {
        summary.rows.push_back(done.at(experiment_detail::cell_key(sigma, cell.strategy, cell.rate, seed)));
      }
    }
  }
  std::sort(summary.rows.begin(), summary.rows.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
  return summary;
}

}  // namespace repair
