#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "repair/batching.hpp"
#include "repair/bias_meter.hpp"
#include "repair/dataset.hpp"
#include "repair/errors.hpp"
#include "repair/io.hpp"
#include "repair/softmax.hpp"

namespace repair {

inline constexpr double kDefaultEntropyFloor = 1e-6;

/// r_i = w_i / mean(w over the batch), so that mean(r) = 1.
inline std::vector<double> minibatch_rescale(std::span<const double> omega,
                                             std::span<const std::size_t> batch) {
  if (batch.empty()) throw InputError("mini-batch is empty");
  std::vector<double> r(batch.size());
  double total = 0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    r[k] = sigmoid(omega[batch[k]]);
    total += r[k];
  }
  if (!(total > 0)) throw NumericError("mini-batch carries zero weight mass");
  const double mean = total / static_cast<double>(batch.size());
  for (auto& x : r) x /= mean;
  return r;
}

namespace solver_detail {

/// Everything needed to evaluate the ratio objective and its gradients on
/// one index set, computed from batch-aligned inputs. Sums use the rescaled
/// weights r_i = w_i / mean(w), so their magnitudes do not depend on the
/// overall weight scale; the ratio is the same as with raw w.
struct BatchTerms {
  Matrix probs;                      // |S| x C
  std::vector<double> r;             // w_i / mean(w)
  std::vector<double> log_prob;      // log max(P(y_i|x_i), floor)
  std::vector<double> log_prior;     // log p'_{y_i}
  std::vector<double> class_mass;    // sum_{i in S, y_i = y} r_i
  double mass = 0;                   // sum_{i in S} w_i
  double numerator = 0;              // sum r_i log P(y_i | x_i)
  double denominator = 0;            // sum r_i log p'_{y_i}
  double value = 0;                  // 1 - numerator / denominator
  double risk = 0;                   // -(1/|S|) sum r_i log P
  double entropy = 0;                // -(1/|S|) sum r_i log p'
  bool degenerate = false;
};

inline BatchTerms evaluate(const Matrix& x, std::span<const int> labels, std::span<const double> w,
                           const SoftmaxClassifier& theta, int class_count, double entropy_floor) {
  BatchTerms t;
  const std::size_t m = labels.size();
  for (double wi : w) t.mass += wi;
  if (!(t.mass > 0) || !std::isfinite(t.mass)) throw NumericError("index set carries zero weight mass");
  const double mean_w = t.mass / static_cast<double>(m);
  t.probs = forward(theta, x);
  t.r.resize(m);
  t.class_mass.assign(static_cast<std::size_t>(class_count), 0.0);
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    t.r[i] = w[i] / mean_w;
    t.class_mass[static_cast<std::size_t>(labels[i])] += t.r[i];
    total += t.r[i];
  }
  t.log_prob.resize(m);
  t.log_prior.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    t.log_prob[i] = std::log(std::max(t.probs(static_cast<Index>(i), labels[i]), kProbabilityFloor));
    const double my = t.class_mass[static_cast<std::size_t>(labels[i])];
    // r_i can underflow to 0 for saturated weights; such members contribute 0 log 0 = 0.
    t.log_prior[i] = my > 0 ? std::log(my) - std::log(total) : 0.0;
    t.numerator += t.r[i] * t.log_prob[i];
    t.denominator += t.r[i] * t.log_prior[i];
  }
  t.risk = -t.numerator / static_cast<double>(m);
  t.entropy = -t.denominator / static_cast<double>(m);
  t.degenerate = std::abs(t.denominator) < entropy_floor;
  t.value = t.degenerate ? 0.0 : 1.0 - t.numerator / t.denominator;
  return t;
}

/// dV/dtheta = -(1/D) * d(numerator)/dtheta.
inline SoftmaxGradient theta_gradient(const BatchTerms& t, const Matrix& x, std::span<const int> labels) {
  // d(-numerator)/dtheta is the cross-entropy gradient with coefficients r_i.
  auto g = cross_entropy_gradient_from_probs(t.probs, x, labels, t.r);
  g.W /= t.denominator;
  g.b /= t.denominator;
  return g;
}

/// dV/domega_i for every index-set member, through w_i = sigmoid(omega_i) and
/// through p'_y(w) in the denominator. V is scale invariant in w, so
/// dV/dw_i = (1/mean w) * dV/dr_i and the chain factor w_i (1 - w_i) / mean w
/// becomes r_i (1 - w_i).
inline std::vector<double> omega_gradient(const BatchTerms& t, std::span<const int> labels,
                                          std::span<const double> w) {
  const double D = t.denominator;
  const double A = t.numerator;
  // sum_y M_y * d(log p'_y)/dr_i = sum_{y: M_y > 0} M_y (delta_{y,y_i}/M_y - 1/M). This is
  // 1 - sum_y M_y / M for every i.
  double occupied = 0, total = 0;
  for (double my : t.class_mass) occupied += my;
  for (double ri : t.r) total += ri;
  const double prior_chain = 1.0 - occupied / total;

  std::vector<double> g(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double dD = t.log_prior[i] + prior_chain;
    const double dA = t.log_prob[i];
    const double dV_dr = -dA / D + A * dD / (D * D);
    g[i] = dV_dr * t.r[i] * (1.0 - w[i]);
  }
  return g;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

struct Gathered {
  Matrix x;
  std::vector<int> labels;
  std::vector<double> w;
};

inline Gathered gather(const FeatureDataset& dataset, std::span<const double> omega,
                       std::span<const std::size_t> batch) {
  if (omega.size() != dataset.size()) {
    throw InputError("omega has " + std::to_string(omega.size()) + " entries for " +
                     std::to_string(dataset.size()) + " examples");
  }
  Gathered g;
  g.x = gather_rows(dataset.features(), batch);
  g.labels.resize(batch.size());
  g.w.resize(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    if (batch[k] >= dataset.size()) throw InputError("batch index out of range");
    g.labels[k] = dataset.labels()[batch[k]];
    g.w[k] = sigmoid(omega[batch[k]]);
  }
  return g;
}

}  // namespace solver_detail

struct ObjectiveValue {
  double value = 0;
  double numerator = 0;
  double denominator = 0;
  double risk = 0;
  double entropy = 0;
  bool degenerate = false;
};

/// Evaluates V(w, theta) = 1 - sum w_i log P(y_i|x_i) / sum w_i log p'_{y_i}
/// over `batch` (all examples when empty) without throwing on degeneracy.
inline ObjectiveValue evaluate_objective(const FeatureDataset& dataset, std::span<const double> omega,
                                         const SoftmaxClassifier& theta,
                                         std::span<const std::size_t> batch = {},
                                         double entropy_floor = kDefaultEntropyFloor) {
  const auto all = batch.empty() ? solver_detail::all_indices(dataset.size()) : std::vector<std::size_t>{};
  const auto idx = batch.empty() ? std::span<const std::size_t>(all) : batch;
  if (idx.empty()) throw InputError("objective over an empty index set");
  const auto g = solver_detail::gather(dataset, omega, idx);
  const auto t = solver_detail::evaluate(g.x, g.labels, g.w, theta, dataset.class_count(), entropy_floor);
  return {t.value, t.numerator, t.denominator, t.risk, t.entropy, t.degenerate};
}

/// V(w, theta); throws NumericError when |sum w_i log p'_{y_i}| < entropy_floor.
inline double objective(const FeatureDataset& dataset, std::span<const double> omega,
                        const SoftmaxClassifier& theta, std::span<const std::size_t> batch = {},
                        double entropy_floor = kDefaultEntropyFloor) {
  const auto v = evaluate_objective(dataset, omega, theta, batch, entropy_floor);
  if (v.degenerate) {
    throw NumericError("objective denominator below the entropy floor: weight is concentrated on one class");
  }
  return v.value;
}

/// Analytic dV/dtheta over the index set.
inline SoftmaxGradient grad_theta(const FeatureDataset& dataset, std::span<const double> omega,
                                  const SoftmaxClassifier& theta, std::span<const std::size_t> batch = {},
                                  double entropy_floor = kDefaultEntropyFloor) {
  const auto all = batch.empty() ? solver_detail::all_indices(dataset.size()) : std::vector<std::size_t>{};
  const auto idx = batch.empty() ? std::span<const std::size_t>(all) : batch;
  const auto g = solver_detail::gather(dataset, omega, idx);
  const auto t = solver_detail::evaluate(g.x, g.labels, g.w, theta, dataset.class_count(), entropy_floor);
  if (t.degenerate) throw NumericError("objective denominator below the entropy floor");
  return solver_detail::theta_gradient(t, g.x, g.labels);
}

/// Analytic dV/domega, length n; zero outside the index set.
inline std::vector<double> grad_omega(const FeatureDataset& dataset, std::span<const double> omega,
                                      const SoftmaxClassifier& theta, std::span<const std::size_t> batch = {},
                                      double entropy_floor = kDefaultEntropyFloor) {
  const auto all = batch.empty() ? solver_detail::all_indices(dataset.size()) : std::vector<std::size_t>{};
  const auto idx = batch.empty() ? std::span<const std::size_t>(all) : batch;
  const auto g = solver_detail::gather(dataset, omega, idx);
  const auto t = solver_detail::evaluate(g.x, g.labels, g.w, theta, dataset.class_count(), entropy_floor);
  if (t.degenerate) throw NumericError("objective denominator below the entropy floor");
  const auto local = solver_detail::omega_gradient(t, g.labels, g.w);
  std::vector<double> out(dataset.size(), 0.0);
  for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] += local[k];
  return out;
}

struct RepairConfig {
  double lr_theta = 1e-3;
  double lr_omega = 10.0;
  // When set, the omega rate is this value times the dataset size.
  std::optional<double> lr_omega_per_example;
  int iterations = 2000;
  int batch_size = 256;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;  // on W during the theta ascent
  double entropy_floor = kDefaultEntropyFloor;
  int history_stride = 100;
  int theta_steps_per_omega_step = 1;
  bool standardize = true;

  double resolved_lr_omega(std::size_t n) const {
    return lr_omega_per_example ? *lr_omega_per_example * static_cast<double>(n) : lr_omega;
  }

  /// Iteration count equivalent to `epochs` passes over n examples.
  static int iterations_for_epochs(double epochs, std::size_t n, int batch_size) {
    const double per_epoch = std::ceil(static_cast<double>(n) / std::max(batch_size, 1));
    return static_cast<int>(std::llround(epochs * per_epoch));
  }

  void validate() const {
    if (!(lr_theta > 0)) throw InputError("theta learning rate must be positive");
    if (!(lr_omega >= 0) || (lr_omega_per_example && !(*lr_omega_per_example >= 0))) {
      throw InputError("omega learning rate must be nonnegative");
    }
    if (iterations < 0) throw InputError("iterations must be nonnegative");
    if (batch_size < 1) throw InputError("batch size must be positive");
    if (!(weight_decay >= 0)) throw InputError("weight decay must be nonnegative");
    if (!(entropy_floor > 0)) throw InputError("entropy floor must be positive");
    if (history_stride < 1) throw InputError("history stride must be positive");
    if (theta_steps_per_omega_step < 1) throw InputError("theta steps per omega step must be positive");
  }
};

struct RepairHistoryEntry {
  int step = 0;
  double objective = 0;
  double risk = 0;
  double entropy = 0;
  double mean_w = 0;
  double frac_above_half = 0;
};

struct RepairHistory {
  std::vector<RepairHistoryEntry> entries;
  int skipped_omega_updates = 0;
};

struct RepairResult {
  ExampleWeights weights;
  SoftmaxClassifier classifier;  // in raw feature space
  RepairHistory history;
  bool aborted = false;
  std::string abort_reason;
};

/// Alternating minimax solver: per mini-batch, ascent on theta then descent on
/// the batch's omega. Holds all mutable state of one run.
class RepairSolver {
 public:
  RepairSolver(const FeatureDataset& dataset, RepairConfig config)
      : config_(std::move(config)),
        labels_(dataset.labels().begin(), dataset.labels().end()),
        class_count_(dataset.class_count()),
        omega_(dataset.size(), 0.0) {
    config_.validate();
    if (dataset.empty()) throw InputError("REPAIR needs a nonempty dataset");
    if (weighted_entropy(labels_, class_count_) <= 1e-12) {
      throw InputError("label entropy is zero (a single class); REPAIR is undefined");
    }
    standardizer_ = config_.standardize ? Standardizer::fit(dataset.features())
                                        : Standardizer::identity(dataset.dim());
    x_ = config_.standardize ? standardizer_.apply(dataset.features()) : dataset.features();
    theta_ = SoftmaxClassifier::zeros(class_count_, dataset.dim());
    lr_omega_ = config_.resolved_lr_omega(dataset.size());
    sampler_.emplace(dataset.size(), static_cast<std::size_t>(config_.batch_size), config_.seed);
    log_state();
  }

  bool done() const { return aborted_ || step_ >= config_.iterations; }
  int steps_taken() const { return step_; }
  bool aborted() const { return aborted_; }
  const RepairHistory& history() const { return history_; }
  std::span<const double> omega() const { return omega_; }

  /// One mini-batch iteration. Returns false once the run is finished or aborted.
  bool step() {
    if (done()) return false;
    try {
      return step_impl();
    } catch (const NumericError& e) {
      return abort(e.what());
    }
  }

  void run() {
    while (step()) {
    }
  }

  RepairResult finish() const {
    RepairResult out;
    out.weights = ExampleWeights(omega_);
    out.classifier = standardizer_.to_raw(theta_);
    out.history = history_;
    out.aborted = aborted_;
    out.abort_reason = abort_reason_;
    return out;
  }

 private:
  bool step_impl() {
    const auto batch = sampler_->next();
    const Matrix xb = gather_rows(x_, batch);
    std::vector<int> yb(batch.size());
    std::vector<double> wb(batch.size());
    for (std::size_t k = 0; k < batch.size(); ++k) {
      yb[k] = labels_[batch[k]];
      wb[k] = sigmoid(omega_[batch[k]]);
    }

    for (int s = 0; s < config_.theta_steps_per_omega_step; ++s) {
      const auto t = solver_detail::evaluate(xb, yb, wb, theta_, class_count_, config_.entropy_floor);
      if (t.degenerate) break;
      const auto g = solver_detail::theta_gradient(t, xb, yb);
      theta_.W += config_.lr_theta * (g.W - config_.weight_decay * theta_.W);
      theta_.b += config_.lr_theta * g.b;
    }

    const auto t = solver_detail::evaluate(xb, yb, wb, theta_, class_count_, config_.entropy_floor);
    if (t.degenerate) {
      ++history_.skipped_omega_updates;
    } else if (!std::isfinite(t.value)) {
      return abort("objective became non-finite at step " + std::to_string(step_ + 1));
    } else if (lr_omega_ != 0) {
      const auto g = solver_detail::omega_gradient(t, yb, wb);
      for (std::size_t k = 0; k < batch.size(); ++k) {
        const double next = omega_[batch[k]] - lr_omega_ * g[k];
        if (!std::isfinite(next)) {
          return abort("omega became non-finite at step " + std::to_string(step_ + 1));
        }
        omega_[batch[k]] = next;
      }
    }
    if (!theta_.W.allFinite() || !theta_.b.allFinite()) {
      return abort("estimator parameters became non-finite at step " + std::to_string(step_ + 1));
    }
    ++step_;
    if (step_ % config_.history_stride == 0 || step_ == config_.iterations) {
      if (!log_state()) return false;
    }
    return !done();
  }

  bool abort(std::string reason) {
    aborted_ = true;
    abort_reason_ = std::move(reason);
    return false;
  }

  bool log_state() {
    std::vector<double> w(omega_.size());
    std::transform(omega_.begin(), omega_.end(), w.begin(), sigmoid);
    const auto t = solver_detail::evaluate(x_, labels_, w, theta_, class_count_, config_.entropy_floor);
    if (!t.degenerate && !std::isfinite(t.value)) {
      return abort("objective became non-finite at step " + std::to_string(step_));
    }
    RepairHistoryEntry e;
    e.step = step_;
    e.objective = t.value;
    e.risk = t.risk;
    e.entropy = t.entropy;
    e.mean_w = t.mass / static_cast<double>(w.size());
    e.frac_above_half =
        static_cast<double>(std::count_if(w.begin(), w.end(), [](double v) { return v > 0.5; })) /
        static_cast<double>(w.size());
    history_.entries.push_back(e);
    return true;
  }

  RepairConfig config_;
  std::vector<int> labels_;
  int class_count_;
  Standardizer standardizer_;
  Matrix x_;
  SoftmaxClassifier theta_;
  std::vector<double> omega_;
  double lr_omega_ = 0;
  std::optional<BatchSampler> sampler_;
  RepairHistory history_;
  int step_ = 0;
  bool aborted_ = false;
  std::string abort_reason_;
};

/// Runs REPAIR from omega = 0, theta = 0 for config.iterations mini-batches.
inline RepairResult repair_run(const FeatureDataset& dataset, const RepairConfig& config) {
  RepairSolver solver(dataset, config);
  solver.run();
  return solver.finish();
}

inline void write_history_csv(std::ostream& out, const RepairHistory& history) {
  out << "step,V,risk,entropy,mean_w,frac_above_half\n";
  for (const auto& e : history.entries) {
    out << e.step << ',' << format_double17(e.objective) << ',' << format_double17(e.risk) << ','
        << format_double17(e.entropy) << ',' << format_double17(e.mean_w) << ','
        << format_double17(e.frac_above_half) << '\n';
  }
}

}  // namespace repair
