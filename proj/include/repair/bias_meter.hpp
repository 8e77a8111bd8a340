#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "repair/batching.hpp"
#include "repair/dataset.hpp"
#include "repair/errors.hpp"
#include "repair/io.hpp"
#include "repair/softmax.hpp"

namespace repair {

// Weight arguments below are raw nonnegative example weights; an empty span
// means every example counts once.

namespace bias_detail {

/// Weights rescaled by their maximum. Ratios are unchanged, and constant weight
/// vectors become exactly 1 so weighted and unweighted sums agree bit for bit.
inline std::vector<double> normalized_weights(std::span<const double> weights, std::size_t n) {
  if (weights.empty()) return std::vector<double>(n, 1.0);
  if (weights.size() != n) {
    throw InputError("expected " + std::to_string(n) + " weights, got " + std::to_string(weights.size()));
  }
  double top = 0;
  for (double w : weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw InputError("weights must be finite and nonnegative");
    top = std::max(top, w);
  }
  if (top <= 0) throw InputError("all example weights are zero");
  std::vector<double> out(weights.begin(), weights.end());
  for (auto& w : out) w /= top;
  return out;
}

}  // namespace bias_detail

/// p'_y = sum_{i: y_i = y} w_i / sum_i w_i.
inline std::vector<double> weighted_class_frequencies(std::span<const int> labels, int class_count,
                                                      std::span<const double> weights = {}) {
  if (labels.empty()) throw InputError("class frequencies of an empty label set");
  const auto w = bias_detail::normalized_weights(weights, labels.size());
  std::vector<double> mass(static_cast<std::size_t>(class_count), 0.0);
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    mass[static_cast<std::size_t>(labels[i])] += w[i];
    total += w[i];
  }
  for (auto& m : mass) m /= total;
  return mass;
}

/// H(Y') = -sum_y p'_y log p'_y in nats, with 0 log 0 = 0.
inline double weighted_entropy(std::span<const int> labels, int class_count,
                               std::span<const double> weights = {}) {
  const auto p = weighted_class_frequencies(labels, class_count, weights);
  double h = 0;
  for (double py : p) {
    if (py > 0) h -= py * std::log(py);
  }
  return std::max(h, 0.0);
}

/// -sum_i (w_i / sum w) log max(P(y_i | x_i), 1e-12), in nats per example.
inline double weighted_risk(const SoftmaxClassifier& clf, const FeatureDataset& dataset,
                            std::span<const double> weights = {}) {
  if (dataset.empty()) throw InputError("risk of an empty dataset");
  const auto w = bias_detail::normalized_weights(weights, dataset.size());
  const auto logp = correct_class_log_probs(clf, dataset.features(), dataset.labels());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    num -= w[i] * logp[i];
    den += w[i];
  }
  return num / den;
}

/// Analytic gradient of weighted_risk with respect to (W, b).
inline SoftmaxGradient weighted_risk_gradient(const SoftmaxClassifier& clf, const FeatureDataset& dataset,
                                              std::span<const double> weights = {}) {
  auto w = bias_detail::normalized_weights(weights, dataset.size());
  double total = 0;
  for (double x : w) total += x;
  for (auto& x : w) x /= total;
  return cross_entropy_gradient(clf, dataset.features(), dataset.labels(), w);
}

struct EstimatorConfig {
  double learning_rate = 0.5;
  int iterations = 2000;
  int batch_size = 256;
  double weight_decay = 1e-4;  // L2 on W only
  std::uint64_t seed = 0;
  std::vector<double> decay_sweep;  // when non-empty, overrides weight_decay
  // Train on per-column standardized features and map the result back. The
  // model family is unchanged because the classifier has an offset.
  bool standardize = true;

  void validate() const {
    if (!(learning_rate > 0)) throw InputError("estimator learning rate must be positive");
    if (iterations < 0) throw InputError("estimator iterations must be nonnegative");
    if (batch_size < 1) throw InputError("estimator batch size must be positive");
    if (!(weight_decay >= 0)) throw InputError("weight decay must be nonnegative");
    for (double l : decay_sweep) {
      if (!(l >= 0)) throw InputError("weight decay sweep values must be nonnegative");
    }
  }
};

/// The five decays of the measurement protocol, 1e-1 down to 1e-5.
inline std::vector<double> default_decay_sweep() { return {1e-1, 1e-2, 1e-3, 1e-4, 1e-5}; }

struct TrainedEstimator {
  SoftmaxClassifier classifier;
  std::vector<double> loss_history;  // regularized mini-batch loss per iteration
};

/// Mini-batch SGD on weighted cross-entropy + (lambda/2)||W||^2 from theta = 0.
inline TrainedEstimator train_bias_estimator(const FeatureDataset& dataset,
                                             std::span<const double> weights,
                                             const EstimatorConfig& config) {
  config.validate();
  if (dataset.size() < static_cast<std::size_t>(dataset.class_count())) {
    throw InputError("bias estimator needs at least C=" + std::to_string(dataset.class_count()) +
                     " examples, got " + std::to_string(dataset.size()));
  }
  const auto w = bias_detail::normalized_weights(weights, dataset.size());
  const auto standardizer =
      config.standardize ? Standardizer::fit(dataset.features()) : Standardizer::identity(dataset.dim());
  const Matrix x = config.standardize ? standardizer.apply(dataset.features()) : dataset.features();

  TrainedEstimator out;
  auto theta = SoftmaxClassifier::zeros(dataset.class_count(), dataset.dim());
  out.loss_history.reserve(static_cast<std::size_t>(config.iterations));
  if (config.iterations > 0) {
    BatchSampler sampler(dataset.size(), static_cast<std::size_t>(config.batch_size), config.seed);
    std::vector<int> yb;
    std::vector<double> ab;
    for (int t = 0; t < config.iterations; ++t) {
      const auto batch = sampler.next();
      const Matrix xb = gather_rows(x, batch);
      yb.resize(batch.size());
      ab.resize(batch.size());
      double mass = 0;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        yb[k] = dataset.labels()[batch[k]];
        ab[k] = w[batch[k]];
        mass += ab[k];
      }
      if (mass <= 0) continue;  // batch carries no weight
      for (auto& a : ab) a /= mass;

      const Matrix probs = forward(theta, xb);
      double loss = 0;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        loss -= ab[k] * std::log(std::max(probs(static_cast<Index>(k), yb[k]), kProbabilityFloor));
      }
      loss += 0.5 * config.weight_decay * theta.W.squaredNorm();
      if (!std::isfinite(loss)) {
        throw NumericError("bias estimator loss became non-finite at iteration " + std::to_string(t) +
                           " (learning rate too high?)");
      }
      out.loss_history.push_back(loss);

      auto grad = cross_entropy_gradient_from_probs(probs, xb, yb, ab);
      grad.W += config.weight_decay * theta.W;
      theta.W -= config.learning_rate * grad.W;
      theta.b -= config.learning_rate * grad.b;
    }
  }
  out.classifier = standardizer.to_raw(theta);
  if (!out.classifier.W.allFinite() || !out.classifier.b.allFinite()) {
    throw NumericError("bias estimator parameters became non-finite");
  }
  return out;
}

inline TrainedEstimator train_bias_estimator(const FeatureDataset& dataset, const EstimatorConfig& config) {
  return train_bias_estimator(dataset, {}, config);
}

struct DecayMeasurement {
  double weight_decay = 0;
  double risk = 0;
  double raw_bias = 0;
  double bias = 0;
};

struct BiasReport {
  double risk = 0;      // nats/example, of the best run
  double entropy = 0;   // nats/example
  double bias = 0;      // clamp(raw_bias, 0, 1)
  double raw_bias = 0;  // 1 - risk / entropy
  double zero_risk = 0; // risk of the theta = 0 predictor, for monitoring
  EstimatorConfig config;
  std::vector<DecayMeasurement> per_decay;
};

/// Trains one estimator per weight decay and reports the largest bias
/// 1 - risk / H(Y'), clamped to [0, 1].
inline BiasReport measure_bias(const FeatureDataset& dataset, std::span<const double> weights,
                               const EstimatorConfig& config) {
  config.validate();
  BiasReport report;
  report.config = config;
  report.entropy = weighted_entropy(dataset.labels(), dataset.class_count(), weights);
  if (report.entropy <= 1e-12) {
    throw InputError("label entropy is zero (a single effective class); bias is undefined");
  }
  report.zero_risk = std::log(static_cast<double>(dataset.class_count()));

  const auto decays = config.decay_sweep.empty() ? std::vector<double>{config.weight_decay} : config.decay_sweep;
  bool first = true;
  for (double decay : decays) {
    EstimatorConfig run = config;
    run.weight_decay = decay;
    run.decay_sweep.clear();
    const auto fit = train_bias_estimator(dataset, weights, run);
    DecayMeasurement m;
    m.weight_decay = decay;
    m.risk = weighted_risk(fit.classifier, dataset, weights);
    if (m.risk > report.zero_risk + 1e-6) {
      warn("bias estimator (decay " + format_double(decay) + ") ended with risk " + format_double(m.risk) +
           " above the zero-classifier risk " + format_double(report.zero_risk));
    }
    m.raw_bias = 1.0 - m.risk / report.entropy;
    m.bias = std::clamp(m.raw_bias, 0.0, 1.0);
    report.per_decay.push_back(m);
    if (first || m.raw_bias > report.raw_bias) {
      report.raw_bias = m.raw_bias;
      report.risk = m.risk;
      first = false;
    }
  }
  report.bias = std::clamp(report.raw_bias, 0.0, 1.0);
  return report;
}

inline BiasReport measure_bias(const FeatureDataset& dataset, const EstimatorConfig& config) {
  return measure_bias(dataset, {}, config);
}

inline KeyValueRecord to_key_values(const BiasReport& report) {
  std::string sweep;
  for (std::size_t i = 0; i < report.config.decay_sweep.size(); ++i) {
    sweep += (i ? "," : "") + format_double(report.config.decay_sweep[i]);
  }
  return {
      {"bias", format_double17(report.bias)},
      {"raw_bias", format_double17(report.raw_bias)},
      {"risk", format_double17(report.risk)},
      {"entropy", format_double17(report.entropy)},
      {"zero_risk", format_double17(report.zero_risk)},
      {"learning_rate", format_double(report.config.learning_rate)},
      {"iterations", std::to_string(report.config.iterations)},
      {"batch_size", std::to_string(report.config.batch_size)},
      {"weight_decay", format_double(report.config.weight_decay)},
      {"decay_sweep", sweep},
      {"standardize", report.config.standardize ? "true" : "false"},
      {"seed", std::to_string(report.config.seed)},
  };
}

inline void write_decay_table(std::ostream& out, const BiasReport& report) {
  out << "weight_decay,risk,raw_bias,bias\n";
  for (const auto& m : report.per_decay) {
    out << format_double(m.weight_decay) << ',' << format_double17(m.risk) << ','
        << format_double17(m.raw_bias) << ',' << format_double17(m.bias) << '\n';
  }
}

}  // namespace repair
