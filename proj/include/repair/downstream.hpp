#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "repair/batching.hpp"
#include "repair/dataset.hpp"
#include "repair/errors.hpp"

namespace repair {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;

struct DownstreamConfig {
  int hidden_units = 128;  // 0 gives multinomial logistic regression
  double learning_rate = 0.05;
  double momentum = 0.9;
  int epochs = 5;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (hidden_units < 0) throw InputError("hidden units must be nonnegative");
    if (!(learning_rate > 0)) throw InputError("downstream learning rate must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw InputError("momentum must lie in [0, 1)");
    if (epochs < 0) throw InputError("epochs must be nonnegative");
    if (batch_size < 1) throw InputError("downstream batch size must be positive");
  }
};

/// Fully connected classifier: softmax(W2 relu(W1 x + b1) + b2), or
/// softmax(W2 x + b2) without a hidden layer. Single precision.
class MlpClassifier {
 public:
  MlpClassifier() = default;

  MlpClassifier(Index dim, int class_count, int hidden_units, std::uint64_t seed) : dim_(dim) {
    const Index in = hidden_units > 0 ? hidden_units : dim;
    if (hidden_units > 0) {
      std::mt19937_64 rng(seed);
      std::normal_distribution<float> normal(0.0f, std::sqrt(2.0f / static_cast<float>(dim)));
      W1 = MatrixF(hidden_units, dim);
      for (Index r = 0; r < W1.rows(); ++r) {
        for (Index c = 0; c < W1.cols(); ++c) W1(r, c) = normal(rng);
      }
      b1 = VectorF::Zero(hidden_units);
    }
    // A zero output layer predicts the uniform distribution until trained.
    W2 = MatrixF::Zero(class_count, in);
    b2 = VectorF::Zero(class_count);
  }

  Index dim() const { return dim_; }
  int class_count() const { return static_cast<int>(W2.rows()); }
  bool has_hidden_layer() const { return W1.size() > 0; }

  /// Hidden activations (or the input itself without a hidden layer).
  MatrixF hidden(const MatrixF& x) const {
    if (!has_hidden_layer()) return x;
    MatrixF h = x * W1.transpose();
    h.rowwise() += b1.transpose();
    return h.cwiseMax(0.0f);
  }

  MatrixF probabilities_from_hidden(const MatrixF& h) const {
    MatrixF z = h * W2.transpose();
    z.rowwise() += b2.transpose();
    for (Index i = 0; i < z.rows(); ++i) {
      auto row = z.row(i);
      row.array() -= row.maxCoeff();
      row = row.array().exp().matrix();
      row /= row.sum();
    }
    return z;
  }

  /// Top-1 predictions; ties go to the lowest class index.
  std::vector<int> predict(const Matrix& features) const {
    if (features.cols() != dim_) {
      throw InputError("classifier expects width " + std::to_string(dim_) + ", got " +
                       std::to_string(features.cols()));
    }
    std::vector<int> out(static_cast<std::size_t>(features.rows()));
    constexpr Index kChunk = 1024;
    for (Index start = 0; start < features.rows(); start += kChunk) {
      const Index len = std::min(kChunk, features.rows() - start);
      const MatrixF x = features.middleRows(start, len).cast<float>();
      const MatrixF p = probabilities_from_hidden(hidden(x));
      for (Index i = 0; i < len; ++i) {
        Index arg = 0;
        p.row(i).maxCoeff(&arg);
        out[static_cast<std::size_t>(start + i)] = static_cast<int>(arg);
      }
    }
    return out;
  }

  MatrixF W1;
  VectorF b1;
  MatrixF W2;
  VectorF b2;

 private:
  Index dim_ = 0;
};

struct TrainedDownstream {
  MlpClassifier classifier;
  std::vector<double> epoch_loss;  // mean training cross-entropy per epoch
};

/// Mini-batch SGD with momentum on cross-entropy over raw features.
inline TrainedDownstream train_downstream(const FeatureDataset& dataset, const DownstreamConfig& config) {
  config.validate();
  if (dataset.size() < static_cast<std::size_t>(dataset.class_count())) {
    throw InputError("downstream training needs at least C examples");
  }
  TrainedDownstream out;
  auto& model = out.classifier;
  model = MlpClassifier(dataset.dim(), dataset.class_count(), config.hidden_units, mix_seed(config.seed, 1));
  if (config.epochs == 0) return out;

  const auto n = dataset.size();
  const auto lr = static_cast<float>(config.learning_rate);
  const auto mu = static_cast<float>(config.momentum);
  MatrixF vW1 = MatrixF::Zero(model.W1.rows(), model.W1.cols());
  VectorF vb1 = VectorF::Zero(model.b1.size());
  MatrixF vW2 = MatrixF::Zero(model.W2.rows(), model.W2.cols());
  VectorF vb2 = VectorF::Zero(model.b2.size());

  BatchSampler sampler(n, static_cast<std::size_t>(config.batch_size), mix_seed(config.seed, 2));
  const std::size_t per_epoch = (n + static_cast<std::size_t>(config.batch_size) - 1) /
                                static_cast<std::size_t>(std::min<std::size_t>(config.batch_size, n));
  MatrixF x;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const auto batch = sampler.next();
      const auto m = static_cast<Index>(batch.size());
      x.resize(m, dataset.dim());
      for (Index k = 0; k < m; ++k) {
        x.row(k) = dataset.features().row(static_cast<Index>(batch[static_cast<std::size_t>(k)])).cast<float>();
      }
      const MatrixF h = model.hidden(x);
      MatrixF delta = model.probabilities_from_hidden(h);
      for (Index k = 0; k < m; ++k) {
        const int y = dataset.labels()[batch[static_cast<std::size_t>(k)]];
        loss_sum -= std::log(std::max(static_cast<double>(delta(k, y)), 1e-12));
        delta(k, y) -= 1.0f;
      }
      delta /= static_cast<float>(m);

      const MatrixF gW2 = delta.transpose() * h;
      const VectorF gb2 = delta.colwise().sum().transpose();
      if (model.has_hidden_layer()) {
        MatrixF dh = delta * model.W2;
        dh = dh.cwiseProduct((h.array() > 0.0f).cast<float>().matrix());
        const MatrixF gW1 = dh.transpose() * x;
        const VectorF gb1 = dh.colwise().sum().transpose();
        vW1 = mu * vW1 - lr * gW1;
        vb1 = mu * vb1 - lr * gb1;
        model.W1 += vW1;
        model.b1 += vb1;
      }
      vW2 = mu * vW2 - lr * gW2;
      vb2 = mu * vb2 - lr * gb2;
      model.W2 += vW2;
      model.b2 += vb2;
    }
    const double mean_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(mean_loss) || !model.W2.allFinite() || !model.b2.allFinite() ||
        (model.has_hidden_layer() && !(model.W1.allFinite() && model.b1.allFinite()))) {
      throw NumericError("downstream training diverged in epoch " + std::to_string(epoch));
    }
    out.epoch_loss.push_back(mean_loss);
  }
  return out;
}

template <class C>
concept LabelPredictor = requires(const C& c, const Matrix& x) {
  { c.predict(x) } -> std::convertible_to<std::vector<int>>;
};

/// Top-1 accuracy of any label predictor on `dataset`.
template <LabelPredictor Classifier>
double evaluate_accuracy(const Classifier& classifier, const FeatureDataset& dataset) {
  if (dataset.empty()) throw InputError("accuracy of an empty dataset");
  const std::vector<int> predicted = classifier.predict(dataset.features());
  if (predicted.size() != dataset.size()) throw InputError("classifier returned the wrong number of predictions");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == dataset.labels()[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

struct GeneralizationReport {
  std::string train_set;  // descriptor, e.g. "sigma=0.02 strategy=rank rate=0.5 seed=1"
  std::size_t train_size = 0;
  double accuracy_biased_test = 0;
  double accuracy_unbiased_test = 0;
  double measured_train_bias = 0;
  DownstreamConfig config;
};

struct DependencyInput {
  std::vector<double> rates;
  std::vector<double> acc_random;
  std::vector<double> acc_repaired;
};

/// Bias dependency coefficient: mean over resampling rates of
/// (accuracy on randomly resampled data - accuracy on REPAIRed data).
inline double bias_dependency(const DependencyInput& input) {
  const auto k = input.rates.size();
  if (k == 0) throw InputError("bias dependency needs at least one rate");
  if (input.acc_random.size() != k || input.acc_repaired.size() != k) {
    throw InputError("rates and accuracy lists must have equal lengths");
  }
  double sum = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (double a : {input.acc_random[i], input.acc_repaired[i]}) {
      if (!(a >= 0 && a <= 1)) throw InputError("accuracies must lie in [0, 1]");
    }
    sum += input.acc_random[i] - input.acc_repaired[i];
  }
  return sum / static_cast<double>(k);
}

namespace downstream_detail {
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}
}  // namespace downstream_detail

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw InputError("spearman needs two equal-length series of length >= 2");
  const auto ra = downstream_detail::average_ranks(a);
  const auto rb = downstream_detail::average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace repair
