#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "repair/errors.hpp"

namespace repair {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = std::ptrdiff_t;

/// Labeled feature vectors: n rows of width d, integer labels in [0, C), and
/// unique string ids. Immutable once constructed.
class FeatureDataset {
 public:
  FeatureDataset() = default;

  /// Validates every invariant; throws InputError naming the first violation.
  FeatureDataset(Matrix features, std::vector<int> labels, int class_count,
                 std::vector<std::string> ids)
      : features_(std::move(features)),
        labels_(std::move(labels)),
        ids_(std::move(ids)),
        class_count_(class_count) {
    if (class_count_ < 1) throw InputError("class_count must be positive");
    if (features_.cols() < 1) throw InputError("feature width must be at least 1");
    const auto n = static_cast<std::size_t>(features_.rows());
    if (labels_.size() != n || ids_.size() != n) {
      throw InputError("dataset has " + std::to_string(n) + " feature rows but " +
                       std::to_string(labels_.size()) + " labels and " +
                       std::to_string(ids_.size()) + " ids");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (labels_[i] < 0 || labels_[i] >= class_count_) {
        throw InputError("label " + std::to_string(labels_[i]) + " of example '" + ids_[i] +
                         "' is outside [0, " + std::to_string(class_count_) + ")");
      }
    }
    std::unordered_set<std::string_view> seen;
    seen.reserve(n);
    for (const auto& id : ids_) {
      if (!seen.insert(id).second) throw InputError("duplicate example id '" + id + "'");
    }
  }

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  Index dim() const { return features_.cols(); }
  int class_count() const { return class_count_; }

  const Matrix& features() const { return features_; }
  std::span<const int> labels() const { return labels_; }
  const std::vector<std::string>& ids() const { return ids_; }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(class_count_), 0);
    for (int y : labels_) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  friend bool operator==(const FeatureDataset& a, const FeatureDataset& b) {
    return a.class_count_ == b.class_count_ && a.labels_ == b.labels_ && a.ids_ == b.ids_ &&
           a.features_.rows() == b.features_.rows() && a.features_.cols() == b.features_.cols() &&
           a.features_ == b.features_;
  }

 private:
  Matrix features_{0, 1};
  std::vector<int> labels_;
  std::vector<std::string> ids_;
  int class_count_ = 1;
};

/// Logistic function clamped into the open interval (0, 1), so that even
/// saturated pre-activations yield a strictly positive, strictly sub-unit weight.
inline double sigmoid(double x) {
  const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return std::clamp(s, std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
}

/// Per-example selection pre-activations omega; w_i = sigmoid(omega_i).
class ExampleWeights {
 public:
  ExampleWeights() = default;
  explicit ExampleWeights(std::vector<double> omega) : omega_(std::move(omega)) {}

  static ExampleWeights zeros(std::size_t n) { return ExampleWeights(std::vector<double>(n, 0.0)); }

  std::size_t size() const { return omega_.size(); }
  std::span<const double> omega() const { return omega_; }
  double weight(std::size_t i) const { return sigmoid(omega_[i]); }

  std::vector<double> weights() const {
    std::vector<double> w(omega_.size());
    std::transform(omega_.begin(), omega_.end(), w.begin(), sigmoid);
    return w;
  }

  friend bool operator==(const ExampleWeights&, const ExampleWeights&) = default;

 private:
  std::vector<double> omega_;
};

enum class Strategy { kThreshold, kRank, kClassRank, kSample, kUniform };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kThreshold: return "threshold";
    case Strategy::kRank: return "rank";
    case Strategy::kClassRank: return "cls_rank";
    case Strategy::kSample: return "sample";
    case Strategy::kUniform: return "uniform";
  }
  return "unknown";
}

inline Strategy parse_strategy(std::string_view name) {
  for (auto s : {Strategy::kThreshold, Strategy::kRank, Strategy::kClassRank, Strategy::kSample,
                 Strategy::kUniform}) {
    if (to_string(s) == name) return s;
  }
  throw InputError("unknown resampling strategy '" + std::string(name) + "'");
}

struct ResamplePlan {
  Strategy strategy = Strategy::kRank;
  double threshold = 0.5;
  double keep_fraction = 0.5;
  std::uint64_t seed = 0;
  std::vector<std::size_t> retained;  // sorted, unique
  std::vector<std::string> warnings;
};

/// Rows listed in `retained` (any order, no duplicates) in their original order.
inline FeatureDataset subset(const FeatureDataset& dataset, std::span<const std::size_t> retained) {
  std::vector<std::size_t> rows(retained.begin(), retained.end());
  std::sort(rows.begin(), rows.end());
  if (std::adjacent_find(rows.begin(), rows.end()) != rows.end()) {
    throw InputError("retained index set contains duplicates");
  }
  if (!rows.empty() && rows.back() >= dataset.size()) {
    throw InputError("retained index " + std::to_string(rows.back()) + " is out of range for n=" +
                     std::to_string(dataset.size()));
  }
  Matrix features(static_cast<Index>(rows.size()), dataset.dim());
  std::vector<int> labels;
  std::vector<std::string> ids;
  labels.reserve(rows.size());
  ids.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    features.row(static_cast<Index>(k)) = dataset.features().row(static_cast<Index>(rows[k]));
    labels.push_back(dataset.labels()[rows[k]]);
    ids.push_back(dataset.ids()[rows[k]]);
  }
  return FeatureDataset(std::move(features), std::move(labels), dataset.class_count(), std::move(ids));
}

inline FeatureDataset subset(const FeatureDataset& dataset, const ResamplePlan& plan) {
  return subset(dataset, std::span<const std::size_t>(plan.retained));
}

/// Copy of `dataset` with every id prefixed (used to tag the split of origin).
inline FeatureDataset with_id_prefix(const FeatureDataset& dataset, std::string_view prefix) {
  std::vector<std::string> ids;
  ids.reserve(dataset.size());
  for (const auto& id : dataset.ids()) ids.push_back(std::string(prefix) + id);
  return FeatureDataset(dataset.features(), {dataset.labels().begin(), dataset.labels().end()},
                        dataset.class_count(), std::move(ids));
}

/// Row-wise concatenation; feature widths must agree and ids must stay unique.
inline FeatureDataset concat(const FeatureDataset& a, const FeatureDataset& b) {
  if (a.dim() != b.dim()) {
    throw InputError("cannot concatenate datasets of width " + std::to_string(a.dim()) + " and " +
                     std::to_string(b.dim()));
  }
  Matrix features(static_cast<Index>(a.size() + b.size()), a.dim());
  features.topRows(static_cast<Index>(a.size())) = a.features();
  features.bottomRows(static_cast<Index>(b.size())) = b.features();
  std::vector<int> labels(a.labels().begin(), a.labels().end());
  labels.insert(labels.end(), b.labels().begin(), b.labels().end());
  std::vector<std::string> ids = a.ids();
  ids.insert(ids.end(), b.ids().begin(), b.ids().end());
  return FeatureDataset(std::move(features), std::move(labels),
                        std::max(a.class_count(), b.class_count()), std::move(ids));
}

/// Indices of rows whose id starts with `prefix`, ascending.
inline std::vector<std::size_t> indices_with_id_prefix(const FeatureDataset& dataset,
                                                       std::string_view prefix) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (std::string_view(dataset.ids()[i]).starts_with(prefix)) out.push_back(i);
  }
  return out;
}

/// Warns once per class that has no examples.
inline void warn_empty_classes(const FeatureDataset& dataset, std::string_view context) {
  const auto counts = dataset.class_counts();
  for (std::size_t y = 0; y < counts.size(); ++y) {
    if (counts[y] == 0) {
      warn(std::string(context) + ": class " + std::to_string(y) + " has no examples");
    }
  }
}

}  // namespace repair
