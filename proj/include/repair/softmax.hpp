#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "repair/dataset.hpp"
#include "repair/errors.hpp"

namespace repair {

/// Floor applied to probabilities before taking logs.
inline constexpr double kProbabilityFloor = 1e-12;

/// Linear softmax classifier: P(y | x) = softmax(W x + b)_y, W is C x d.
struct SoftmaxClassifier {
  Matrix W;
  Vector b;

  static SoftmaxClassifier zeros(int class_count, Index dim) {
    return {Matrix::Zero(class_count, dim), Vector::Zero(class_count)};
  }

  int class_count() const { return static_cast<int>(W.rows()); }
  Index dim() const { return W.cols(); }
};

/// Gradient with respect to (W, b), same shapes as the classifier.
struct SoftmaxGradient {
  Matrix W;
  Vector b;

  double squared_norm() const { return W.squaredNorm() + b.squaredNorm(); }
};

/// Row-stochastic n x C matrix of class probabilities. Logits are shifted by
/// their row maximum before exponentiation.
inline Matrix forward(const SoftmaxClassifier& clf, const Matrix& features) {
  if (features.cols() != clf.dim()) {
    throw InputError("feature width " + std::to_string(features.cols()) +
                     " does not match classifier width " + std::to_string(clf.dim()));
  }
  Matrix probs = features * clf.W.transpose();
  probs.rowwise() += clf.b.transpose();
  for (Index i = 0; i < probs.rows(); ++i) {
    auto row = probs.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return probs;
}

/// log max(P(y_i | x_i), floor) for every row.
inline std::vector<double> correct_class_log_probs(const SoftmaxClassifier& clf, const Matrix& features,
                                                   std::span<const int> labels) {
  const Matrix probs = forward(clf, features);
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i] = std::log(std::max(probs(static_cast<Index>(i), labels[i]), kProbabilityFloor));
  }
  return out;
}

/// Gradient of sum_i a_i * (-log max(P(y_i | x_i), floor)) given the forward
/// probabilities. Rows whose probability sits below the floor contribute zero.
inline SoftmaxGradient cross_entropy_gradient_from_probs(Matrix probs, const Matrix& features,
                                                         std::span<const int> labels,
                                                         std::span<const double> coefficients) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto r = static_cast<Index>(i);
    const double a = probs(r, labels[i]) < kProbabilityFloor ? 0.0 : coefficients[i];
    probs(r, labels[i]) -= 1.0;
    probs.row(r) *= a;
  }
  return {probs.transpose() * features, probs.colwise().sum().transpose()};
}

inline SoftmaxGradient cross_entropy_gradient(const SoftmaxClassifier& clf, const Matrix& features,
                                              std::span<const int> labels,
                                              std::span<const double> coefficients) {
  return cross_entropy_gradient_from_probs(forward(clf, features), features, labels, coefficients);
}

/// Gathers rows of `features` at `rows`.
inline Matrix gather_rows(const Matrix& features, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Index>(rows.size()), features.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.row(static_cast<Index>(k)) = features.row(static_cast<Index>(rows[k]));
  }
  return out;
}

/// Per-column affine map x -> (x - mean) / scale. Zero-variance columns keep scale 1.
struct Standardizer {
  Vector mean;
  Vector scale;

  static Standardizer fit(const Matrix& features) {
    Standardizer s;
    const auto n = static_cast<double>(std::max<Index>(features.rows(), 1));
    s.mean = features.colwise().sum().transpose() / n;
    s.scale = Vector::Ones(features.cols());
    for (Index j = 0; j < features.cols(); ++j) {
      const double var = (features.col(j).array() - s.mean(j)).square().sum() / n;
      if (var > 1e-24) s.scale(j) = std::sqrt(var);
    }
    return s;
  }

  static Standardizer identity(Index dim) { return {Vector::Zero(dim), Vector::Ones(dim)}; }

  Matrix apply(const Matrix& features) const {
    Matrix out = features.rowwise() - mean.transpose();
    out.array().rowwise() /= scale.transpose().array();
    return out;
  }

  /// Re-expresses a classifier trained on standardized inputs in raw feature space.
  SoftmaxClassifier to_raw(const SoftmaxClassifier& standardized) const {
    SoftmaxClassifier raw;
    raw.W = standardized.W;
    raw.W.array().rowwise() /= scale.transpose().array();
    raw.b = standardized.b - raw.W * mean;
    return raw;
  }
};

}  // namespace repair
