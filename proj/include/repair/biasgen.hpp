#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "repair/batching.hpp"
#include "repair/dataset.hpp"
#include "repair/errors.hpp"
#include "repair/io.hpp"

namespace repair {

enum class ColorScheme { kSpread, kRandom };

inline std::string_view to_string(ColorScheme s) { return s == ColorScheme::kSpread ? "spread" : "random"; }

inline ColorScheme parse_color_scheme(std::string_view name) {
  if (name == "spread") return ColorScheme::kSpread;
  if (name == "random") return ColorScheme::kRandom;
  throw InputError("unknown color scheme '" + std::string(name) + "' (expected spread or random)");
}

/// Class-conditional color distributions N(means[y], sigma^2 I), clipped to the unit cube.
struct ColorSpec {
  Matrix means;  // C x 3, entries in [0, 1]
  double sigma = 0;
  std::uint64_t seed = 0;

  int class_count() const { return static_cast<int>(means.rows()); }
};

/// Class color means.
///  spread: greedy farthest-point selection over the 5-level RGB lattice,
///          starting from a seed-chosen non-black corner; lattice colors whose
///          brightest channel is below 0.5 are excluded.
///  random: uniform in [0.2, 0.8]^3.
inline Matrix make_color_means(int class_count, std::uint64_t seed, ColorScheme scheme) {
  if (class_count < 1) throw InputError("class count must be positive");
  Matrix means(class_count, 3);
  std::mt19937_64 rng(seed);
  if (scheme == ColorScheme::kRandom) {
    std::uniform_real_distribution<double> u(0.2, 0.8);
    for (Index y = 0; y < class_count; ++y) {
      for (Index c = 0; c < 3; ++c) means(y, c) = u(rng);
    }
    return means;
  }

  std::vector<Eigen::Vector3d> candidates;
  for (int r = 0; r <= 4; ++r) {
    for (int g = 0; g <= 4; ++g) {
      for (int b = 0; b <= 4; ++b) {
        Eigen::Vector3d p(r / 4.0, g / 4.0, b / 4.0);
        if (p.maxCoeff() >= 0.5) candidates.push_back(p);
      }
    }
  }
  if (static_cast<std::size_t>(class_count) > candidates.size()) {
    throw InputError("spread scheme supports at most " + std::to_string(candidates.size()) + " classes");
  }
  std::vector<std::size_t> corners;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const auto& p = candidates[k];
    if ((p.array() == 0.0 || p.array() == 1.0).all()) corners.push_back(k);
  }
  std::vector<double> nearest(candidates.size(), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(candidates.size(), false);
  std::size_t pick = corners[std::uniform_int_distribution<std::size_t>(0, corners.size() - 1)(rng)];
  for (Index y = 0; y < class_count; ++y) {
    means.row(y) = candidates[pick].transpose();
    taken[pick] = true;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      nearest[k] = std::min(nearest[k], (candidates[k] - candidates[pick]).norm());
    }
    double best = -1;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      if (!taken[k] && nearest[k] > best) {
        best = nearest[k];
        pick = k;
      }
    }
  }
  return means;
}

/// Tints the listed rows of `grayscale` (in the listed order) by a color
/// z ~ N(mu_y, sigma^2 I) clipped to [0,1]^3. Output layout is channel-major:
/// [R pixels | G pixels | B pixels], each channel equal to intensity * z_c.
/// Draws are keyed by (seed, stream, original row index), so a row gets the
/// same color whichever subset it is colorized with.
inline FeatureDataset colorize_rows(const FeatureDataset& grayscale, Index pixel_count, const ColorSpec& spec,
                                    std::uint64_t stream, std::span<const std::size_t> rows) {
  if (pixel_count < 1 || grayscale.dim() != pixel_count) {
    throw InputError("colorize: dataset width " + std::to_string(grayscale.dim()) +
                     " does not equal the stated pixel count " + std::to_string(pixel_count));
  }
  if (spec.means.cols() != 3 || spec.class_count() < grayscale.class_count()) {
    throw InputError("colorize: color spec must provide an RGB mean for each of the " +
                     std::to_string(grayscale.class_count()) + " classes");
  }
  if (!(spec.sigma >= 0)) throw InputError("colorize: sigma must be nonnegative");
  const auto m = static_cast<Index>(rows.size());
  Matrix out(m, 3 * pixel_count);
  std::vector<int> labels(rows.size());
  std::vector<std::string> ids(rows.size());
  const std::uint64_t base = mix_seed(spec.seed, stream);
  for (Index k = 0; k < m; ++k) {
    const std::size_t i = rows[static_cast<std::size_t>(k)];
    if (i >= grayscale.size()) throw InputError("colorize: row index out of range");
    std::mt19937_64 rng(mix_seed(base, static_cast<std::uint64_t>(i)));
    std::normal_distribution<double> normal(0.0, 1.0);
    const int y = grayscale.labels()[i];
    const auto gray = grayscale.features().row(static_cast<Index>(i));
    for (Index c = 0; c < 3; ++c) {
      const double z = std::clamp(spec.means(y, c) + spec.sigma * normal(rng), 0.0, 1.0);
      out.block(k, c * pixel_count, 1, pixel_count) = gray * z;
    }
    labels[static_cast<std::size_t>(k)] = y;
    ids[static_cast<std::size_t>(k)] = grayscale.ids()[i];
  }
  return FeatureDataset(std::move(out), std::move(labels), grayscale.class_count(), std::move(ids));
}

inline FeatureDataset colorize(const FeatureDataset& grayscale, Index pixel_count, const ColorSpec& spec,
                               std::uint64_t stream = 0) {
  std::vector<std::size_t> rows(grayscale.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return colorize_rows(grayscale, pixel_count, spec, stream, rows);
}

/// Grayscale images copied into every channel of the colored layout.
inline FeatureDataset replicate_channels(const FeatureDataset& grayscale, Index channels = 3) {
  const Index d = grayscale.dim();
  Matrix out(static_cast<Index>(grayscale.size()), channels * d);
  for (Index c = 0; c < channels; ++c) out.middleCols(c * d, d) = grayscale.features();
  return FeatureDataset(std::move(out), {grayscale.labels().begin(), grayscale.labels().end()},
                        grayscale.class_count(), grayscale.ids());
}

/// Mean value of each of the three channel blocks: the per-example color representation.
inline FeatureDataset color_feature(const FeatureDataset& colored) {
  if (colored.dim() % 3 != 0) {
    throw InputError("color_feature: width " + std::to_string(colored.dim()) + " is not divisible by 3");
  }
  const Index p = colored.dim() / 3;
  Matrix out(static_cast<Index>(colored.size()), 3);
  for (Index c = 0; c < 3; ++c) {
    out.col(c) = colored.features().middleCols(c * p, p).rowwise().sum() / static_cast<double>(p);
  }
  return FeatureDataset(std::move(out), {colored.labels().begin(), colored.labels().end()},
                        colored.class_count(), colored.ids());
}

/// color_feature(colorize(grayscale, ...)) computed in row chunks, without
/// holding the full colored dataset in memory. Values are identical.
inline FeatureDataset colorized_color_feature(const FeatureDataset& grayscale, Index pixel_count,
                                              const ColorSpec& spec, std::uint64_t stream = 0) {
  constexpr std::size_t kChunk = 4096;
  Matrix out(static_cast<Index>(grayscale.size()), 3);
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < grayscale.size(); start += kChunk) {
    rows.resize(std::min(kChunk, grayscale.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const auto part = color_feature(colorize_rows(grayscale, pixel_count, spec, stream, rows));
    out.middleRows(static_cast<Index>(start), static_cast<Index>(rows.size())) = part.features();
  }
  return FeatureDataset(std::move(out), {grayscale.labels().begin(), grayscale.labels().end()},
                        grayscale.class_count(), grayscale.ids());
}

inline KeyValueRecord to_key_values(const ColorSpec& spec) {
  KeyValueRecord record{{"classes", std::to_string(spec.class_count())},
                        {"sigma", format_double(spec.sigma)},
                        {"seed", std::to_string(spec.seed)}};
  for (Index y = 0; y < spec.means.rows(); ++y) {
    record.emplace_back("mean_" + std::to_string(y), format_double17(spec.means(y, 0)) + "," +
                                                         format_double17(spec.means(y, 1)) + "," +
                                                         format_double17(spec.means(y, 2)));
  }
  return record;
}

struct PlantedBiasSpec {
  std::size_t n = 1000;
  int class_count = 2;
  Index d_signal = 2;
  Index d_bias = 2;
  double separability = 1.0;  // distance scale of the signal-block class means
  double bias_strength = 0.5; // in [0, 1]
  std::uint64_t seed = 0;
};

/// Two concatenated feature blocks with labels y_i = i mod C.
///  signal: separability * u_y + N(0, I), u_y random unit vectors
///  bias:   s * v_y + (1 - s) * N(0, I), v_y random unit vectors, s = bias_strength
/// At s = 0 the bias block is label-independent noise; at s = 1 it is a
/// noiseless class code.
inline FeatureDataset planted_bias_blobs(const PlantedBiasSpec& spec) {
  if (spec.class_count < 1 || spec.d_signal < 0 || spec.d_bias < 0 || spec.d_signal + spec.d_bias < 1) {
    throw InputError("planted_bias_blobs: dimensions must be positive");
  }
  if (!(spec.bias_strength >= 0 && spec.bias_strength <= 1)) {
    throw InputError("planted_bias_blobs: bias_strength must lie in [0, 1]");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto unit_rows = [&](Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
      const double norm = m.row(r).norm();
      if (norm > 0) m.row(r) /= norm;
    }
    return m;
  };
  const Matrix signal_means = unit_rows(spec.class_count, spec.d_signal) * spec.separability;
  const Matrix bias_means = unit_rows(spec.class_count, spec.d_bias);

  const auto n = static_cast<Index>(spec.n);
  const Index d = spec.d_signal + spec.d_bias;
  Matrix x(n, d);
  std::vector<int> labels(spec.n);
  std::vector<std::string> ids(spec.n);
  const double s = spec.bias_strength;
  for (Index i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % spec.class_count);
    labels[static_cast<std::size_t>(i)] = y;
    ids[static_cast<std::size_t>(i)] = std::to_string(i);
    for (Index j = 0; j < spec.d_signal; ++j) x(i, j) = signal_means(y, j) + normal(rng);
    for (Index j = 0; j < spec.d_bias; ++j) x(i, spec.d_signal + j) = s * bias_means(y, j) + (1 - s) * normal(rng);
  }
  return FeatureDataset(std::move(x), std::move(labels), spec.class_count, std::move(ids));
}

/// One-hot label code (plus optional Gaussian jitter of std `leak_noise`)
/// followed by `noise_dims` label-independent N(0,1) columns. Labels i mod C.
inline FeatureDataset leaked_label_dataset(std::size_t n, int class_count, Index noise_dims, double leak_noise,
                                           std::uint64_t seed) {
  if (class_count < 1 || noise_dims < 0) throw InputError("leaked_label_dataset: bad dimensions");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(static_cast<Index>(n), class_count + noise_dims);
  std::vector<int> labels(n);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % static_cast<std::size_t>(class_count));
    labels[i] = y;
    ids[i] = std::to_string(i);
    const auto r = static_cast<Index>(i);
    for (Index c = 0; c < class_count; ++c) x(r, c) = (c == y ? 1.0 : 0.0) + leak_noise * normal(rng);
    for (Index j = 0; j < noise_dims; ++j) x(r, class_count + j) = normal(rng);
  }
  return FeatureDataset(std::move(x), std::move(labels), class_count, std::move(ids));
}

/// Label-independent N(0,1) features with balanced labels i mod C.
inline FeatureDataset noise_dataset(std::size_t n, int class_count, Index dims, std::uint64_t seed) {
  if (class_count < 1 || dims < 1) throw InputError("noise_dataset: bad dimensions");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(static_cast<Index>(n), dims);
  std::vector<int> labels(n);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % static_cast<std::size_t>(class_count));
    ids[i] = std::to_string(i);
    for (Index j = 0; j < dims; ++j) x(static_cast<Index>(i), j) = normal(rng);
  }
  return FeatureDataset(std::move(x), std::move(labels), class_count, std::move(ids));
}

}  // namespace repair
