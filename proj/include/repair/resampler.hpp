#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "repair/dataset.hpp"
#include "repair/errors.hpp"
#include "repair/io.hpp"

namespace repair {

/// round(p * n) with halves rounded up.
inline std::size_t keep_count(double keep_fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(keep_fraction * static_cast<double>(n) + 0.5));
}

struct ResampleParams {
  double threshold = 0.5;      // for threshold
  double keep_fraction = 0.5;  // for rank, cls_rank, uniform
};

namespace resample_detail {

/// Indices of `pool` ordered by descending weight, ties by ascending index.
inline std::vector<std::size_t> by_weight(std::span<const double> w, std::vector<std::size_t> pool) {
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
    if (w[a] != w[b]) return w[a] > w[b];
    return a < b;
  });
  return pool;
}

}  // namespace resample_detail

/// Converts selection probabilities into a retained-index set. `labels` is
/// only consulted by cls_rank.
inline ResamplePlan resample(std::span<const double> w, std::span<const int> labels, Strategy strategy,
                             const ResampleParams& params, std::uint64_t seed, int class_count = 0) {
  ResamplePlan plan;
  plan.strategy = strategy;
  plan.threshold = params.threshold;
  plan.keep_fraction = params.keep_fraction;
  plan.seed = seed;
  const std::size_t n = w.size();

  const bool uses_fraction =
      strategy == Strategy::kRank || strategy == Strategy::kClassRank || strategy == Strategy::kUniform;
  if (uses_fraction) {
    if (!(params.keep_fraction > 0 && params.keep_fraction <= 1)) {
      throw InputError("keep fraction must lie in (0, 1]");
    }
    if (keep_count(params.keep_fraction, n) == 0) {
      throw InputError("keep fraction " + format_double(params.keep_fraction) + " of n=" + std::to_string(n) +
                       " rounds to zero examples");
    }
  }
  if (strategy == Strategy::kThreshold && !(params.threshold >= 0 && params.threshold <= 1)) {
    throw InputError("threshold must lie in [0, 1]");
  }

  switch (strategy) {
    case Strategy::kThreshold:
      for (std::size_t i = 0; i < n; ++i) {
        if (w[i] >= params.threshold) plan.retained.push_back(i);
      }
      break;
    case Strategy::kRank: {
      auto order = resample_detail::by_weight(w, [&] {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        return all;
      }());
      order.resize(keep_count(params.keep_fraction, n));
      plan.retained = std::move(order);
      break;
    }
    case Strategy::kClassRank: {
      if (labels.size() != n) throw InputError("cls_rank needs one label per weight");
      const int C = std::max(class_count,
                             labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1);
      std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(std::max(C, 0)));
      for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0) throw InputError("negative label in cls_rank");
        members[static_cast<std::size_t>(labels[i])].push_back(i);
      }
      for (std::size_t y = 0; y < members.size(); ++y) {
        if (members[y].empty()) {
          plan.warnings.push_back("cls_rank: class " + std::to_string(y) + " is empty and was skipped");
          warn(plan.warnings.back());
          continue;
        }
        const std::size_t k = keep_count(params.keep_fraction, members[y].size());
        auto order = resample_detail::by_weight(w, std::move(members[y]));
        plan.retained.insert(plan.retained.end(), order.begin(), order.begin() + static_cast<Index>(k));
      }
      break;
    }
    case Strategy::kSample: {
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (unit(rng) < w[i]) plan.retained.push_back(i);
      }
      break;
    }
    case Strategy::kUniform: {
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), std::size_t{0});
      std::mt19937_64 rng(seed);
      std::shuffle(all.begin(), all.end(), rng);
      all.resize(keep_count(params.keep_fraction, n));
      plan.retained = std::move(all);
      break;
    }
  }
  std::sort(plan.retained.begin(), plan.retained.end());
  return plan;
}

inline ResamplePlan resample(const ExampleWeights& weights, std::span<const int> labels, Strategy strategy,
                             const ResampleParams& params, std::uint64_t seed, int class_count = 0) {
  const auto w = weights.weights();
  return resample(std::span<const double>(w), labels, strategy, params, seed, class_count);
}

/// Plan CSV: `#`-prefixed header lines echo the parameters, then `index,id` rows.
inline void write_plan_csv(std::ostream& out, const ResamplePlan& plan, std::span<const std::string> ids) {
  out << "# strategy=" << to_string(plan.strategy) << '\n';
  out << "# threshold=" << format_double(plan.threshold) << '\n';
  out << "# keep_fraction=" << format_double(plan.keep_fraction) << '\n';
  out << "# seed=" << plan.seed << '\n';
  out << "# retained=" << plan.retained.size() << '\n';
  out << "index,id\n";
  for (auto i : plan.retained) {
    if (i >= ids.size()) throw InputError("plan index out of range of the id list");
    out << i << ',' << ids[i] << '\n';
  }
}

}  // namespace repair
