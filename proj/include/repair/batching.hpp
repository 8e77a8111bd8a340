#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "repair/errors.hpp"

namespace repair {

/// SplitMix64 finalizer; derives independent stream seeds from (seed, index).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Epoch-based mini-batch index stream: each epoch is a fresh permutation of
/// [0, n) drawn from the seeded generator, cut into consecutive batches. The
/// final batch of an epoch may be shorter.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : order_(n), batch_size_(std::min(batch_size, n)), rng_(seed) {
    if (n == 0) throw InputError("cannot draw mini-batches from an empty dataset");
    if (batch_size == 0) throw InputError("batch size must be positive");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = order_.size();
  }

  std::span<const std::size_t> next() {
    if (cursor_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
      ++epoch_;
    }
    const std::size_t len = std::min(batch_size_, order_.size() - cursor_);
    std::span<const std::size_t> batch(order_.data() + cursor_, len);
    cursor_ += len;
    return batch;
  }

  std::size_t epoch() const { return epoch_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace repair
