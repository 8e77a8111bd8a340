#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "repair/repair.hpp"

namespace repair::testing {

/// Random small labeled instance; every class appears at least once when n >= C.
inline FeatureDataset random_instance(std::mt19937_64& rng, int n, int d, int C) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) x(i, j) = normal(rng);
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::uniform_int_distribution<int> pick(0, C - 1);
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i < C ? i : pick(rng);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("e" + std::to_string(i));
  return FeatureDataset(std::move(x), std::move(labels), C, std::move(ids));
}

inline SoftmaxClassifier random_classifier(std::mt19937_64& rng, int C, Index d, double scale = 0.5) {
  std::normal_distribution<double> normal(0.0, scale);
  auto clf = SoftmaxClassifier::zeros(C, d);
  for (Index r = 0; r < clf.W.rows(); ++r)
    for (Index c = 0; c < clf.W.cols(); ++c) clf.W(r, c) = normal(rng);
  for (Index r = 0; r < clf.b.size(); ++r) clf.b(r) = normal(rng);
  return clf;
}

/// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("repair_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Big-endian IDX writers for fixtures.
inline std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

inline std::string idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                              const std::vector<unsigned char>& pixels) {
  std::string s = be32(0x00000803) + be32(count) + be32(rows) + be32(cols);
  s.append(pixels.begin(), pixels.end());
  return s;
}

inline std::string idx_labels(const std::vector<unsigned char>& labels) {
  std::string s = be32(0x00000801) + be32(static_cast<std::uint32_t>(labels.size()));
  s.append(labels.begin(), labels.end());
  return s;
}

/// Collects warnings for the lifetime of the guard.
class WarningCapture {
 public:
  WarningCapture() {
    previous_ = set_warning_handler([this](const std::string& m) { messages.push_back(m); });
  }
  ~WarningCapture() { set_warning_handler(previous_); }
  std::vector<std::string> messages;

 private:
  WarningHandler previous_;
};

}  // namespace repair::testing
