#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "repair/dataset.hpp"
#include "repair/errors.hpp"

namespace repair {

namespace io_detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  return out;
}

inline std::uint32_t read_be32(std::string_view bytes, std::size_t offset) {
  return (std::uint32_t(static_cast<unsigned char>(bytes[offset])) << 24) |
         (std::uint32_t(static_cast<unsigned char>(bytes[offset + 1])) << 16) |
         (std::uint32_t(static_cast<unsigned char>(bytes[offset + 2])) << 8) |
         std::uint32_t(static_cast<unsigned char>(bytes[offset + 3]));
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

/// Splits text into lines, tolerating a trailing newline and CRLF endings.
inline std::vector<std::string_view> lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto pos = text.find('\n', start);
    if (pos == std::string_view::npos) pos = text.size();
    auto line = text.substr(start, pos - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.push_back(line);
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view cell) {
  while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
  while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  double value = 0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) return std::nullopt;
  return value;
}

inline std::optional<long long> parse_int(std::string_view cell) {
  long long value = 0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) return std::nullopt;
  return value;
}

}  // namespace io_detail

/// Shortest decimal text that parses back to exactly `x`.
inline std::string format_double(double x) {
  std::array<char, 32> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), ptr);
}

/// Decimal text with 17 significant digits.
inline std::string format_double17(double x) {
  std::array<char, 40> buf{};
  const int len = std::snprintf(buf.data(), buf.size(), "%.17g", x);
  return std::string(buf.data(), static_cast<std::size_t>(len));
}

// ---------------------------------------------------------------------------
// IDX (MNIST) ingestion

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are flattened row-major and scaled to [0, 1]; ids are the decimal
/// item index with `id_prefix` prepended.
inline FeatureDataset load_idx(const std::filesystem::path& image_path,
                               const std::filesystem::path& label_path, int class_count = 10,
                               std::string_view id_prefix = {}) {
  using io_detail::read_be32;
  const std::string images = io_detail::read_file(image_path);
  const std::string labels = io_detail::read_file(label_path);

  if (images.size() < 16) throw InputError("'" + image_path.string() + "': truncated IDX header");
  if (labels.size() < 8) throw InputError("'" + label_path.string() + "': truncated IDX header");
  if (read_be32(images, 0) != 0x00000803) {
    throw InputError("'" + image_path.string() + "': bad magic number (expected 0x00000803)");
  }
  if (read_be32(labels, 0) != 0x00000801) {
    throw InputError("'" + label_path.string() + "': bad magic number (expected 0x00000801)");
  }
  const std::size_t n_images = read_be32(images, 4);
  const std::size_t rows = read_be32(images, 8);
  const std::size_t cols = read_be32(images, 12);
  const std::size_t n_labels = read_be32(labels, 4);
  if (n_images != n_labels) {
    throw InputError("item count mismatch: " + std::to_string(n_images) + " images in '" +
                     image_path.string() + "' but " + std::to_string(n_labels) + " labels in '" +
                     label_path.string() + "'");
  }
  const std::size_t d = rows * cols;
  if (d == 0) throw InputError("'" + image_path.string() + "': zero-sized images");
  if (images.size() < 16 + n_images * d) {
    throw InputError("'" + image_path.string() + "': truncated payload");
  }
  if (labels.size() < 8 + n_labels) {
    throw InputError("'" + label_path.string() + "': truncated payload");
  }

  Matrix features(static_cast<Index>(n_images), static_cast<Index>(d));
  const auto* pixels = reinterpret_cast<const unsigned char*>(images.data() + 16);
  for (std::size_t i = 0; i < n_images; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      features(static_cast<Index>(i), static_cast<Index>(j)) = pixels[i * d + j] / 255.0;
    }
  }
  std::vector<int> y(n_labels);
  std::vector<std::string> ids(n_labels);
  for (std::size_t i = 0; i < n_labels; ++i) {
    y[i] = static_cast<unsigned char>(labels[8 + i]);
    ids[i] = std::string(id_prefix) + std::to_string(i);
  }
  return FeatureDataset(std::move(features), std::move(y), class_count, std::move(ids));
}

// ---------------------------------------------------------------------------
// Feature CSV: header `id,label,f0,...,f{d-1}`

inline FeatureDataset parse_features_csv(std::string_view text, std::string_view source,
                                         std::optional<int> class_count = std::nullopt) {
  const auto rows = io_detail::lines(text);
  const std::string where(source);
  if (rows.empty()) throw InputError(where + ": empty file");
  const auto header = io_detail::split(rows[0]);
  if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
    throw InputError(where + ": header must be id,label,f0,...");
  }
  const std::size_t d = header.size() - 2;

  std::size_t n = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) n += rows[r].empty() ? 0 : 1;

  Matrix features(static_cast<Index>(n), static_cast<Index>(d));
  std::vector<int> labels;
  std::vector<std::string> ids;
  labels.reserve(n);
  ids.reserve(n);
  std::unordered_map<std::string_view, std::size_t> seen;
  int max_label = -1;
  Index row = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].empty()) continue;
    const auto cells = io_detail::split(rows[r]);
    const std::string line_ref = where + ":" + std::to_string(r + 1);
    if (cells.size() != header.size()) {
      throw InputError(line_ref + ": expected " + std::to_string(header.size()) + " cells, found " +
                       std::to_string(cells.size()));
    }
    if (!seen.emplace(cells[0], r).second) {
      throw InputError(line_ref + ": duplicate id '" + std::string(cells[0]) + "'");
    }
    const auto label = io_detail::parse_int(cells[1]);
    if (!label) throw InputError(line_ref + ": non-integer label '" + std::string(cells[1]) + "'");
    if (*label < 0) throw InputError(line_ref + ": negative label " + std::to_string(*label));
    if (*label > std::numeric_limits<int>::max() - 1) throw InputError(line_ref + ": label too large");
    for (std::size_t j = 0; j < d; ++j) {
      const auto v = io_detail::parse_double(cells[j + 2]);
      if (!v) {
        throw InputError(line_ref + ": non-numeric feature cell '" + std::string(cells[j + 2]) +
                         "' in column " + std::string(header[j + 2]));
      }
      features(row, static_cast<Index>(j)) = *v;
    }
    ids.emplace_back(cells[0]);
    labels.push_back(static_cast<int>(*label));
    max_label = std::max(max_label, static_cast<int>(*label));
    ++row;
  }
  const int C = class_count.value_or(std::max(max_label + 1, 1));
  FeatureDataset dataset(std::move(features), std::move(labels), C, std::move(ids));
  warn_empty_classes(dataset, where);
  return dataset;
}

inline FeatureDataset load_features_csv(const std::filesystem::path& path,
                                        std::optional<int> class_count = std::nullopt) {
  return parse_features_csv(io_detail::read_file(path), path.string(), class_count);
}

inline void write_features_csv(std::ostream& out, const FeatureDataset& dataset) {
  out << "id,label";
  for (Index j = 0; j < dataset.dim(); ++j) out << ",f" << j;
  out << '\n';
  std::string line;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& id = dataset.ids()[i];
    if (id.find_first_of(",\n\r") != std::string::npos) {
      throw InputError("id '" + id + "' cannot be written to CSV");
    }
    line = id;
    line += ',';
    line += std::to_string(dataset.labels()[i]);
    for (Index j = 0; j < dataset.dim(); ++j) {
      line += ',';
      line += format_double(dataset.features()(static_cast<Index>(i), j));
    }
    line += '\n';
    out << line;
  }
}

inline void save_features_csv(const FeatureDataset& dataset, const std::filesystem::path& path) {
  auto out = io_detail::open_for_write(path);
  write_features_csv(out, dataset);
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Weight CSV: `id,omega,w` (w is informational; recomputed on load)

inline void write_weights_csv(std::ostream& out, const ExampleWeights& weights,
                              std::span<const std::string> ids) {
  if (ids.size() != weights.size()) {
    throw InputError("weights/ids length mismatch: " + std::to_string(weights.size()) + " vs " +
                     std::to_string(ids.size()));
  }
  out << "id,omega,w\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i] << ',' << format_double17(weights.omega()[i]) << ','
        << format_double17(weights.weight(i)) << '\n';
  }
}

inline void save_weights(const ExampleWeights& weights, std::span<const std::string> ids,
                         const std::filesystem::path& path) {
  auto out = io_detail::open_for_write(path);
  write_weights_csv(out, weights, ids);
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

struct LoadedWeights {
  std::vector<std::string> ids;
  ExampleWeights weights;
};

inline LoadedWeights parse_weights_csv(std::string_view text, std::string_view source) {
  const auto rows = io_detail::lines(text);
  const std::string where(source);
  if (rows.empty() || io_detail::split(rows[0]).size() < 2 || io_detail::split(rows[0])[0] != "id" ||
      io_detail::split(rows[0])[1] != "omega") {
    throw InputError(where + ": header must be id,omega,w");
  }
  LoadedWeights out;
  std::vector<double> omega;
  std::unordered_set<std::string_view> seen;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].empty()) continue;
    const auto cells = io_detail::split(rows[r]);
    const std::string line_ref = where + ":" + std::to_string(r + 1);
    if (cells.size() < 2) throw InputError(line_ref + ": expected id,omega[,w]");
    const auto value = io_detail::parse_double(cells[1]);
    if (!value || !std::isfinite(*value)) {
      throw InputError(line_ref + ": invalid omega '" + std::string(cells[1]) + "'");
    }
    if (!seen.insert(cells[0]).second) {
      throw InputError(line_ref + ": duplicate id '" + std::string(cells[0]) + "'");
    }
    out.ids.emplace_back(cells[0]);
    omega.push_back(*value);
  }
  out.weights = ExampleWeights(std::move(omega));
  return out;
}

inline LoadedWeights load_weights(const std::filesystem::path& path) {
  return parse_weights_csv(io_detail::read_file(path), path.string());
}

/// Loads weights and aligns them to `dataset` row order. The id sets must match exactly.
inline ExampleWeights load_weights(const std::filesystem::path& path, const FeatureDataset& dataset) {
  auto loaded = load_weights(path);
  std::unordered_map<std::string_view, std::size_t> position;
  for (std::size_t i = 0; i < loaded.ids.size(); ++i) position.emplace(loaded.ids[i], i);

  std::vector<std::string> missing;
  std::vector<double> omega(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto it = position.find(dataset.ids()[i]);
    if (it == position.end()) {
      missing.push_back(dataset.ids()[i]);
    } else {
      omega[i] = loaded.weights.omega()[it->second];
    }
  }
  const auto join = [](const std::vector<std::string>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size() && i < 20; ++i) s += (i ? ", " : "") + items[i];
    if (items.size() > 20) s += ", ... (" + std::to_string(items.size()) + " total)";
    return s;
  };
  if (!missing.empty()) {
    throw InputError("'" + path.string() + "' has no weight for ids: " + join(missing));
  }
  if (loaded.ids.size() != dataset.size()) {
    std::unordered_set<std::string_view> known(dataset.ids().begin(), dataset.ids().end());
    std::vector<std::string> extra;
    for (const auto& id : loaded.ids) {
      if (!known.count(id)) extra.push_back(id);
    }
    throw InputError("'" + path.string() + "' has weights for ids not in the dataset: " + join(extra));
  }
  return ExampleWeights(std::move(omega));
}

// ---------------------------------------------------------------------------
// Flat key=value records (reports, color specs)

using KeyValueRecord = std::vector<std::pair<std::string, std::string>>;

inline void write_key_values(std::ostream& out, const KeyValueRecord& record) {
  for (const auto& [key, value] : record) out << key << '=' << value << '\n';
}

inline void save_key_values(const KeyValueRecord& record, const std::filesystem::path& path) {
  auto out = io_detail::open_for_write(path);
  write_key_values(out, record);
}

inline std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> out;
  for (auto line : io_detail::lines(text)) {
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw InputError("malformed record line '" + std::string(line) + "'");
    out.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }
  return out;
}

}  // namespace repair
