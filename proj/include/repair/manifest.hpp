#pragma once

// Run manifests. Requires nlohmann/json (json.hpp) and OpenSSL libcrypto.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "repair/errors.hpp"
#include "repair/io.hpp"

namespace repair {

inline constexpr const char* kToolVersion = "1.0.0";

/// Lowercase hex SHA-256 of a byte string.
inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw NumericError("SHA-256 digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(io_detail::read_file(path)); }

struct InputDigest {
  std::string path;
  std::string sha256;
};

/// What a command was asked to do, recorded before any computation.
struct RunManifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<std::uint64_t> seeds;
  std::vector<InputDigest> inputs;
  std::vector<std::string> outputs;
  std::string tool_version = kToolVersion;
  std::string started_at;  // UTC, ISO 8601

  void add_input(const std::filesystem::path& path) { inputs.push_back({path.string(), sha256_file(path)}); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["tool_version"] = tool_version;
    j["started_at"] = started_at;
    j["config"] = config;
    j["seeds"] = seeds;
    auto& in = j["inputs"] = nlohmann::ordered_json::array();
    for (const auto& d : inputs) in.push_back({{"path", d.path}, {"sha256", d.sha256}});
    j["outputs"] = outputs;
    return j;
  }
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

inline void save_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  auto out = io_detail::open_for_write(path);
  out << manifest.to_json().dump(2) << '\n';
  if (!out) throw InputError("failed writing " + path.string());
}

}  // namespace repair
