#pragma once

// Binary container for named fp64 arrays.
//
// Layout (all integers little-endian):
//   bytes 0..7    magic "TGCKPT01"
//   bytes 8..15   uint64 header length H
//   next H bytes  UTF-8 JSON header:
//                   { "format_version": 1,
//                     "config_hash": "<16 hex digits>",
//                     "config": {...}, "metadata": {...},
//                     "arrays": [ { "name", "shape", "offset", "count" }, ... ] }
//   payload       IEEE-754 binary64 values, little-endian; "offset" counts
//                 values (not bytes) from the start of the payload.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tempogen {

inline constexpr int kCheckpointFormatVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

struct Container {
  nlohmann::json config;
  nlohmann::json metadata;
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const;  // throws if absent
  bool has(const std::string& name) const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// FNV-1a over the compact JSON dump.
std::uint64_t config_hash(const nlohmann::json& config);
std::string hex64(std::uint64_t v);

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

}  // namespace tempogen
