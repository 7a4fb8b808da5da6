#pragma once

// Experiment recipes as `key = value` text files. Blank lines and lines
// starting with '#' are ignored. Keys map onto ModelConfig, TrainSettings and
// SamplerConfig fields; values given on the command line override the file,
// which overrides the built-in defaults.

#include "tempogen/generation.hpp"
#include "tempogen/model.hpp"
#include "tempogen/train.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace tempogen {

struct RunConfig {
  ModelConfig model;
  TrainSettings train;
  SamplerConfig sampler;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

// Applies every entry; unknown keys and unparsable values raise ConfigError.
void apply_key_values(const KeyValues& values, RunConfig& config);

// Every recognised key with its current value, sorted by key.
KeyValues to_key_values(const RunConfig& config);

}  // namespace tempogen
