#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ccpo/trace.hpp"
#include "ccpo/trainer.hpp"

namespace ccpo {

/// Where traces come from and how they are split.
struct DataConfig {
  /// Trace file; empty means generate from `synthetic`.
  std::string trace_path;
  SyntheticConfig synthetic;
  std::size_t calibration_size = 200;
  std::size_t test_size = 1000;
};

struct AppConfig {
  RunConfig run;
  DataConfig data;
  std::string output_dir = "run";
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// `key = value` per line; `#` starts a comment; blank lines are skipped. ParseError carries the line.
KeyValues parse_key_values(std::string_view text);

/// Applies one setting. Unknown keys and unparsable values raise ValidationError naming the key.
void apply_setting(AppConfig& config, const std::string& key, const std::string& value);

/// Parses "key=value" as given on the command line.
std::pair<std::string, std::string> split_override(const std::string& text);

/// Reads `path` (if non-empty), applies `overrides` in order, and validates.
AppConfig load_config(const std::filesystem::path& path, const KeyValues& overrides = {});

void validate(const AppConfig& config);

/// All recognized keys, in documentation order.
std::vector<std::string> config_keys();

/// The corpus described by the data section: loaded from file or generated.
TraceCorpus load_corpus(const AppConfig& config);

}  // namespace ccpo
