#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "nli/model.hpp"
#include "nli/training.hpp"

namespace nli {

// Everything a command needs, read from a flat "key = value" file and then
// overridden by flags.
struct RunConfig {
  std::filesystem::path train_file;
  std::filesystem::path dev_matched_file;
  std::filesystem::path dev_mismatched_file;
  std::filesystem::path snli_file;
  double snli_fraction = 0.15;
  // Empty: every word vector is drawn at random.
  std::filesystem::path embeddings;
  std::filesystem::path out_dir = "runs";
  // Keep only the first N examples; 0 keeps all.
  std::size_t train_limit = 0;
  std::size_t dev_limit = 0;

  TrainConfig train;
  ModelConfig model;

  std::size_t runs_per_cell = 10;
  std::size_t jobs = 1;
};

// Keys accepted in config files and by --set, in output order.
const std::vector<std::string>& config_keys();

// Throws ConfigError for unknown keys and unparsable values. Relative paths
// are resolved against `base_dir` when it is not empty.
void apply_config_value(RunConfig& config, const std::string& key, const std::string& value,
                        const std::filesystem::path& base_dir = {});
// '#' starts a comment; blank lines are ignored.
RunConfig parse_config(std::istream& in, const std::string& source = "<config>",
                       const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);
// Round-trips through parse_config.
std::string format_config(const RunConfig& config);

// Ranges and file existence for everything `command` will read.
void validate_config(const RunConfig& config, const std::string& command);

// 0 success, 1 usage or configuration, 2 data, 3 numeric failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;
int exit_code_for(const std::exception& error);

// Default config file when --config is absent.
inline constexpr const char* kConfigEnv = "NLI_CONFIG";

// Entry point of the `nli` tool; args exclude the program name.
int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace nli
