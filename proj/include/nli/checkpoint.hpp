#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "nli/model.hpp"

namespace nli {

struct CheckpointMeta {
  std::size_t epoch = 0;
  double dev_accuracy = 0.0;
  std::uint64_t seed = 0;
};

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
};

// Layout: 8-byte little-endian manifest length, the JSON manifest (config,
// vocabularies and their hashes, metadata, parameter table, blob checksum),
// then every parameter as little-endian float32 in manifest order.
void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path);

// Throws IntegrityError for truncated or corrupted files and ConfigError
// when the stored vocabularies do not match their recorded hashes.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
// Also requires the checkpoint's vocabularies to hash like the given ones.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab,
                                 const CharVocabulary& chars);

std::string model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace nli
