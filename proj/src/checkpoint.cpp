#include "nli/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "nli/error.hpp"

namespace nli {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "nli-checkpoint";
constexpr int kVersion = 1;

json config_to_json(const ModelConfig& c) {
  const auto& e = c.encoder;
  return {{"encoder",
           {{"use_chars", e.use_chars},
            {"word_dim", e.word_dim},
            {"char_dim", e.char_dim},
            {"char_hidden", e.char_hidden},
            {"hidden", e.hidden},
            {"pooling", std::string(pooling_name(e.pooling))}}},
          {"mlp_widths", c.mlp_widths},
          {"dropout", c.dropout}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  const auto& e = j.at("encoder");
  c.encoder.use_chars = e.at("use_chars").get<bool>();
  c.encoder.word_dim = e.at("word_dim").get<std::size_t>();
  c.encoder.char_dim = e.at("char_dim").get<std::size_t>();
  c.encoder.char_hidden = e.at("char_hidden").get<std::size_t>();
  c.encoder.hidden = e.at("hidden").get<std::size_t>();
  auto pooling = parse_pooling(e.at("pooling").get<std::string>());
  if (!pooling) throw ConfigError("unknown pooling in model config: " + e.at("pooling").get<std::string>());
  c.encoder.pooling = *pooling;
  c.mlp_widths = j.at("mlp_widths").get<std::vector<std::size_t>>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

template <typename V>
std::string serialize(const V& vocab) {
  std::ostringstream out;
  vocab.write(out);
  return out.str();
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string model_config_json(const ModelConfig& config) { return config_to_json(config).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  std::string blob;
  json table = json::array();
  std::size_t offset = 0;
  for (const auto* p : model.parameters()) {
    for (float v : p->value.values()) put_f32(blob, v);
    table.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}, {"trainable", p->trainable}});
    offset += p->value.size();
  }
  json manifest{{"format", kFormat},
                {"version", kVersion},
                {"config", config_to_json(model.config())},
                {"vocab", serialize(model.vocab())},
                {"vocab_hash", hex(model.vocab().hash())},
                {"chars", serialize(model.chars())},
                {"chars_hash", hex(model.chars().hash())},
                {"epoch", meta.epoch},
                {"dev_accuracy", meta.dev_accuracy},
                {"seed", meta.seed},
                {"parameters", table},
                {"blob_bytes", blob.size()},
                {"blob_fnv1a", hex(fnv1a(blob))}};
  const std::string header = manifest.dump();
  std::string bytes;
  put_u64(bytes, header.size());
  bytes += header;
  bytes += blob;

  std::filesystem::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw IoError("failed while writing checkpoint " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < 8) throw IntegrityError(where + " is truncated (no header)");
  const std::uint64_t header_len = get_u64(bytes.data());
  if (header_len > bytes.size() - 8) throw IntegrityError(where + " is truncated (manifest incomplete)");

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw IntegrityError(where + " has a corrupt manifest: " + e.what());
  }
  try {
    if (manifest.at("format") != kFormat || manifest.at("version") != kVersion)
      throw IntegrityError(where + " is not a version " + std::to_string(kVersion) + " checkpoint");
    const std::size_t blob_bytes = manifest.at("blob_bytes").get<std::size_t>();
    const std::string_view blob(bytes.data() + 8 + header_len, bytes.size() - 8 - header_len);
    if (blob.size() != blob_bytes)
      throw IntegrityError(where + ": blob holds " + std::to_string(blob.size()) + " bytes, manifest declares " +
                           std::to_string(blob_bytes));
    if (hex(fnv1a(blob)) != manifest.at("blob_fnv1a").get<std::string>())
      throw IntegrityError(where + ": parameter checksum mismatch");

    std::istringstream vocab_text(manifest.at("vocab").get<std::string>());
    std::istringstream chars_text(manifest.at("chars").get<std::string>());
    auto vocab = std::make_shared<const Vocabulary>(Vocabulary::read(vocab_text));
    auto chars = std::make_shared<const CharVocabulary>(CharVocabulary::read(chars_text));
    if (hex(vocab->hash()) != manifest.at("vocab_hash").get<std::string>() ||
        hex(chars->hash()) != manifest.at("chars_hash").get<std::string>())
      throw ConfigError(where + ": stored vocabulary does not match its hash");

    const ModelConfig config = config_from_json(manifest.at("config"));
    std::mt19937_64 unused(0);
    Parameter<float> table("word_embeddings", Tensor<float>({vocab->size(), config.encoder.word_dim}), false);
    auto params = ModelParams<float>::create(config, std::move(table), chars->size(), unused);
    auto list = params.parameters(config.encoder.use_chars);
    const auto& entries = manifest.at("parameters");
    if (entries.size() != list.size())
      throw IntegrityError(where + " lists " + std::to_string(entries.size()) + " parameters, the model has " +
                           std::to_string(list.size()));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < list.size(); ++k) {
      const auto& e = entries[k];
      Parameter<float>& p = *list[k];
      if (e.at("name").get<std::string>() != p.name || e.at("shape").get<Shape>() != p.value.shape() ||
          e.at("offset").get<std::size_t>() != offset)
        throw IntegrityError(where + ": parameter " + std::to_string(k) + " (" + e.at("name").get<std::string>() +
                             ") does not match the model layout");
      if ((offset + p.value.size()) * 4 > blob.size()) throw IntegrityError(where + ": blob too short");
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = get_f32(blob.data() + 4 * (offset + i));
      p.trainable = e.at("trainable").get<bool>();
      offset += p.value.size();
    }
    if (offset * 4 != blob.size()) throw IntegrityError(where + ": blob has trailing bytes");

    CheckpointMeta meta;
    meta.epoch = manifest.at("epoch").get<std::size_t>();
    meta.dev_accuracy = manifest.at("dev_accuracy").get<double>();
    meta.seed = manifest.at("seed").get<std::uint64_t>();
    return {Model(config, vocab, chars, std::move(params)), meta};
  } catch (const json::exception& e) {
    throw IntegrityError(where + " has an incomplete manifest: " + e.what());
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab,
                                 const CharVocabulary& chars) {
  auto loaded = load_checkpoint(path);
  if (loaded.model.vocab().hash() != vocab.hash() || loaded.model.chars().hash() != chars.hash())
    throw ConfigError("checkpoint " + path.string() + " was trained with a different vocabulary");
  return loaded;
}

}  // namespace nli
