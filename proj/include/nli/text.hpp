#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nli/autodiff.hpp"

namespace nli {

enum class Label : int { entailment = 0, neutral = 1, contradiction = 2 };
inline constexpr int kNumClasses = 3;

std::string_view label_name(Label label);
std::optional<Label> parse_label(std::string_view name);

enum class SplitRole { train, dev, test };

struct NLIExample {
  std::string pair_id;
  std::string genre;
  std::vector<std::string> premise;
  std::vector<std::string> hypothesis;
  Label label = Label::entailment;
};

// --- normalization ----------------------------------------------------------

inline constexpr std::string_view kNumToken = "<num>";

// Optional sign, digits (plain or comma-grouped in threes), optional decimal
// part: "3", "-7", "1,200", "3.5", "12,345.67".
bool is_numeric_token(std::string_view token);

// Lowercases (Unicode-aware) and collapses numeric tokens to "<num>".
std::string normalize_token(std::string_view raw);

// Parse leaves when a binary parse is given, otherwise whitespace split of
// the plain text. Returned tokens are normalized.
std::vector<std::string> tokenize(std::string_view text, std::optional<std::string_view> binary_parse = std::nullopt);

std::vector<char32_t> code_points(std::string_view utf8);
std::string to_utf8(char32_t cp);

// --- vocabularies -----------------------------------------------------------

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kNum = 2;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary();

  // Every normalized token of the training premises and hypotheses, in
  // first-seen order after the reserved entries.
  static Vocabulary build(const std::vector<NLIExample>& train);

  std::size_t add(std::string_view token);
  // UNK for unknown tokens. A literal "<pad>" in text also maps to UNK so
  // PAD only ever marks padding.
  std::size_t id(std::string_view token) const;
  std::optional<std::size_t> find(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }

  // Header line with the reserved indices, then one token per line; line
  // (k + 2) holds the token with index k.
  void write(std::ostream& out) const;
  static Vocabulary read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  std::uint64_t hash() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

class CharVocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  CharVocabulary();

  // Code points of the training tokens in first-seen order.
  static CharVocabulary build(const std::vector<NLIExample>& train);

  std::size_t add(char32_t cp);
  std::size_t id(char32_t cp) const;
  std::size_t size() const { return chars_.size() + 2; }

  void write(std::ostream& out) const;
  static CharVocabulary read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static CharVocabulary load(const std::filesystem::path& path);
  std::uint64_t hash() const;

  friend bool operator==(const CharVocabulary& a, const CharVocabulary& b) { return a.chars_ == b.chars_; }

 private:
  std::vector<char32_t> chars_;
  std::unordered_map<char32_t, std::size_t> index_;
};

// FNV-1a, used for vocabulary and checkpoint fingerprints.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 14695981039346656037ull);

// --- corpus loading ---------------------------------------------------------

struct LoadStats {
  std::size_t kept = 0;
  std::size_t dropped_label = 0;  // gold_label "-"
  std::size_t skipped_empty = 0;  // a sentence tokenized to nothing
};

struct LoadedDataset {
  std::vector<NLIExample> examples;
  LoadStats stats;
};

// Line-delimited JSON records (gold_label, sentence1, sentence2, optional
// sentence{1,2}_binary_parse, genre, pairID). Placeholder labels are dropped
// for every role.
LoadedDataset load_dataset(const std::filesystem::path& path, SplitRole role);
LoadedDataset parse_dataset(std::istream& in, SplitRole role, const std::string& source = "<stream>");

// Appends a uniform sample (without replacement) of floor(fraction * |snli|)
// SNLI examples to the MultiNLI examples.
std::vector<NLIExample> mix_snli(const std::vector<NLIExample>& multinli, const std::vector<NLIExample>& snli,
                                 double fraction, std::mt19937_64& rng);

// --- embeddings -------------------------------------------------------------

struct EmbeddingLoad {
  Parameter<float> matrix;  // [|V| x dim], frozen
  std::size_t from_file = 0;
  std::size_t random_rows = 0;
  std::size_t malformed_lines = 0;
};

// Rows of tokens present in the file are copied verbatim; all other rows
// (reserved NUM and UNK included) are drawn from U(-0.05, 0.05); PAD is zero.
EmbeddingLoad load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, std::size_t dim,
                              std::mt19937_64& rng);
EmbeddingLoad parse_embeddings(std::istream& in, const Vocabulary& vocab, std::size_t dim, std::mt19937_64& rng);
// Every non-PAD row drawn from U(-0.05, 0.05).
EmbeddingLoad random_embeddings(const Vocabulary& vocab, std::size_t dim, std::mt19937_64& rng);

// --- batching ---------------------------------------------------------------

// One side (premise or hypothesis) of a batch. Index arrays are batch-major:
// token (i, t) lives at i * length + t, char (i, t, c) at (i * length + t) *
// max_chars + c.
struct SentenceBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t max_chars = 0;
  std::vector<std::size_t> token_ids;
  Mask mask;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> char_ids;
  Mask char_mask;
};

SentenceBatch make_sentence_batch(const std::vector<const std::vector<std::string>*>& sentences,
                                  const Vocabulary& vocab, const CharVocabulary& chars);

struct Batch {
  SentenceBatch premise;
  SentenceBatch hypothesis;
  std::vector<int> labels;
  std::vector<std::string> genres;
  std::vector<std::string> pair_ids;

  std::size_t size() const { return labels.size(); }
};

struct BatchOptions {
  std::size_t batch_size = 32;
  SplitRole role = SplitRole::train;
  std::size_t max_premise_len = 200;
};

// Training drops over-long premises and shuffles; other roles keep every
// example in order.
std::vector<const NLIExample*> select_examples(const std::vector<NLIExample>& examples, const BatchOptions& options,
                                               std::mt19937_64& rng);

std::vector<Batch> make_batches(const std::vector<NLIExample>& examples, const Vocabulary& vocab,
                                const CharVocabulary& chars, const BatchOptions& options, std::mt19937_64& rng);

}  // namespace nli
