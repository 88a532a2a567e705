#include "nli/text.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <locale>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "nli/error.hpp"

namespace nli {

std::string_view label_name(Label label) {
  switch (label) {
    case Label::entailment: return "entailment";
    case Label::neutral: return "neutral";
    case Label::contradiction: return "contradiction";
  }
  return "?";
}

std::optional<Label> parse_label(std::string_view name) {
  if (name == "entailment") return Label::entailment;
  if (name == "neutral") return Label::neutral;
  if (name == "contradiction") return Label::contradiction;
  return std::nullopt;
}

// --- UTF-8 ------------------------------------------------------------------

namespace {

// Decodes one code point at s[i]; returns bytes consumed, 0 when invalid.
std::size_t decode_one(std::string_view s, std::size_t i, char32_t& cp) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len = 0;
  if (b0 < 0x80) {
    cp = b0;
    return 1;
  } else if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3F);
  }
  return len;
}

const std::locale* utf8_locale() {
  static const std::locale* loc = []() -> const std::locale* {
    for (const char* name : {"C.UTF-8", "C.utf8", "en_US.UTF-8"}) {
      try {
        return new std::locale(name);
      } catch (const std::runtime_error&) {
      }
    }
    return nullptr;
  }();
  return loc;
}

char32_t lower(char32_t cp) {
  if (cp < 0x80) return (cp >= 'A' && cp <= 'Z') ? cp + 32 : cp;
  const std::locale* loc = utf8_locale();
  if (!loc) return cp;
  return static_cast<char32_t>(std::tolower(static_cast<wchar_t>(cp), *loc));
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::vector<std::string_view> split_whitespace(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space(s[i])) ++i;
    std::size_t j = i;
    while (j < s.size() && !is_space(s[j])) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

}  // namespace

std::vector<char32_t> code_points(std::string_view utf8) {
  std::vector<char32_t> out;
  for (std::size_t i = 0; i < utf8.size();) {
    char32_t cp = 0;
    std::size_t n = decode_one(utf8, i, cp);
    if (n == 0) {
      cp = static_cast<unsigned char>(utf8[i]);
      n = 1;
    }
    out.push_back(cp);
    i += n;
  }
  return out;
}

std::string to_utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

// --- normalization ----------------------------------------------------------

bool is_numeric_token(std::string_view s) {
  std::size_t i = 0;
  if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
  const std::size_t start = i;
  while (i < s.size() && is_digit(s[i])) ++i;
  const std::size_t lead = i - start;
  if (lead == 0) return false;
  if (i < s.size() && s[i] == ',') {
    if (lead > 3) return false;
    while (i < s.size() && s[i] == ',') {
      if (i + 4 > s.size() || !is_digit(s[i + 1]) || !is_digit(s[i + 2]) || !is_digit(s[i + 3])) return false;
      i += 4;
      if (i < s.size() && is_digit(s[i])) return false;
    }
  }
  if (i < s.size() && s[i] == '.') {
    ++i;
    const std::size_t frac = i;
    while (i < s.size() && is_digit(s[i])) ++i;
    if (i == frac) return false;
  }
  return i == s.size();
}

std::string normalize_token(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size();) {
    char32_t cp = 0;
    const std::size_t n = decode_one(raw, i, cp);
    if (n == 0) {
      out += raw[i];
      ++i;
      continue;
    }
    out += to_utf8(lower(cp));
    i += n;
  }
  if (is_numeric_token(out)) return std::string(kNumToken);
  return out;
}

std::vector<std::string> tokenize(std::string_view text, std::optional<std::string_view> binary_parse) {
  std::vector<std::string> out;
  if (binary_parse) {
    for (auto piece : split_whitespace(*binary_parse))
      if (piece != "(" && piece != ")") out.push_back(normalize_token(piece));
  } else {
    for (auto piece : split_whitespace(text)) out.push_back(normalize_token(piece));
  }
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// --- Vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (std::string_view t : {kPadToken, kUnkToken, kNumToken}) {
    index_.emplace(std::string(t), tokens_.size());
    tokens_.emplace_back(t);
  }
}

Vocabulary Vocabulary::build(const std::vector<NLIExample>& train) {
  Vocabulary v;
  for (const auto& ex : train) {
    for (const auto& t : ex.premise) v.add(t);
    for (const auto& t : ex.hypothesis) v.add(t);
  }
  return v;
}

std::size_t Vocabulary::add(std::string_view token) {
  if (token == kPadToken) return kUnk;
  if (auto it = index_.find(std::string(token)); it != index_.end()) return it->second;
  index_.emplace(std::string(token), tokens_.size());
  tokens_.emplace_back(token);
  return tokens_.size() - 1;
}

std::optional<std::size_t> Vocabulary::find(std::string_view token) const {
  if (auto it = index_.find(std::string(token)); it != index_.end()) return it->second;
  return std::nullopt;
}

std::size_t Vocabulary::id(std::string_view token) const {
  if (token == kPadToken) return kUnk;
  return find(token).value_or(kUnk);
}

void Vocabulary::write(std::ostream& out) const {
  out << "#nli-vocab pad=" << kPad << " unk=" << kUnk << " num=" << kNum << " size=" << tokens_.size() << "\n";
  for (const auto& t : tokens_) out << t << "\n";
}

Vocabulary Vocabulary::read(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw DataError("vocabulary: missing header line");
  std::size_t pad = 0, unk = 0, num = 0, size = 0;
  if (std::sscanf(header.c_str(), "#nli-vocab pad=%zu unk=%zu num=%zu size=%zu", &pad, &unk, &num, &size) != 4)
    throw DataError("vocabulary: malformed header '" + header + "'");
  if (pad != kPad || unk != kUnk || num != kNum)
    throw DataError("vocabulary: reserved indices " + header + " do not match this build");
  std::vector<std::string> tokens;
  std::string line;
  while (tokens.size() < size && std::getline(in, line)) tokens.push_back(line);
  if (tokens.size() != size)
    throw DataError("vocabulary: header declares " + std::to_string(size) + " tokens, found " +
                    std::to_string(tokens.size()));
  if (size < 3 || tokens[kPad] != kPadToken || tokens[kUnk] != kUnkToken || tokens[kNum] != kNumToken)
    throw DataError("vocabulary: reserved tokens missing");
  Vocabulary v;
  for (std::size_t i = 3; i < tokens.size(); ++i)
    if (v.add(tokens[i]) != i) throw DataError("vocabulary: duplicate token '" + tokens[i] + "'");
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  write(out);
  if (!out) throw IoError("failed writing vocabulary " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary " + path.string());
  return read(in);
}

std::uint64_t Vocabulary::hash() const {
  std::ostringstream s;
  write(s);
  return fnv1a(s.str());
}

// --- CharVocabulary ---------------------------------------------------------

CharVocabulary::CharVocabulary() = default;

CharVocabulary CharVocabulary::build(const std::vector<NLIExample>& train) {
  CharVocabulary v;
  for (const auto& ex : train)
    for (const auto* side : {&ex.premise, &ex.hypothesis})
      for (const auto& t : *side)
        for (char32_t cp : code_points(t)) v.add(cp);
  return v;
}

std::size_t CharVocabulary::add(char32_t cp) {
  if (auto it = index_.find(cp); it != index_.end()) return it->second;
  const std::size_t id = chars_.size() + 2;
  chars_.push_back(cp);
  index_.emplace(cp, id);
  return id;
}

std::size_t CharVocabulary::id(char32_t cp) const {
  if (auto it = index_.find(cp); it != index_.end()) return it->second;
  return kUnk;
}

void CharVocabulary::write(std::ostream& out) const {
  out << "#nli-chars pad=" << kPad << " unk=" << kUnk << " size=" << size() << "\n";
  out << "<pad>\n<unk>\n";
  for (char32_t cp : chars_) out << to_utf8(cp) << "\n";
}

CharVocabulary CharVocabulary::read(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw DataError("char vocabulary: missing header line");
  std::size_t pad = 0, unk = 0, size = 0;
  if (std::sscanf(header.c_str(), "#nli-chars pad=%zu unk=%zu size=%zu", &pad, &unk, &size) != 3)
    throw DataError("char vocabulary: malformed header '" + header + "'");
  if (pad != kPad || unk != kUnk || size < 2) throw DataError("char vocabulary: reserved indices do not match");
  std::string line;
  if (!std::getline(in, line) || line != "<pad>" || !std::getline(in, line) || line != "<unk>")
    throw DataError("char vocabulary: reserved entries missing");
  CharVocabulary v;
  for (std::size_t i = 2; i < size; ++i) {
    if (!std::getline(in, line)) throw DataError("char vocabulary: truncated at entry " + std::to_string(i));
    auto cps = code_points(line);
    if (cps.size() != 1) throw DataError("char vocabulary: entry " + std::to_string(i) + " is not one character");
    if (v.add(cps[0]) != i) throw DataError("char vocabulary: duplicate entry " + std::to_string(i));
  }
  return v;
}

void CharVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write char vocabulary " + path.string());
  write(out);
  if (!out) throw IoError("failed writing char vocabulary " + path.string());
}

CharVocabulary CharVocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read char vocabulary " + path.string());
  return read(in);
}

std::uint64_t CharVocabulary::hash() const {
  std::ostringstream s;
  write(s);
  return fnv1a(s.str());
}

// --- corpus -----------------------------------------------------------------

LoadedDataset parse_dataset(std::istream& in, SplitRole, const std::string& source) {
  using nlohmann::json;
  LoadedDataset out;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw DataError(source + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) fail("record is not an object");
    for (const char* field : {"gold_label", "sentence1", "sentence2"})
      if (!rec.contains(field) || !rec[field].is_string()) fail(std::string("missing required field ") + field);

    const std::string gold = rec["gold_label"];
    if (gold == "-") {
      ++out.stats.dropped_label;
      continue;
    }
    const auto label = parse_label(gold);
    if (!label) fail("unknown gold_label '" + gold + "'");

    auto side = [&](const char* text_key, const char* parse_key) {
      const std::string text = rec[text_key];
      if (rec.contains(parse_key) && rec[parse_key].is_string()) {
        const std::string parse = rec[parse_key];
        if (!parse.empty()) return tokenize(text, parse);
      }
      return tokenize(text);
    };
    NLIExample ex;
    ex.label = *label;
    ex.premise = side("sentence1", "sentence1_binary_parse");
    ex.hypothesis = side("sentence2", "sentence2_binary_parse");
    if (ex.premise.empty() || ex.hypothesis.empty()) {
      ++out.stats.skipped_empty;
      std::clog << "warning: " << source << ":" << line_no << ": empty sentence, record skipped\n";
      continue;
    }
    ex.genre = rec.contains("genre") && rec["genre"].is_string() ? rec["genre"].get<std::string>() : "unknown";
    if (rec.contains("pairID") && rec["pairID"].is_string())
      ex.pair_id = rec["pairID"].get<std::string>();
    else if (rec.contains("pairID") && rec["pairID"].is_number())
      ex.pair_id = rec["pairID"].dump();
    else
      ex.pair_id = "line-" + std::to_string(line_no);
    out.examples.push_back(std::move(ex));
    ++out.stats.kept;
  }
  return out;
}

LoadedDataset load_dataset(const std::filesystem::path& path, SplitRole role) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus " + path.string());
  return parse_dataset(in, role, path.string());
}

std::vector<NLIExample> mix_snli(const std::vector<NLIExample>& multinli, const std::vector<NLIExample>& snli,
                                 double fraction, std::mt19937_64& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw InvalidInputError("SNLI fraction must lie in [0, 1], got " + std::to_string(fraction));
  const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(snli.size())));
  std::vector<std::size_t> order(snli.size());
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first `take` slots are a uniform sample.
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(take);
  std::sort(order.begin(), order.end());
  std::vector<NLIExample> out = multinli;
  out.reserve(multinli.size() + take);
  for (std::size_t i : order) out.push_back(snli[i]);
  return out;
}

// --- embeddings -------------------------------------------------------------

namespace {

float draw_unknown(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (;;) {
    const auto v = static_cast<float>(u(rng));
    if (v > -0.05 && v < 0.05) return v;
  }
}

}  // namespace

EmbeddingLoad random_embeddings(const Vocabulary& vocab, std::size_t dim, std::mt19937_64& rng) {
  if (dim == 0) throw ConfigError("embedding dimension must be positive");
  Tensor<float> m(Shape{vocab.size(), dim});
  for (std::size_t r = 0; r < vocab.size(); ++r)
    if (r != Vocabulary::kPad)
      for (auto& v : m.row(r)) v = draw_unknown(rng);
  EmbeddingLoad out;
  out.matrix = Parameter<float>("word_embeddings", std::move(m), false);
  out.random_rows = vocab.size() - 1;
  return out;
}

EmbeddingLoad parse_embeddings(std::istream& in, const Vocabulary& vocab, std::size_t dim, std::mt19937_64& rng) {
  EmbeddingLoad out = random_embeddings(vocab, dim, rng);
  out.random_rows = 0;
  std::vector<std::uint8_t> seen(vocab.size(), 0);
  std::string line;
  std::vector<float> values;
  bool dimension_checked = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_whitespace(line);
    values.clear();
    bool ok = fields.size() >= 2;
    for (std::size_t k = 1; ok && k < fields.size(); ++k) {
      float v = 0;
      const auto* b = fields[k].data();
      const auto* e = b + fields[k].size();
      auto [p, ec] = std::from_chars(b, e, v);
      ok = ec == std::errc() && p == e && std::isfinite(v);
      values.push_back(v);
    }
    if (!ok) {
      ++out.malformed_lines;
      continue;
    }
    if (!dimension_checked) {
      // word2vec-style "count dim" header line
      if (line_no == 1 && fields.size() == 2 && values[0] == std::floor(values[0]) &&
          fields[0].find_first_not_of("0123456789") == std::string_view::npos)
        continue;
      if (values.size() != dim)
        throw ConfigError("embedding file has dimension " + std::to_string(values.size()) + ", expected " +
                          std::to_string(dim));
      dimension_checked = true;
    }
    if (values.size() != dim) {
      ++out.malformed_lines;
      continue;
    }
    const auto id = vocab.find(fields[0]);
    if (!id || *id == Vocabulary::kPad || seen[*id]) continue;
    seen[*id] = 1;
    std::copy(values.begin(), values.end(), out.matrix.value.row(*id).begin());
    ++out.from_file;
  }
  if (out.malformed_lines) std::clog << "warning: skipped " << out.malformed_lines << " malformed embedding lines\n";
  out.random_rows = vocab.size() - 1 - out.from_file;
  return out;
}

EmbeddingLoad load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, std::size_t dim,
                              std::mt19937_64& rng) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read embeddings " + path.string());
  return parse_embeddings(in, vocab, dim, rng);
}

// --- batching ---------------------------------------------------------------

SentenceBatch make_sentence_batch(const std::vector<const std::vector<std::string>*>& sentences,
                                  const Vocabulary& vocab, const CharVocabulary& chars) {
  SentenceBatch sb;
  sb.batch = sentences.size();
  if (sb.batch == 0) throw InvalidInputError("empty batch");
  std::vector<std::vector<std::vector<char32_t>>> cps(sb.batch);
  sb.max_chars = 1;
  for (std::size_t i = 0; i < sb.batch; ++i) {
    const auto& s = *sentences[i];
    if (s.empty()) throw InvalidInputError("empty sentence in batch");
    sb.length = std::max(sb.length, s.size());
    sb.lengths.push_back(s.size());
    for (const auto& tok : s) {
      cps[i].push_back(code_points(tok));
      sb.max_chars = std::max(sb.max_chars, cps[i].back().size());
    }
  }
  const std::size_t L = sb.length, C = sb.max_chars;
  sb.token_ids.assign(sb.batch * L, Vocabulary::kPad);
  sb.mask.assign(sb.batch * L, 0);
  sb.char_ids.assign(sb.batch * L * C, CharVocabulary::kPad);
  sb.char_mask.assign(sb.batch * L * C, 0);
  for (std::size_t i = 0; i < sb.batch; ++i) {
    const auto& s = *sentences[i];
    for (std::size_t t = 0; t < s.size(); ++t) {
      sb.token_ids[i * L + t] = vocab.id(s[t]);
      // A token that normalizes to "<pad>" maps to UNK, so the mask stays
      // equal to (id != PAD).
      sb.mask[i * L + t] = 1;
      for (std::size_t c = 0; c < cps[i][t].size(); ++c) {
        sb.char_ids[(i * L + t) * C + c] = chars.id(cps[i][t][c]);
        sb.char_mask[(i * L + t) * C + c] = 1;
      }
    }
  }
  return sb;
}

std::vector<const NLIExample*> select_examples(const std::vector<NLIExample>& examples, const BatchOptions& options,
                                               std::mt19937_64& rng) {
  std::vector<const NLIExample*> kept;
  kept.reserve(examples.size());
  for (const auto& ex : examples)
    if (options.role != SplitRole::train || ex.premise.size() <= options.max_premise_len) kept.push_back(&ex);
  if (options.role == SplitRole::train) std::shuffle(kept.begin(), kept.end(), rng);
  return kept;
}

std::vector<Batch> make_batches(const std::vector<NLIExample>& examples, const Vocabulary& vocab,
                                const CharVocabulary& chars, const BatchOptions& options, std::mt19937_64& rng) {
  if (options.batch_size < 1) throw ConfigError("batch size must be at least 1");
  const auto kept = select_examples(examples, options, rng);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < kept.size(); start += options.batch_size) {
    const std::size_t end = std::min(kept.size(), start + options.batch_size);
    std::vector<const std::vector<std::string>*> prem, hyp;
    Batch b;
    for (std::size_t k = start; k < end; ++k) {
      prem.push_back(&kept[k]->premise);
      hyp.push_back(&kept[k]->hypothesis);
      b.labels.push_back(static_cast<int>(kept[k]->label));
      b.genres.push_back(kept[k]->genre);
      b.pair_ids.push_back(kept[k]->pair_id);
    }
    b.premise = make_sentence_batch(prem, vocab, chars);
    b.hypothesis = make_sentence_batch(hyp, vocab, chars);
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace nli
