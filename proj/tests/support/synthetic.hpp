#pragma once

// Rule-labelled NLI pairs. The hypothesis is derived from the premise:
//   dropping modifiers            -> entailment
//   adding a modifier not present -> neutral
//   negating the verb             -> contradiction

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "nli/text.hpp"

namespace nli::test {

struct SyntheticOptions {
  std::size_t size = 32;
  std::uint64_t seed = 1;
  // Number of nouns, verbs and modifiers drawn from; larger means a bigger
  // vocabulary and a harder task.
  std::size_t breadth = 6;
};

inline const std::vector<std::string>& matched_genres() {
  static const std::vector<std::string> g{"fiction", "government", "slate", "telephone", "travel"};
  return g;
}

inline std::vector<NLIExample> synthetic_nli(const SyntheticOptions& options) {
  static const std::vector<std::string> nouns{"man",  "woman", "dog",  "child", "girl",   "boy",   "cat",
                                              "bird", "chef",  "team", "pilot", "farmer", "nurse", "artist"};
  static const std::vector<std::string> verbs{"runs", "sleeps", "eats", "sings", "waits", "reads", "swims",
                                              "works", "dances", "cooks", "drives", "paints", "laughs", "jumps"};
  static const std::vector<std::string> places{"outside", "indoors", "downtown", "upstairs", "nearby", "abroad",
                                               "today",   "tonight", "alone",    "quietly",  "slowly", "happily",
                                               "again",   "early"};
  static const std::vector<std::string> adjectives{"old", "young", "tall", "small", "happy", "tired", "brown",
                                                   "busy", "quiet", "noisy", "clever", "strange", "proud", "calm"};
  const std::size_t k = std::min<std::size_t>(std::max<std::size_t>(options.breadth, 2), nouns.size());
  std::mt19937_64 rng(options.seed);
  auto pick = [&](const std::vector<std::string>& from) {
    return from[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)];
  };

  std::vector<NLIExample> out;
  out.reserve(options.size);
  for (std::size_t i = 0; i < options.size; ++i) {
    const std::string noun = pick(nouns), verb = pick(verbs), adj = pick(adjectives), place = pick(places);
    std::string extra = pick(places);
    while (extra == place) extra = places[(std::find(places.begin(), places.end(), extra) - places.begin() + 1) % k];
    const auto label = static_cast<Label>(i % kNumClasses);
    NLIExample e;
    e.pair_id = "syn-" + std::to_string(options.seed) + "-" + std::to_string(i);
    e.genre = matched_genres()[i % matched_genres().size()];
    e.label = label;
    e.premise = {"the", adj, noun, verb, place};
    switch (label) {
      case Label::entailment:
        e.hypothesis = (rng() & 1) ? std::vector<std::string>{"the", noun, verb}
                                   : std::vector<std::string>{"a", noun, verb, place};
        break;
      case Label::neutral:
        e.hypothesis = {"the", adj, noun, verb, place, extra};
        break;
      case Label::contradiction:
        e.hypothesis = {"the", noun, "does", "not", verb.substr(0, verb.size() - 1)};
        break;
    }
    out.push_back(std::move(e));
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline void write_jsonl(const std::vector<NLIExample>& examples, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  auto join = [](const std::vector<std::string>& tokens) {
    std::string s;
    for (const auto& t : tokens) s += (s.empty() ? "" : " ") + t;
    return s;
  };
  for (const auto& e : examples) {
    nlohmann::json j{{"gold_label", std::string(label_name(e.label))},
                     {"sentence1", join(e.premise)},
                     {"sentence2", join(e.hypothesis)},
                     {"genre", e.genre},
                     {"pairID", e.pair_id}};
    out << j.dump() << '\n';
  }
}

}  // namespace nli::test
