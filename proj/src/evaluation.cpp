#include "nli/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>
#include "json.hpp"

#include "nli/error.hpp"

namespace nli {

const std::vector<std::string>& known_genres() {
  static const std::vector<std::string> genres{"fiction",    "government", "slate",   "telephone", "travel",
                                               "nineeleven", "facetoface", "letters", "oup",       "verbatim"};
  return genres;
}

std::string genre_display_name(const std::string& genre) {
  static const std::map<std::string, std::string> names{
      {"fiction", "Fiction"},       {"government", "Government"},   {"slate", "Slate"},
      {"telephone", "Telephone"},   {"travel", "Travel"},           {"nineeleven", "9/11"},
      {"facetoface", "Face-to-face"}, {"letters", "Letters"},       {"oup", "Oup"},
      {"verbatim", "Verbatim"}};
  auto it = names.find(genre);
  return it == names.end() ? genre : it->second;
}

EvalReport make_report(const std::vector<NLIExample>& examples, const std::vector<PredictionDistribution>& predictions,
                       const std::string& split) {
  if (examples.empty()) throw InvalidInputError("cannot evaluate an empty dataset");
  if (predictions.size() != examples.size())
    throw InvalidInputError("got " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(examples.size()) + " examples");
  EvalReport report;
  report.split = split;
  std::map<std::string, GenreAccuracy> by_genre;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const int gold = static_cast<int>(examples[i].label);
    const int pred = predictions[i].predicted;
    ++report.confusion[gold][pred];
    ++report.total;
    auto& g = by_genre[examples[i].genre];
    ++g.total;
    if (gold == pred) {
      ++report.correct;
      ++g.correct;
    }
  }
  for (const auto& name : known_genres()) {
    auto it = by_genre.find(name);
    if (it == by_genre.end()) continue;
    it->second.genre = name;
    report.genres.push_back(it->second);
    by_genre.erase(it);
  }
  for (auto& [name, g] : by_genre) {
    g.genre = name;
    report.genres.push_back(g);
  }
  for (auto& g : report.genres) g.display = genre_display_name(g.genre);
  return report;
}

EvalReport evaluate(const Predictor& predictor, const std::vector<NLIExample>& examples, const std::string& split) {
  if (examples.empty()) throw InvalidInputError("cannot evaluate an empty dataset");
  return make_report(examples, predictor.predict(examples), split);
}

std::string format_report(const EvalReport& report) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-18s %9s %8s %8s\n", ("[" + report.split + "]").c_str(), "accuracy", "correct",
                "total");
  out << line;
  for (const auto& g : report.genres) {
    std::snprintf(line, sizeof line, "%-18s %9.3f %8zu %8zu\n", g.display.c_str(), 100.0 * g.accuracy(), g.correct,
                  g.total);
    out << line;
  }
  std::snprintf(line, sizeof line, "%-18s %9.3f %8zu %8zu\n", "MultiNLI Overall", 100.0 * report.accuracy(),
                report.correct, report.total);
  out << line;
  out << "confusion (rows gold, cols predicted: entailment neutral contradiction)\n";
  for (int g = 0; g < kNumClasses; ++g) {
    std::snprintf(line, sizeof line, "  %-13s %8zu %8zu %8zu\n", std::string(label_name(static_cast<Label>(g))).c_str(),
                  report.confusion[g][0], report.confusion[g][1], report.confusion[g][2]);
    out << line;
  }
  return out.str();
}

std::string report_json(const EvalReport& report) {
  nlohmann::json j;
  j["split"] = report.split;
  j["total"] = report.total;
  j["correct"] = report.correct;
  j["accuracy"] = report.accuracy();
  j["confusion"] = report.confusion;
  auto& genres = j["genres"] = nlohmann::json::array();
  for (const auto& g : report.genres)
    genres.push_back({{"genre", g.genre}, {"name", g.display}, {"correct", g.correct}, {"total", g.total},
                      {"accuracy", g.accuracy()}});
  return j.dump(2);
}

// --- statistics -------------------------------------------------------------

double t_critical_95(std::size_t df) {
  if (df == 0) throw InvalidInputError("t quantile needs at least one degree of freedom");
  boost::math::students_t dist(static_cast<double>(df));
  return boost::math::quantile(dist, 0.975);
}

Interval confidence_interval(std::span<const double> values) {
  if (values.size() < 2) throw InvalidInputError("a confidence interval needs at least 2 runs");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double stdev = std::sqrt(ss / (n - 1.0));
  return {mean, t_critical_95(values.size() - 1) * stdev / std::sqrt(n)};
}

// --- ensembles --------------------------------------------------------------

PredictionDistribution average(std::span<const PredictionDistribution> members) {
  if (members.empty()) throw InvalidInputError("cannot average zero distributions");
  // Offset from the first member: equal members average exactly.
  PredictionDistribution out;
  const auto& first = members.front().probs;
  for (int c = 0; c < kNumClasses; ++c) {
    double offset = 0.0;
    for (const auto& m : members) offset += m.probs[c] - first[c];
    out.probs[c] = first[c] + offset / static_cast<double>(members.size());
  }
  out.predicted = argmax(out.probs);
  return out;
}

Ensemble::Ensemble(std::vector<std::shared_ptr<const Model>> members) : members_(std::move(members)) {
  if (members_.empty()) throw ConfigError("an ensemble needs at least one model");
  const auto& first = *members_.front();
  for (std::size_t k = 1; k < members_.size(); ++k) {
    const auto& m = *members_[k];
    if (m.vocab().hash() != first.vocab().hash() || m.chars().hash() != first.chars().hash())
      throw ConfigError("ensemble member " + std::to_string(k) + " was built with a different vocabulary");
  }
}

std::vector<PredictionDistribution> Ensemble::predict(const std::vector<NLIExample>& examples) const {
  if (members_.size() == 1) return members_.front()->predict(examples);
  std::vector<std::vector<PredictionDistribution>> per_model;
  for (const auto& m : members_) per_model.push_back(m->predict(examples));
  std::vector<PredictionDistribution> out(examples.size());
  std::vector<PredictionDistribution> column(members_.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    for (std::size_t k = 0; k < members_.size(); ++k) column[k] = per_model[k][i];
    out[i] = average(column);
  }
  return out;
}

// --- export -----------------------------------------------------------------

namespace {

void write_row(std::ostream& out, const std::string& pair_id, const char* role, std::span<const float> values) {
  out << pair_id << '\t' << role;
  char buf[32];
  for (float v : values) {
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    out << '\t' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
  }
  out << '\n';
}

}  // namespace

std::size_t export_representations(const Model& model, const std::vector<NLIExample>& examples,
                                   const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  fs::path tmp = path;
  tmp += ".partial";
  std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + tmp.string());
  std::size_t records = 0;
  try {
    std::size_t next = 0;
    for (const auto& batch : model.batches(examples)) {
      auto reps = model.represent(batch);
      for (std::size_t i = 0; i < batch.size(); ++i, ++next) {
        write_row(out, examples[next].pair_id, "premise", reps.premise.row(i));
        write_row(out, examples[next].pair_id, "hypothesis", reps.hypothesis.row(i));
        records += 2;
      }
    }
    out.close();
    if (!out) throw IoError("failed while writing " + tmp.string());
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move export into place at " + path.string() + ": " + ec.message());
  } catch (...) {
    out.close();
    std::error_code ignored;
    fs::remove(tmp, ignored);
    throw;
  }
  return records;
}

}  // namespace nli
