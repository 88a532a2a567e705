#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nli/model.hpp"

namespace nli {

struct GenreAccuracy {
  std::string genre;    // as found in the data
  std::string display;  // table row name
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  std::string split;
  std::size_t total = 0;
  std::size_t correct = 0;
  // confusion[gold][predicted]
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{};
  // Known genres in table order, then any others alphabetically.
  std::vector<GenreAccuracy> genres;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

// Matched genres first, then mismatched ones.
const std::vector<std::string>& known_genres();
std::string genre_display_name(const std::string& genre);

EvalReport make_report(const std::vector<NLIExample>& examples, const std::vector<PredictionDistribution>& predictions,
                       const std::string& split);
// Throws InvalidInputError on an empty dataset.
EvalReport evaluate(const Predictor& predictor, const std::vector<NLIExample>& examples,
                    const std::string& split = "matched");

// Human-readable table with percentages and a "MultiNLI Overall" row.
std::string format_report(const EvalReport& report);
std::string report_json(const EvalReport& report);

// Student-t interval at 95% confidence (needs at least two runs).
struct Interval {
  double mean = 0.0;
  double half_width = 0.0;
};
Interval confidence_interval(std::span<const double> values);
// Two-sided 95% critical value, i.e. the 0.975 quantile with `df` degrees of freedom.
double t_critical_95(std::size_t df);

// Element-wise mean of distributions, argmax with lowest-index ties.
PredictionDistribution average(std::span<const PredictionDistribution> members);

class Ensemble : public Predictor {
 public:
  // Throws ConfigError when the members disagree on vocabularies or on
  // representation shape.
  explicit Ensemble(std::vector<std::shared_ptr<const Model>> members);

  std::vector<PredictionDistribution> predict(const std::vector<NLIExample>& examples) const override;
  const std::vector<std::shared_ptr<const Model>>& members() const { return members_; }

 private:
  std::vector<std::shared_ptr<const Model>> members_;
};

// Writes "pair_id<TAB>role<TAB>v1<TAB>...<TAB>vd" for premise and hypothesis
// of every example. Goes through a temporary file; nothing is left behind on
// failure. Returns the number of records.
std::size_t export_representations(const Model& model, const std::vector<NLIExample>& examples,
                                   const std::filesystem::path& path);

}  // namespace nli
