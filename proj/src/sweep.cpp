#include "nli/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "nli/error.hpp"

namespace nli {

std::vector<SweepCell> sweep_grid() {
  std::vector<SweepCell> grid;
  for (Pooling p : kAllPoolings)
    for (bool chars : {true, false}) grid.push_back({p, chars});
  return grid;
}

std::string to_jsonl(const RunRecord& r) {
  nlohmann::json j{{"pooling", std::string(pooling_name(r.pooling))},
                   {"chars", r.use_chars},
                   {"seed", r.seed},
                   {"best_dev_accuracy", r.best_dev_accuracy},
                   {"best_epoch", r.best_epoch}};
  return j.dump();
}

std::vector<RunRecord> parse_run_records(std::istream& in) {
  std::vector<RunRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      RunRecord r;
      auto pooling = parse_pooling(j.at("pooling").get<std::string>());
      if (!pooling) throw DataError("run record line " + std::to_string(number) + ": unknown pooling");
      r.pooling = *pooling;
      r.use_chars = j.at("chars").get<bool>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.best_dev_accuracy = j.at("best_dev_accuracy").get<double>();
      r.best_epoch = j.value("best_epoch", std::size_t{0});
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("run record line " + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

const CellSummary* SweepSummary::find(Pooling pooling, bool use_chars) const {
  for (const auto& c : cells)
    if (c.cell.pooling == pooling && c.cell.use_chars == use_chars) return &c;
  return nullptr;
}

SweepSummary summarize(const std::vector<RunRecord>& records) {
  SweepSummary summary;
  for (const auto& cell : sweep_grid()) {
    CellSummary s;
    s.cell = cell;
    for (const auto& r : records)
      if (r.pooling == cell.pooling && r.use_chars == cell.use_chars) s.accuracies.push_back(r.best_dev_accuracy);
    if (s.accuracies.empty()) continue;
    const auto interval = confidence_interval(s.accuracies);
    s.mean = interval.mean;
    s.half_width = interval.half_width;
    s.best = *std::max_element(s.accuracies.begin(), s.accuracies.end());
    summary.cells.push_back(std::move(s));
  }
  return summary;
}

namespace {

template <typename CellFormat>
std::string format_table(const SweepSummary& summary, const char* title, CellFormat cell_text) {
  std::ostringstream out;
  char line[160];
  out << title << '\n';
  std::snprintf(line, sizeof line, "%-8s %-20s %-20s\n", "method", "chars", "no chars");
  out << line;
  for (Pooling p : kAllPoolings) {
    const auto* with = summary.find(p, true);
    const auto* without = summary.find(p, false);
    std::snprintf(line, sizeof line, "%-8s %-20s %-20s\n", std::string(pooling_name(p)).c_str(),
                  with ? cell_text(*with).c_str() : "-", without ? cell_text(*without).c_str() : "-");
    out << line;
  }
  return out.str();
}

}  // namespace

std::string format_mean_table(const SweepSummary& summary) {
  return format_table(summary, "mean matched-dev accuracy (%) with 95% CI", [](const CellSummary& c) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f +- %.2f (n=%zu)", 100.0 * c.mean, 100.0 * c.half_width, c.accuracies.size());
    return std::string(buf);
  });
}

std::string format_best_table(const SweepSummary& summary) {
  return format_table(summary, "best matched-dev accuracy (%)", [](const CellSummary& c) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", 100.0 * c.best);
    return std::string(buf);
  });
}

std::vector<RunRecord> pooling_sweep(const SweepOptions& options, const RunFn& run, std::ostream* sink) {
  if (options.runs_per_cell < 2) throw ConfigError("a sweep needs at least 2 runs per cell");
  struct Job {
    SweepCell cell;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& cell : sweep_grid())
    for (std::size_t k = 0; k < options.runs_per_cell; ++k) jobs.push_back({cell, options.base_seed + k});

  std::vector<RunRecord> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex sink_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        results[i] = run(jobs[i].cell, jobs[i].seed);
        if (sink) {
          std::lock_guard lock(sink_mutex);
          *sink << to_jsonl(results[i]) << '\n' << std::flush;
        }
      } catch (...) {
        std::lock_guard lock(sink_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(options.jobs, 1, jobs.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

}  // namespace nli
