#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "nli/encoder.hpp"
#include "nli/evaluation.hpp"
#include "nli/training.hpp"

namespace nli {

struct SweepCell {
  Pooling pooling = Pooling::mean;
  bool use_chars = true;
};

// Every pooling method with and without chars: 4 x 2 cells.
std::vector<SweepCell> sweep_grid();

struct RunRecord {
  Pooling pooling = Pooling::mean;
  bool use_chars = true;
  std::uint64_t seed = 0;
  double best_dev_accuracy = 0.0;
  std::size_t best_epoch = 0;
};

std::string to_jsonl(const RunRecord& record);
std::vector<RunRecord> parse_run_records(std::istream& in);

struct CellSummary {
  SweepCell cell;
  std::vector<double> accuracies;
  double mean = 0.0;
  double half_width = 0.0;
  double best = 0.0;
};

struct SweepSummary {
  std::vector<CellSummary> cells;  // grid order; only cells with records
  const CellSummary* find(Pooling pooling, bool use_chars) const;
};

// Pure fold over the records. Every cell present needs at least 2 runs.
SweepSummary summarize(const std::vector<RunRecord>& records);

// Mean +- 95% half-width per cell, methods as rows, chars / no chars as columns.
std::string format_mean_table(const SweepSummary& summary);
// Best accuracy per cell, same layout.
std::string format_best_table(const SweepSummary& summary);

struct SweepOptions {
  std::size_t runs_per_cell = 10;
  std::uint64_t base_seed = 1;
  std::size_t jobs = 1;
};

// Trains one model for a cell with the given seed and returns the finished
// record. Supplied by the caller so the sweep stays independent of how data
// and embeddings are obtained.
using RunFn = std::function<RunRecord(const SweepCell& cell, std::uint64_t seed)>;

// Runs runs_per_cell seeds for every grid cell on up to `jobs` threads.
// Records come back in grid-then-seed order regardless of scheduling, and
// each one is also appended to `sink` (one JSON line) as it completes.
std::vector<RunRecord> pooling_sweep(const SweepOptions& options, const RunFn& run, std::ostream* sink = nullptr);

}  // namespace nli
