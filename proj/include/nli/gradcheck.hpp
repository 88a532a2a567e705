#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nli {

struct GradcheckOptions {
  std::size_t word_dim = 8;
  std::size_t char_dim = 4;
  std::size_t char_hidden = 5;
  std::size_t hidden = 6;
  std::vector<std::size_t> mlp_widths{7, 7, 7};
  double op_tolerance = 1e-4;
  double model_tolerance = 1e-3;
  double step = 1e-5;
  std::uint64_t seed = 7;
  // Fault injection: scale the backward input of every node of this op.
  std::string corrupt_op;
  double corrupt_factor = 1.0;
};

struct GradcheckGroup {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  double seconds = 0.0;
  bool passed() const;
  std::vector<std::string> failures() const;
};

// |a - n| / max(|a|, |n|, 1e-6)
double gradcheck_relative_error(double analytic, double numeric);

// Central differences in double precision: every differentiable operation
// on its own, then every trainable parameter of a tiny full model for each
// pooling method.
GradcheckReport run_gradcheck(const GradcheckOptions& options = {});

std::string format_gradcheck(const GradcheckReport& report);

}  // namespace nli
