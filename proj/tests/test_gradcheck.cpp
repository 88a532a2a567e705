#include <doctest.h>

#include <set>

#include "nli/gradcheck.hpp"

using namespace nli;

TEST_CASE("relative error") {
  CHECK(gradcheck_relative_error(1.0, 1.0) == 0.0);
  CHECK(gradcheck_relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(gradcheck_relative_error(0.0, 1e-9) == doctest::Approx(1e-3));
}

TEST_CASE("gradient suite") {
  auto report = run_gradcheck();
  CHECK(report.passed());
  CHECK(report.failures().empty());

  std::set<std::string> names;
  for (const auto& g : report.groups) {
    CHECK(names.insert(g.name).second);
    CHECK(g.coordinates > 0);
  }
  for (const char* op : {"matmul", "tanh", "sigmoid", "masked_softmax", "lstm_step", "reduce_max"})
    CHECK(names.count(op) == 1);
  for (const char* pooling : {"mean", "sum", "last", "max"})
    CHECK(names.count(std::string("model[") + pooling + "].attention_weights") == 1);

  const std::string text = format_gradcheck(report);
  CHECK(text.find("failed=0") != std::string::npos);
}

TEST_CASE("a corrupted backward pass is caught") {
  GradcheckOptions options;
  options.corrupt_op = "tanh";
  options.corrupt_factor = 1.01;
  auto report = run_gradcheck(options);
  CHECK_FALSE(report.passed());
  bool tanh_failed = false;
  for (const auto& f : report.failures()) tanh_failed |= f == "tanh";
  CHECK(tanh_failed);
}
