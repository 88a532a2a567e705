#pragma once

// Central finite differences in double precision, kept independent of the
// library's own gradient-check routine.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nli/autodiff.hpp"

namespace nli::test {

using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradComparison {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

inline double evaluate(const Fn& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

// Compares tape gradients of f against (f(x+eps) - f(x-eps)) / 2eps for every
// coordinate of every input.
inline GradComparison compare_gradients(const Fn& f, std::vector<Tensor<double>> inputs, double eps = 1e-5) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  Var<double> loss = f(tape, vars);
  tape.backward(loss);

  GradComparison out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double>& g = tape.grad(vars[k].id());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + eps;
      const double up = evaluate(f, inputs);
      inputs[k][i] = saved - eps;
      const double down = evaluate(f, inputs);
      inputs[k][i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = g.size() ? g[i] : 0.0;
      out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic, numeric));
      ++out.coordinates;
    }
  }
  return out;
}

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

// Weighted sum of every element so that each output coordinate gets a
// distinct upstream gradient.
inline Var<double> probe(Tape<double>& tape, Var<double> x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Var<double> w = tape.constant(random_tensor(x.shape(), rng));
  return sum(mul(x, w));
}

}  // namespace nli::test
