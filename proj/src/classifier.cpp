#include "nli/classifier.hpp"

#include <cmath>

#include "nli/error.hpp"

namespace nli {

template <typename T>
DenseLayer<T> DenseLayer<T>::create(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  if (in == 0 || out == 0) throw ConfigError(name + ": layer sizes must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> w(Shape{out, in});
  for (auto& v : w.values()) v = static_cast<T>(u(rng));
  DenseLayer layer;
  layer.weights = Parameter<T>(name + ".weights", std::move(w));
  layer.bias = Parameter<T>(name + ".bias", Tensor<T>(Shape{out}));
  return layer;
}

template <typename T>
MlpParams<T> MlpParams<T>::create(std::size_t input, const std::vector<std::size_t>& widths, std::mt19937_64& rng) {
  MlpParams p;
  std::size_t in = input;
  for (std::size_t k = 0; k < widths.size(); ++k) {
    p.hidden.push_back(DenseLayer<T>::create("mlp" + std::to_string(k), in, widths[k], rng));
    in = widths[k];
  }
  p.output = DenseLayer<T>::create("mlp_out", in, kNumClasses, rng);
  return p;
}

template <typename T>
std::vector<Parameter<T>*> MlpParams<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& layer : hidden) out.insert(out.end(), {&layer.weights, &layer.bias});
  out.insert(out.end(), {&output.weights, &output.bias});
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> MlpParams<T>::parameters() const {
  auto mut = const_cast<MlpParams*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

namespace {

template <typename T, typename P>
MlpVars<T> bind_mlp(Tape<T>& tape, P& params) {
  auto leaf = [&tape](auto& p) {
    if constexpr (std::is_const_v<std::remove_reference_t<decltype(p)>>)
      return tape.view(p.value);
    else
      return tape.parameter(p);
  };
  MlpVars<T> v;
  for (auto& layer : params.hidden) v.hidden.push_back({leaf(layer.weights), leaf(layer.bias)});
  v.output = {leaf(params.output.weights), leaf(params.output.bias)};
  return v;
}

template <typename T>
Var<T> affine(const DenseVars<T>& layer, Var<T> x) {
  return add_row_bias(matmul(x, transpose(layer.weights)), layer.bias);
}

}  // namespace

template <typename T>
MlpVars<T> bind(Tape<T>& tape, MlpParams<T>& params) {
  return bind_mlp<T>(tape, params);
}

template <typename T>
MlpVars<T> bind(Tape<T>& tape, const MlpParams<T>& params) {
  return bind_mlp<T>(tape, params);
}

template <typename T>
Var<T> aggregate(Var<T> premise, Var<T> hypothesis) {
  if (premise.shape() != hypothesis.shape() || premise.value().rank() != 2)
    throw DimensionError("aggregate: premise " + shape_string(premise.shape()) + " vs hypothesis " +
                         shape_string(hypothesis.shape()));
  return concat_cols<T>({premise, hypothesis, premise * hypothesis, abs(premise - hypothesis)});
}

template <typename T>
Var<T> classify(const MlpVars<T>& mlp, Var<T> matching, double dropout, bool training, std::mt19937_64& rng) {
  const auto& first = mlp.hidden.empty() ? mlp.output.weights : mlp.hidden.front().weights;
  if (matching.value().rank() != 2 || matching.value().cols() != first.value().cols())
    throw ConfigError("classifier expects " + std::to_string(first.value().cols()) + " features, got " +
                      shape_string(matching.shape()));
  Var<T> x = matching;
  for (const auto& layer : mlp.hidden) x = nli::dropout(relu(affine(layer, x)), dropout, training, rng);
  return affine(mlp.output, x);
}

int argmax(const std::array<double, kNumClasses>& probs) {
  int best = 0;
  for (int c = 1; c < kNumClasses; ++c)
    if (probs[c] > probs[best]) best = c;
  return best;
}

template <typename T>
std::vector<PredictionDistribution> distributions(const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.cols() != static_cast<std::size_t>(kNumClasses))
    throw DimensionError("distributions: logits " + shape_string(logits.shape()));
  std::vector<PredictionDistribution> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    double m = row[0];
    for (auto v : row) m = std::max(m, static_cast<double>(v));
    double z = 0;
    for (int c = 0; c < kNumClasses; ++c) z += std::exp(static_cast<double>(row[c]) - m);
    for (int c = 0; c < kNumClasses; ++c) out[r].probs[c] = std::exp(static_cast<double>(row[c]) - m) / z;
    out[r].predicted = argmax(out[r].probs);
  }
  return out;
}

#define NLI_INSTANTIATE(T)                                                                              \
  template struct DenseLayer<T>;                                                                        \
  template struct MlpParams<T>;                                                                         \
  template MlpVars<T> bind(Tape<T>&, MlpParams<T>&);                                                    \
  template MlpVars<T> bind(Tape<T>&, const MlpParams<T>&);                                              \
  template Var<T> aggregate(Var<T>, Var<T>);                                                            \
  template Var<T> classify(const MlpVars<T>&, Var<T>, double, bool, std::mt19937_64&);                  \
  template std::vector<PredictionDistribution> distributions(const Tensor<T>&);

NLI_INSTANTIATE(float)
NLI_INSTANTIATE(double)

#undef NLI_INSTANTIATE

}  // namespace nli
