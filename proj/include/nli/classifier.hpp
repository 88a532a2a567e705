#pragma once

#include <array>
#include <random>
#include <vector>

#include "nli/autodiff.hpp"
#include "nli/text.hpp"

namespace nli {

template <typename T>
struct DenseLayer {
  Parameter<T> weights;  // [out x in]
  Parameter<T> bias;     // [out]

  std::size_t input_size() const { return weights.value.cols(); }
  std::size_t output_size() const { return weights.value.rows(); }

  // Weights ~ U(-1/sqrt(in), 1/sqrt(in)), bias 0.
  static DenseLayer create(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);
};

// Hidden affine+ReLU layers followed by a projection to the class logits.
template <typename T>
struct MlpParams {
  std::vector<DenseLayer<T>> hidden;
  DenseLayer<T> output;

  std::size_t input_size() const { return hidden.empty() ? output.input_size() : hidden.front().input_size(); }

  static MlpParams create(std::size_t input, const std::vector<std::size_t>& widths, std::mt19937_64& rng);
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
};

template <typename T>
struct DenseVars {
  Var<T> weights;
  Var<T> bias;
};

template <typename T>
struct MlpVars {
  std::vector<DenseVars<T>> hidden;
  DenseVars<T> output;
};

template <typename T>
MlpVars<T> bind(Tape<T>& tape, MlpParams<T>& params);
template <typename T>
MlpVars<T> bind(Tape<T>& tape, const MlpParams<T>& params);

// [p ; h ; p*h ; |p - h|] row by row: two [b x d] inputs give [b x 4d].
template <typename T>
Var<T> aggregate(Var<T> premise, Var<T> hypothesis);

// Logits [b x 3]. Dropout follows every ReLU and is active only in training.
template <typename T>
Var<T> classify(const MlpVars<T>& mlp, Var<T> matching, double dropout, bool training, std::mt19937_64& rng);

struct PredictionDistribution {
  std::array<double, kNumClasses> probs{};
  int predicted = 0;
};

// First index of the largest entry.
int argmax(const std::array<double, kNumClasses>& probs);

// Softmax of each row of [b x 3] logits.
template <typename T>
std::vector<PredictionDistribution> distributions(const Tensor<T>& logits);

}  // namespace nli
