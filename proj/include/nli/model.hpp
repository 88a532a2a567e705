#pragma once

#include <memory>
#include <random>
#include <vector>

#include "nli/classifier.hpp"
#include "nli/encoder.hpp"
#include "nli/text.hpp"

namespace nli {

struct ModelConfig {
  EncoderConfig encoder;
  std::vector<std::size_t> mlp_widths{2000, 2000, 2000};
  double dropout = 0.25;

  std::size_t matching_dim() const { return 4 * encoder.representation_dim(); }
};

// One encoder shared by premise and hypothesis, then the MLP.
template <typename T>
struct ModelParams {
  EncoderParams<T> encoder;
  MlpParams<T> mlp;

  static ModelParams create(const ModelConfig& config, Parameter<T> word_embeddings, std::size_t char_vocab_size,
                            std::mt19937_64& rng);

  // Encoder parameters first, then MLP layers in order.
  std::vector<Parameter<T>*> parameters(bool use_chars);
  std::vector<const Parameter<T>*> parameters(bool use_chars) const;
};

template <typename T>
struct ModelVars {
  EncoderVars<T> encoder;
  MlpVars<T> mlp;
};

template <typename T>
ModelVars<T> bind(Tape<T>& tape, ModelParams<T>& params, const ModelConfig& config);
template <typename T>
ModelVars<T> bind(Tape<T>& tape, const ModelParams<T>& params, const ModelConfig& config);

template <typename T>
struct ModelOutput {
  SentenceEncoding<T> premise;
  SentenceEncoding<T> hypothesis;
  Var<T> matching;  // [b x 4d]
  Var<T> logits;    // [b x 3]
};

template <typename T>
ModelOutput<T> forward(const ModelVars<T>& vars, const ModelConfig& config, const Batch& batch, bool training,
                       std::mt19937_64& rng);

// Anything that maps examples to class distributions.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::vector<PredictionDistribution> predict(const std::vector<NLIExample>& examples) const = 0;
};

class Model : public Predictor {
 public:
  Model(ModelConfig config, std::shared_ptr<const Vocabulary> vocab, std::shared_ptr<const CharVocabulary> chars,
        ModelParams<float> params);

  static Model create(const ModelConfig& config, std::shared_ptr<const Vocabulary> vocab,
                      std::shared_ptr<const CharVocabulary> chars, Parameter<float> word_embeddings,
                      std::mt19937_64& rng);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return *vocab_; }
  const CharVocabulary& chars() const { return *chars_; }
  std::shared_ptr<const Vocabulary> shared_vocab() const { return vocab_; }
  std::shared_ptr<const CharVocabulary> shared_chars() const { return chars_; }
  ModelParams<float>& params() { return params_; }
  const ModelParams<float>& params() const { return params_; }
  std::vector<Parameter<float>*> parameters() { return params_.parameters(config_.encoder.use_chars); }
  std::vector<const Parameter<float>*> parameters() const { return params_.parameters(config_.encoder.use_chars); }

  // Inference mode: dropout off, no gradients.
  std::vector<PredictionDistribution> predict(const std::vector<NLIExample>& examples) const override;
  std::vector<PredictionDistribution> predict(const Batch& batch) const;

  struct Representations {
    Tensor<float> premise;     // [b x d] refined vectors
    Tensor<float> hypothesis;  // [b x d]
  };
  Representations represent(const Batch& batch) const;

  // Builds inference batches (every example kept, original order).
  std::vector<Batch> batches(const std::vector<NLIExample>& examples) const;

  std::size_t eval_batch_size = 64;

 private:
  ModelConfig config_;
  std::shared_ptr<const Vocabulary> vocab_;
  std::shared_ptr<const CharVocabulary> chars_;
  ModelParams<float> params_;
};

}  // namespace nli
