#include "nli/model.hpp"

#include "nli/error.hpp"

namespace nli {

template <typename T>
ModelParams<T> ModelParams<T>::create(const ModelConfig& config, Parameter<T> word_embeddings,
                                      std::size_t char_vocab_size, std::mt19937_64& rng) {
  if (!(config.dropout >= 0.0 && config.dropout < 1.0))
    throw ConfigError("dropout must lie in [0, 1), got " + std::to_string(config.dropout));
  ModelParams p;
  p.encoder = EncoderParams<T>::create(config.encoder, std::move(word_embeddings), char_vocab_size, rng);
  p.mlp = MlpParams<T>::create(config.matching_dim(), config.mlp_widths, rng);
  return p;
}

template <typename T>
std::vector<Parameter<T>*> ModelParams<T>::parameters(bool use_chars) {
  auto out = encoder.parameters(use_chars);
  for (auto* p : mlp.parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ModelParams<T>::parameters(bool use_chars) const {
  auto mut = const_cast<ModelParams*>(this)->parameters(use_chars);
  return {mut.begin(), mut.end()};
}

template <typename T>
ModelVars<T> bind(Tape<T>& tape, ModelParams<T>& params, const ModelConfig& config) {
  return {bind(tape, params.encoder, config.encoder), bind(tape, params.mlp)};
}

template <typename T>
ModelVars<T> bind(Tape<T>& tape, const ModelParams<T>& params, const ModelConfig& config) {
  return {bind(tape, params.encoder, config.encoder), bind(tape, params.mlp)};
}

template <typename T>
ModelOutput<T> forward(const ModelVars<T>& vars, const ModelConfig& config, const Batch& batch, bool training,
                       std::mt19937_64& rng) {
  ModelOutput<T> out;
  out.premise = encode(vars.encoder, config.encoder, batch.premise);
  out.hypothesis = encode(vars.encoder, config.encoder, batch.hypothesis);
  out.matching = aggregate(out.premise.refined, out.hypothesis.refined);
  out.logits = classify(vars.mlp, out.matching, config.dropout, training, rng);
  return out;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelVars<float> bind(Tape<float>&, ModelParams<float>&, const ModelConfig&);
template ModelVars<double> bind(Tape<double>&, ModelParams<double>&, const ModelConfig&);
template ModelVars<float> bind(Tape<float>&, const ModelParams<float>&, const ModelConfig&);
template ModelVars<double> bind(Tape<double>&, const ModelParams<double>&, const ModelConfig&);
template ModelOutput<float> forward(const ModelVars<float>&, const ModelConfig&, const Batch&, bool, std::mt19937_64&);
template ModelOutput<double> forward(const ModelVars<double>&, const ModelConfig&, const Batch&, bool,
                                     std::mt19937_64&);

// --- Model ------------------------------------------------------------------

Model::Model(ModelConfig config, std::shared_ptr<const Vocabulary> vocab, std::shared_ptr<const CharVocabulary> chars,
             ModelParams<float> params)
    : config_(std::move(config)), vocab_(std::move(vocab)), chars_(std::move(chars)), params_(std::move(params)) {
  if (!vocab_ || !chars_) throw ConfigError("model needs word and char vocabularies");
  const auto& table = params_.encoder.word_embeddings.value;
  if (table.rows() != vocab_->size())
    throw ConfigError("embedding matrix has " + std::to_string(table.rows()) + " rows for a vocabulary of " +
                      std::to_string(vocab_->size()));
  if (config_.encoder.use_chars && params_.encoder.char_embeddings.value.rows() != chars_->size())
    throw ConfigError("char embedding table does not match the char vocabulary");
}

Model Model::create(const ModelConfig& config, std::shared_ptr<const Vocabulary> vocab,
                    std::shared_ptr<const CharVocabulary> chars, Parameter<float> word_embeddings,
                    std::mt19937_64& rng) {
  const std::size_t char_count = chars ? chars->size() : 0;
  auto params = ModelParams<float>::create(config, std::move(word_embeddings), char_count, rng);
  return Model(config, std::move(vocab), std::move(chars), std::move(params));
}

std::vector<Batch> Model::batches(const std::vector<NLIExample>& examples) const {
  BatchOptions options;
  options.batch_size = eval_batch_size;
  options.role = SplitRole::dev;
  std::mt19937_64 unused(0);
  return make_batches(examples, *vocab_, *chars_, options, unused);
}

std::vector<PredictionDistribution> Model::predict(const Batch& batch) const {
  Tape<float> tape;
  auto vars = bind(tape, params_, config_);
  std::mt19937_64 unused(0);
  auto out = forward(vars, config_, batch, false, unused);
  return distributions(out.logits.value());
}

std::vector<PredictionDistribution> Model::predict(const std::vector<NLIExample>& examples) const {
  std::vector<PredictionDistribution> out;
  out.reserve(examples.size());
  for (const auto& batch : batches(examples)) {
    auto part = predict(batch);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

Model::Representations Model::represent(const Batch& batch) const {
  Tape<float> tape;
  auto vars = bind(tape, params_, config_);
  auto premise = encode(vars.encoder, config_.encoder, batch.premise);
  auto hypothesis = encode(vars.encoder, config_.encoder, batch.hypothesis);
  return {premise.refined.value(), hypothesis.refined.value()};
}

}  // namespace nli
