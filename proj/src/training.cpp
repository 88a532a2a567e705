#include "nli/training.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "nli/error.hpp"
#include "nli/evaluation.hpp"

namespace nli {

template <typename T>
void RmsProp<T>::step(const std::vector<Parameter<T>*>& params) {
  if (state_.size() < params.size()) state_.resize(params.size());
  for (const auto* p : params) {
    if (!p->trainable || p->grad.size() == 0) continue;
    if (p->grad.size() != p->value.size())
      throw DimensionError("gradient of " + p->name + " has shape " + shape_string(p->grad.shape()));
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
  }
  const T rho = static_cast<T>(options_.rho);
  const T keep = static_cast<T>(1.0 - options_.rho);
  const T lr = static_cast<T>(options_.learning_rate);
  const T eps = static_cast<T>(options_.epsilon);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    if (!p.trainable || p.grad.size() == 0) continue;
    Tensor<T>& s = state_[k];
    if (s.size() != p.value.size() || s.shape() != p.value.shape()) s = Tensor<T>(p.value.shape());
    auto theta = p.value.values();
    auto g = p.grad.values();
    auto avg = s.values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      avg[i] = rho * avg[i] + keep * g[i] * g[i];
      theta[i] -= lr * g[i] / (std::sqrt(avg[i]) + eps);
    }
  }
}

template class RmsProp<float>;
template class RmsProp<double>;

std::string format_epoch(const EpochRecord& r) {
  char buf[256];
  int n = std::snprintf(buf, sizeof buf, "epoch=%zu train_loss=%.6f dev_acc=%.6f", r.epoch, r.train_loss,
                        r.dev_accuracy);
  if (r.train_accuracy)
    n += std::snprintf(buf + n, sizeof buf - static_cast<std::size_t>(n), " train_acc=%.6f", *r.train_accuracy);
  std::snprintf(buf + n, sizeof buf - static_cast<std::size_t>(n), " seconds=%.3f best=%d", r.seconds,
                r.improved ? 1 : 0);
  return buf;
}

double batch_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng) {
  Tape<float> tape;
  auto vars = bind(tape, model.params(), model.config());
  auto out = forward(vars, model.config(), batch, training, rng);
  return cross_entropy_from_logits(out.logits, std::span<const int>(batch.labels)).value().item();
}

double train_step(Model& model, RmsProp<float>& optimizer, const Batch& batch, std::mt19937_64& rng,
                  bool dropout_active) {
  auto params = model.parameters();
  for (auto* p : params)
    if (p->trainable) p->zero_grad();
  Tape<float> tape;
  auto vars = bind(tape, model.params(), model.config());
  auto out = forward(vars, model.config(), batch, dropout_active, rng);
  auto loss = cross_entropy_from_logits(out.logits, std::span<const int>(batch.labels));
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw NumericError("non-finite training loss");
  tape.backward(loss);
  optimizer.step(params);
  return value;
}

TrainResult train(Model model, const TrainConfig& config, const std::vector<NLIExample>& train_set,
                  const std::vector<NLIExample>& dev_set, const TrainHooks& hooks) {
  if (config.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (config.max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
  if (!(config.learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (train_set.empty()) throw InvalidInputError("training set is empty");
  if (dev_set.empty()) throw InvalidInputError("development set is empty");

  std::seed_seq seeds{config.seed, std::uint64_t{0x5eed}};
  std::array<std::uint64_t, 2> streams{};
  seeds.generate(streams.begin(), streams.end());
  std::mt19937_64 shuffle_rng(streams[0]);
  std::mt19937_64 dropout_rng(streams[1]);

  RmsProp<float> optimizer({config.learning_rate, config.rho, config.epsilon});
  BatchOptions options;
  options.batch_size = config.batch_size;
  options.role = SplitRole::train;
  options.max_premise_len = config.max_premise_len;

  TrainResult result{model, 0, -1.0, {}, false, {}};
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    auto batches = make_batches(train_set, model.vocab(), model.chars(), options, shuffle_rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    try {
      for (const auto& batch : batches) {
        loss_sum += train_step(model, optimizer, batch, dropout_rng) * static_cast<double>(batch.size());
        seen += batch.size();
      }
    } catch (const NumericError& e) {
      result.halted = true;
      result.halt_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      if (hooks.log) *hooks.log << "halt epoch=" << epoch << " reason=\"" << e.what() << "\"\n" << std::flush;
      break;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    record.dev_accuracy = evaluate(model, dev_set).accuracy();
    if (hooks.eval_train) record.train_accuracy = evaluate(model, train_set).accuracy();
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record.improved = record.dev_accuracy > result.best_dev_accuracy;
    if (record.improved) {
      result.best = model;
      result.best_epoch = epoch;
      result.best_dev_accuracy = record.dev_accuracy;
    }
    result.epochs.push_back(record);
    if (hooks.log) *hooks.log << format_epoch(record) << '\n' << std::flush;
    if (hooks.on_epoch && !hooks.on_epoch(record, model)) break;
  }
  return result;
}

}  // namespace nli
