#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nli/model.hpp"

namespace nli {

struct RmsPropOptions {
  double learning_rate = 0.001;
  double rho = 0.9;
  double epsilon = 1e-8;
};

// Plain RMSProp: s <- rho s + (1 - rho) g^2, theta <- theta - lr g / (sqrt(s) + eps).
template <typename T>
class RmsProp {
 public:
  explicit RmsProp(RmsPropOptions options = {}) : options_(options) {}

  // Updates every trainable parameter from its grad. Frozen parameters and
  // their state are left alone. A non-finite gradient aborts the whole step
  // (nothing is updated) with a NumericError naming the parameter.
  void step(const std::vector<Parameter<T>*>& params);

  const RmsPropOptions& options() const { return options_; }
  // Running averages, one per parameter in step order (empty until used).
  const std::vector<Tensor<T>>& state() const { return state_; }

 private:
  RmsPropOptions options_;
  std::vector<Tensor<T>> state_;
};

struct TrainConfig {
  double learning_rate = 0.001;
  double rho = 0.9;
  double epsilon = 1e-8;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 10;
  std::size_t max_premise_len = 200;
  std::uint64_t seed = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
  std::optional<double> train_accuracy;
  double seconds = 0.0;
  bool improved = false;
};

// "epoch=3 train_loss=0.912345 dev_acc=0.6123 seconds=12.3 best=1"
std::string format_epoch(const EpochRecord& record);

struct TrainHooks {
  std::ostream* log = nullptr;
  // Also measure accuracy on the training set after each epoch.
  bool eval_train = false;
  // Called after each epoch; return false to stop.
  std::function<bool(const EpochRecord&, const Model&)> on_epoch;
};

struct TrainResult {
  Model best;
  std::size_t best_epoch = 0;  // 0 when no epoch finished
  double best_dev_accuracy = -1.0;
  std::vector<EpochRecord> epochs;
  bool halted = false;
  std::string halt_reason;
};

// Mean cross-entropy of one batch; dropout only when `training`.
double batch_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng);

// Forward, backward and one optimizer update. Returns the loss before the
// update, or throws NumericError without touching parameters when the loss
// or a gradient is not finite.
double train_step(Model& model, RmsProp<float>& optimizer, const Batch& batch, std::mt19937_64& rng,
                  bool dropout_active = true);

// Trains from `model`'s current parameters. After every epoch the model is
// scored on `dev`; the best-scoring snapshot is returned. A non-finite loss
// halts training and the last best snapshot is kept.
TrainResult train(Model model, const TrainConfig& config, const std::vector<NLIExample>& train_set,
                  const std::vector<NLIExample>& dev_set, const TrainHooks& hooks = {});

}  // namespace nli
