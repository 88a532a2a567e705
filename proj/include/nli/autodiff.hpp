#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nli/tensor.hpp"

namespace nli {

// One flag per tensor row; nonzero marks a real (non-padding) position.
using Mask = std::vector<std::uint8_t>;

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  // Frozen parameters never receive gradients and are skipped by optimizers.
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name, Tensor<T> value, bool trainable = true);

  void zero_grad();
};

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// What a backward rule sees: the gradient flowing into its output, its input
// and output values, and writable gradient buffers for inputs that need one.
template <typename T>
class BackwardContext {
 public:
  BackwardContext(Tape<T>& tape, std::size_t node, const Tensor<T>& grad) : tape_(tape), node_(node), grad_(grad) {}

  const Tensor<T>& grad() const { return grad_; }
  const Tensor<T>& output() const;
  const Tensor<T>& input(std::size_t k) const;
  bool wants(std::size_t k) const;
  Tensor<T>& input_grad(std::size_t k);

 private:
  Tape<T>& tape_;
  std::size_t node_;
  const Tensor<T>& grad_;
};

// Dynamically recorded computation. Nodes are appended in execution order,
// so inputs always precede their consumers and backward is a reverse sweep.
// A tape is confined to one thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  // Leaf whose gradient is kept on the tape (read it with grad()).
  Var<T> variable(Tensor<T> value);
  // Leaf viewing p.value without copying; backward adds into p.grad when p is
  // trainable. p must outlive the tape.
  Var<T> parameter(Parameter<T>& p);
  // Read-only leaf over an external tensor, which must outlive the tape.
  Var<T> view(const Tensor<T>& value);

  Var<T> record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const;
  const Tensor<T>& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  Tensor<T>& grad_buffer(std::size_t id);
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a single-element loss. Clears tape-held gradients
  // first; parameter gradients accumulate across calls.
  void backward(Var<T> loss);

  // Test hook: scales the incoming gradient of every `op` node by `factor`
  // before its backward rule runs. Used to prove gradient checks catch
  // broken rules.
  void corrupt_backward(std::string op, T factor);

 private:
  struct Node {
    const char* op = "";
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  // deque keeps references to node values stable while recording.
  std::deque<Node> nodes_;
  std::string corrupt_op_;
  T corrupt_factor_ = T{1};
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

enum class ReduceOp { mean, sum, max };

// ---------------------------------------------------------------------------
// Differentiable operations. Binary elementwise operations need identical
// shapes; the only broadcast is add_row_bias.

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> x);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> x, T factor);
template <typename T> Var<T> add_row_bias(Var<T> x, Var<T> bias);

template <typename T> Var<T> tanh(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> relu(Var<T> x);
// Subgradient 0 at exactly 0.
template <typename T> Var<T> abs(Var<T> x);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);

template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end);
template <typename T> Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end);
template <typename T> Var<T> stack_rows(const std::vector<Var<T>>& parts);
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids);
// Row r of the result is row (r mod rows(x)) of x.
template <typename T> Var<T> repeat_rows(Var<T> x, std::size_t times);

// Row r of the result is a's row when mask[r] is set, otherwise b's.
template <typename T> Var<T> select_rows(const Mask& mask, Var<T> a, Var<T> b);
// Zeroes the rows whose mask entry is clear.
template <typename T> Var<T> mask_rows(Var<T> x, const Mask& mask);

// Grouped sequence operations. Row r of an [n x d] input belongs to sequence
// (r mod groups) at time step (r / groups); groups == 1 is a single sequence.
// Masked rows never influence the result.

// Softmax of scores ([n] or [n x 1]) within each sequence. Masked positions
// are exactly 0. Throws InvalidInputError when a sequence has no unmasked row.
template <typename T> Var<T> masked_softmax(Var<T> scores, const Mask& mask, std::size_t groups = 1);
// [n x d] -> [groups x d]. Max routes gradient to the first maximal row.
template <typename T> Var<T> masked_reduce(ReduceOp op, Var<T> x, const Mask& mask, std::size_t groups = 1);
// sum_t weights[t] * x[t] per sequence: [n] or [n x 1] with [n x d] -> [groups x d].
template <typename T> Var<T> weighted_sum(Var<T> weights, Var<T> x, std::size_t groups = 1);

// Single-sequence reduce: [n x d] -> [d].
template <typename T> Var<T> reduce(ReduceOp op, Var<T> x, const Mask& mask);

// Inverted dropout. Identity when !training or p == 0.
template <typename T> Var<T> dropout(Var<T> x, double p, bool training, std::mt19937_64& rng);

// Mean negative log-likelihood of `labels` under softmax(logits), logits [b x c].
template <typename T> Var<T> cross_entropy_from_logits(Var<T> logits, std::span<const int> labels);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

// Row-wise softmax with max subtraction (no tape).
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace nli
