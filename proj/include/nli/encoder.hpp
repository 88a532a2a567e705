#pragma once

#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include "nli/autodiff.hpp"
#include "nli/text.hpp"

namespace nli {

enum class Pooling { mean, sum, last, max };

std::string_view pooling_name(Pooling p);
std::optional<Pooling> parse_pooling(std::string_view name);
inline constexpr Pooling kAllPoolings[] = {Pooling::mean, Pooling::sum, Pooling::last, Pooling::max};

struct EncoderConfig {
  bool use_chars = true;
  std::size_t word_dim = 300;
  std::size_t char_dim = 20;
  std::size_t char_hidden = 50;
  // Per-direction context size; 0 means "same as the word vector fed in"
  // (300 without chars, 350 with chars).
  std::size_t hidden = 0;
  Pooling pooling = Pooling::mean;

  std::size_t input_dim() const { return word_dim + (use_chars ? char_hidden : 0); }
  std::size_t context_hidden() const { return hidden ? hidden : input_dim(); }
  // Width of h_i and of the sentence representation.
  std::size_t representation_dim() const { return 2 * context_hidden(); }
  // Width of [raw; h_i], the side of the square attention matrix.
  std::size_t attention_dim() const { return 2 * representation_dim(); }
};

// Gate blocks are stacked in the order input, forget, cell candidate, output.
template <typename T>
struct LstmParams {
  Parameter<T> input_weights;      // [4h x d_in]
  Parameter<T> recurrent_weights;  // [4h x h]
  Parameter<T> bias;               // [4h]

  std::size_t hidden_size() const { return recurrent_weights.value.cols(); }
  std::size_t input_size() const { return input_weights.value.cols(); }

  // Weights ~ U(-1/sqrt(h), 1/sqrt(h)); biases 0 except forget gate = 1.
  static LstmParams create(const std::string& name, std::size_t input, std::size_t hidden, std::mt19937_64& rng);
};

template <typename T>
struct EncoderParams {
  Parameter<T> word_embeddings;  // [|V| x d_w], frozen
  Parameter<T> char_embeddings;  // [|C| x d_c]; present (and trained) only with chars
  LstmParams<T> char_lstm;
  LstmParams<T> forward;
  LstmParams<T> backward;
  Parameter<T> attention_weights;  // W: [2d x 2d]
  Parameter<T> attention_vector;   // v: [2d]

  static EncoderParams create(const EncoderConfig& config, Parameter<T> word_embeddings, std::size_t char_vocab_size,
                              std::mt19937_64& rng);

  // Fixed declaration order; checkpoints rely on it.
  std::vector<Parameter<T>*> parameters(bool use_chars);
  std::vector<const Parameter<T>*> parameters(bool use_chars) const;
};

// --- tape-level building blocks ---------------------------------------------

template <typename T>
struct LstmVars {
  Var<T> input_weights;
  Var<T> recurrent_weights;
  Var<T> bias;
};

template <typename T>
struct LstmState {
  Var<T> h;
  Var<T> c;
};

// Parameter leaves on a tape. Non-const parameters are tracked for
// gradients; const ones are bound as read-only views.
template <typename T>
struct EncoderVars {
  Var<T> word_embeddings;
  Var<T> char_embeddings;
  LstmVars<T> char_lstm;
  LstmVars<T> forward;
  LstmVars<T> backward;
  Var<T> attention_weights;
  Var<T> attention_vector;
};

template <typename T>
EncoderVars<T> bind(Tape<T>& tape, EncoderParams<T>& params, const EncoderConfig& config);
template <typename T>
EncoderVars<T> bind(Tape<T>& tape, const EncoderParams<T>& params, const EncoderConfig& config);
template <typename T>
LstmVars<T> bind(Tape<T>& tape, LstmParams<T>& params);

template <typename T>
LstmState<T> zero_state(Tape<T>& tape, std::size_t batch, std::size_t hidden);

// One cell update for a [b x d_in] input:
//   i, f, o = sigmoid(.), g = tanh(.), c = f*c_prev + i*g, h = o*tanh(c).
template <typename T>
LstmState<T> lstm_step(const LstmVars<T>& cell, Var<T> x, const LstmState<T>& prev);

template <typename T>
struct LstmRun {
  std::vector<Var<T>> outputs;  // per step [b x h]; zero where masked
  LstmState<T> final;           // state after each sequence's last real step
};

// Runs a cell over a time-major [steps*b x d_in] input from a zero state.
// Masked positions leave the state untouched. With reverse, steps are
// visited last to first; outputs stay indexed by original time step.
template <typename T>
LstmRun<T> run_lstm(const LstmVars<T>& cell, Var<T> x, const Mask& mask, std::size_t batch, bool reverse);

// Final hidden state of the char LSTM for each of `words` words.
// char_ids / char_mask are word-major [words x max_chars]; an all-masked
// word (padding) encodes to zeros.
template <typename T>
Var<T> char_encode(Var<T> char_table, const LstmVars<T>& cell, std::span<const std::size_t> char_ids,
                   const Mask& char_mask, std::size_t words, std::size_t max_chars);

// Time-major [L*b x d_in] token features: the word vector, followed by the
// char encoding when chars are enabled.
template <typename T>
Var<T> embed_tokens(const EncoderVars<T>& vars, const SentenceBatch& batch, bool use_chars);

// Context-aware token states h_i = [fwd_i ; bwd_i], time-major [L*b x 2h].
template <typename T>
struct ContextualSequence {
  Var<T> states;
  Mask mask;  // time-major, one entry per row of states
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t hidden = 0;  // per direction
  std::vector<std::size_t> lengths;
};

// Time-major copy of a batch-major mask.
Mask time_major_mask(const SentenceBatch& batch);

template <typename T>
ContextualSequence<T> bilstm(const LstmVars<T>& forward, const LstmVars<T>& backward, Var<T> x,
                             const SentenceBatch& batch);

// [b x d] raw sentence vectors. `last` is [fwd_n ; bwd_1] with n the true length.
template <typename T>
Var<T> pool(const ContextualSequence<T>& seq, Pooling method);

template <typename T>
struct Attention {
  Var<T> refined;  // [b x d]
  Var<T> weights;  // time-major [L*b x 1]
};

// u_i = v . tanh(W [raw ; h_i]), alpha = softmax over real positions,
// refined = sum_i alpha_i h_i.
template <typename T>
Attention<T> inner_attention(const ContextualSequence<T>& seq, Var<T> raw, Var<T> weights, Var<T> vector);

template <typename T>
struct SentenceEncoding {
  ContextualSequence<T> context;
  Var<T> raw;
  Var<T> refined;
  Var<T> attention;
};

template <typename T>
SentenceEncoding<T> encode(const EncoderVars<T>& vars, const EncoderConfig& config, const SentenceBatch& batch);

}  // namespace nli
