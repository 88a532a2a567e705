#include "nli/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "nli/error.hpp"

namespace nli {

std::string_view pooling_name(Pooling p) {
  switch (p) {
    case Pooling::mean: return "mean";
    case Pooling::sum: return "sum";
    case Pooling::last: return "last";
    case Pooling::max: return "max";
  }
  return "?";
}

std::optional<Pooling> parse_pooling(std::string_view name) {
  for (Pooling p : kAllPoolings)
    if (pooling_name(p) == name) return p;
  return std::nullopt;
}

namespace {

template <typename T>
Tensor<T> uniform(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace

template <typename T>
LstmParams<T> LstmParams<T>::create(const std::string& name, std::size_t input, std::size_t hidden,
                                    std::mt19937_64& rng) {
  if (input == 0 || hidden == 0) throw ConfigError(name + ": LSTM sizes must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  LstmParams p;
  p.input_weights = Parameter<T>(name + ".input_weights", uniform<T>({4 * hidden, input}, bound, rng));
  p.recurrent_weights = Parameter<T>(name + ".recurrent_weights", uniform<T>({4 * hidden, hidden}, bound, rng));
  Tensor<T> bias(Shape{4 * hidden});
  for (std::size_t j = hidden; j < 2 * hidden; ++j) bias[j] = T{1};
  p.bias = Parameter<T>(name + ".bias", std::move(bias));
  return p;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::create(const EncoderConfig& config, Parameter<T> word_embeddings,
                                          std::size_t char_vocab_size, std::mt19937_64& rng) {
  if (word_embeddings.value.rank() != 2 || word_embeddings.value.cols() != config.word_dim)
    throw ConfigError("word embeddings " + shape_string(word_embeddings.value.shape()) + " do not have width " +
                      std::to_string(config.word_dim));
  EncoderParams p;
  p.word_embeddings = std::move(word_embeddings);
  p.word_embeddings.name = "word_embeddings";
  p.word_embeddings.trainable = false;
  if (config.use_chars) {
    if (char_vocab_size < 2) throw ConfigError("char vocabulary is empty");
    Tensor<T> table(Shape{char_vocab_size, config.char_dim});
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t r = 1; r < char_vocab_size; ++r)
      for (auto& v : table.row(r)) v = static_cast<T>(n(rng));
    p.char_embeddings = Parameter<T>("char_embeddings", std::move(table));
    p.char_lstm = LstmParams<T>::create("char_lstm", config.char_dim, config.char_hidden, rng);
  }
  const std::size_t h = config.context_hidden();
  p.forward = LstmParams<T>::create("context_forward", config.input_dim(), h, rng);
  p.backward = LstmParams<T>::create("context_backward", config.input_dim(), h, rng);
  const std::size_t a = config.attention_dim();
  p.attention_weights = Parameter<T>("attention_weights", uniform<T>({a, a}, 0.005, rng));
  p.attention_vector = Parameter<T>("attention_vector", uniform<T>({a}, 0.005, rng));
  return p;
}

template <typename T>
std::vector<Parameter<T>*> EncoderParams<T>::parameters(bool use_chars) {
  std::vector<Parameter<T>*> out{&word_embeddings};
  if (use_chars)
    out.insert(out.end(), {&char_embeddings, &char_lstm.input_weights, &char_lstm.recurrent_weights, &char_lstm.bias});
  out.insert(out.end(), {&forward.input_weights, &forward.recurrent_weights, &forward.bias, &backward.input_weights,
                         &backward.recurrent_weights, &backward.bias, &attention_weights, &attention_vector});
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> EncoderParams<T>::parameters(bool use_chars) const {
  auto mut = const_cast<EncoderParams*>(this)->parameters(use_chars);
  return {mut.begin(), mut.end()};
}

// --- binding ----------------------------------------------------------------

namespace {

template <typename T>
Var<T> leaf(Tape<T>& tape, Parameter<T>& p) {
  return tape.parameter(p);
}

template <typename T>
Var<T> leaf(Tape<T>& tape, const Parameter<T>& p) {
  return tape.view(p.value);
}

template <typename T, typename P>
LstmVars<T> bind_lstm(Tape<T>& tape, P& p) {
  return {leaf(tape, p.input_weights), leaf(tape, p.recurrent_weights), leaf(tape, p.bias)};
}

template <typename T, typename P>
EncoderVars<T> bind_encoder(Tape<T>& tape, P& params, const EncoderConfig& config) {
  EncoderVars<T> v;
  v.word_embeddings = leaf(tape, params.word_embeddings);
  if (config.use_chars) {
    v.char_embeddings = leaf(tape, params.char_embeddings);
    v.char_lstm = bind_lstm<T>(tape, params.char_lstm);
  }
  v.forward = bind_lstm<T>(tape, params.forward);
  v.backward = bind_lstm<T>(tape, params.backward);
  v.attention_weights = leaf(tape, params.attention_weights);
  v.attention_vector = leaf(tape, params.attention_vector);
  return v;
}

template <typename T>
std::size_t lstm_hidden(const LstmVars<T>& cell) {
  const auto& w = cell.recurrent_weights.value();
  if (w.rank() != 2 || w.rows() != 4 * w.cols() || cell.bias.value().size() != w.rows() ||
      cell.input_weights.value().rank() != 2 || cell.input_weights.value().rows() != w.rows())
    throw DimensionError("LSTM parameters are inconsistent: input " + shape_string(cell.input_weights.shape()) +
                         ", recurrent " + shape_string(w.shape()) + ", bias " + shape_string(cell.bias.shape()));
  return w.cols();
}

// Gate arithmetic on a precomputed input projection x W_x^T.
template <typename T>
LstmState<T> cell_update(Var<T> projected, const LstmState<T>& prev, Var<T> recurrent_t, Var<T> bias,
                         std::size_t h) {
  if (prev.h.value().cols() != h || prev.c.value().cols() != h || prev.h.value().rows() != projected.value().rows())
    throw DimensionError("LSTM state " + shape_string(prev.h.shape()) + " does not fit hidden size " +
                         std::to_string(h));
  Var<T> pre = add_row_bias(projected + matmul(prev.h, recurrent_t), bias);
  Var<T> in_gate = sigmoid(slice_cols(pre, 0, h));
  Var<T> forget_gate = sigmoid(slice_cols(pre, h, 2 * h));
  Var<T> candidate = tanh(slice_cols(pre, 2 * h, 3 * h));
  Var<T> out_gate = sigmoid(slice_cols(pre, 3 * h, 4 * h));
  Var<T> c = forget_gate * prev.c + in_gate * candidate;
  return {out_gate * tanh(c), c};
}

}  // namespace

template <typename T>
EncoderVars<T> bind(Tape<T>& tape, EncoderParams<T>& params, const EncoderConfig& config) {
  return bind_encoder<T>(tape, params, config);
}

template <typename T>
EncoderVars<T> bind(Tape<T>& tape, const EncoderParams<T>& params, const EncoderConfig& config) {
  return bind_encoder<T>(tape, params, config);
}

template <typename T>
LstmVars<T> bind(Tape<T>& tape, LstmParams<T>& params) {
  return bind_lstm<T>(tape, params);
}

template <typename T>
LstmState<T> zero_state(Tape<T>& tape, std::size_t batch, std::size_t hidden) {
  Var<T> zero = tape.constant(Tensor<T>(Shape{batch, hidden}));
  return {zero, zero};
}

// --- recurrent layers -------------------------------------------------------

template <typename T>
LstmState<T> lstm_step(const LstmVars<T>& cell, Var<T> x, const LstmState<T>& prev) {
  const std::size_t h = lstm_hidden(cell);
  Var<T> projected = matmul(x, transpose(cell.input_weights));
  return cell_update(projected, prev, transpose(cell.recurrent_weights), cell.bias, h);
}

template <typename T>
LstmRun<T> run_lstm(const LstmVars<T>& cell, Var<T> x, const Mask& mask, std::size_t batch, bool reverse) {
  const std::size_t h = lstm_hidden(cell);
  const std::size_t rows = x.value().rows();
  if (batch == 0 || rows % batch != 0 || mask.size() != rows)
    throw DimensionError("run_lstm: " + std::to_string(rows) + " rows, mask " + std::to_string(mask.size()) +
                         ", batch " + std::to_string(batch));
  const std::size_t steps = rows / batch;
  Tape<T>& tape = x.tape();
  // One projection for every time step; rows are independent, so each step's
  // slice equals projecting that step alone.
  Var<T> projected = matmul(x, transpose(cell.input_weights));
  Var<T> recurrent_t = transpose(cell.recurrent_weights);

  LstmRun<T> run;
  run.outputs.resize(steps);
  run.final = zero_state(tape, batch, h);
  Var<T> zeros = run.final.h;
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t t = reverse ? steps - 1 - k : k;
    const Mask step_mask(mask.begin() + t * batch, mask.begin() + (t + 1) * batch);
    const auto real = static_cast<std::size_t>(std::count_if(step_mask.begin(), step_mask.end(), [](auto m) { return m != 0; }));
    if (real == 0) {
      run.outputs[t] = zeros;
      continue;
    }
    LstmState<T> next = cell_update(slice_rows(projected, t * batch, (t + 1) * batch), run.final, recurrent_t, cell.bias, h);
    if (real == batch) {
      run.outputs[t] = next.h;
    } else {
      next.h = select_rows(step_mask, next.h, run.final.h);
      next.c = select_rows(step_mask, next.c, run.final.c);
      run.outputs[t] = mask_rows(next.h, step_mask);
    }
    run.final = next;
  }
  return run;
}

template <typename T>
Var<T> char_encode(Var<T> char_table, const LstmVars<T>& cell, std::span<const std::size_t> char_ids,
                   const Mask& char_mask, std::size_t words, std::size_t max_chars) {
  if (words == 0 || max_chars == 0 || char_ids.size() != words * max_chars || char_mask.size() != char_ids.size())
    throw DimensionError("char_encode: expected " + std::to_string(words) + " x " + std::to_string(max_chars) +
                         " char ids");
  std::vector<std::size_t> ids(char_ids.size());
  Mask mask(char_ids.size());
  for (std::size_t w = 0; w < words; ++w)
    for (std::size_t c = 0; c < max_chars; ++c) {
      ids[c * words + w] = char_ids[w * max_chars + c];
      mask[c * words + w] = char_mask[w * max_chars + c];
    }
  Var<T> x = gather_rows(char_table, std::span<const std::size_t>(ids));
  return run_lstm(cell, x, mask, words, false).final.h;
}

Mask time_major_mask(const SentenceBatch& batch) {
  Mask out(batch.batch * batch.length);
  for (std::size_t i = 0; i < batch.batch; ++i)
    for (std::size_t t = 0; t < batch.length; ++t) out[t * batch.batch + i] = batch.mask[i * batch.length + t];
  return out;
}

template <typename T>
Var<T> embed_tokens(const EncoderVars<T>& vars, const SentenceBatch& batch, bool use_chars) {
  const std::size_t b = batch.batch, L = batch.length;
  if (b == 0 || L == 0 || batch.token_ids.size() != b * L)
    throw DimensionError("embed_tokens: malformed sentence batch");
  std::vector<std::size_t> ids(b * L);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < L; ++t) ids[t * b + i] = batch.token_ids[i * L + t];
  Var<T> words = gather_rows(vars.word_embeddings, std::span<const std::size_t>(ids));
  if (!use_chars) return words;

  // Encode each distinct character sequence once. Padding positions map to
  // the empty sequence, which encodes to zeros.
  const std::size_t C = batch.max_chars;
  std::map<std::vector<std::size_t>, std::size_t> unique;
  std::vector<std::size_t> position(b * L);
  std::vector<std::size_t> unique_ids;
  Mask unique_mask;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t base = (i * L + t) * C;
      std::vector<std::size_t> seq;
      for (std::size_t c = 0; c < C && batch.char_mask[base + c]; ++c) seq.push_back(batch.char_ids[base + c]);
      auto [it, inserted] = unique.emplace(seq, unique.size());
      if (inserted) {
        for (std::size_t c = 0; c < C; ++c) {
          unique_ids.push_back(c < seq.size() ? seq[c] : CharVocabulary::kPad);
          unique_mask.push_back(c < seq.size() ? 1 : 0);
        }
      }
      position[t * b + i] = it->second;
    }
  Var<T> encoded = char_encode(vars.char_embeddings, vars.char_lstm, std::span<const std::size_t>(unique_ids),
                               unique_mask, unique.size(), C);
  Var<T> chars = gather_rows(encoded, std::span<const std::size_t>(position));
  return concat_cols<T>({words, chars});
}

template <typename T>
ContextualSequence<T> bilstm(const LstmVars<T>& forward, const LstmVars<T>& backward, Var<T> x,
                             const SentenceBatch& batch) {
  ContextualSequence<T> seq;
  seq.batch = batch.batch;
  seq.length = batch.length;
  seq.lengths = batch.lengths;
  seq.mask = time_major_mask(batch);
  seq.hidden = lstm_hidden(forward);
  if (lstm_hidden(backward) != seq.hidden) throw DimensionError("bilstm: direction sizes differ");
  auto fwd = run_lstm(forward, x, seq.mask, seq.batch, false);
  auto bwd = run_lstm(backward, x, seq.mask, seq.batch, true);
  seq.states = concat_cols<T>({stack_rows(fwd.outputs), stack_rows(bwd.outputs)});
  return seq;
}

template <typename T>
Var<T> pool(const ContextualSequence<T>& seq, Pooling method) {
  for (auto n : seq.lengths)
    if (n == 0) throw InvalidInputError("pool: empty sentence");
  switch (method) {
    case Pooling::mean: return masked_reduce(ReduceOp::mean, seq.states, seq.mask, seq.batch);
    case Pooling::sum: return masked_reduce(ReduceOp::sum, seq.states, seq.mask, seq.batch);
    case Pooling::max: return masked_reduce(ReduceOp::max, seq.states, seq.mask, seq.batch);
    case Pooling::last: break;
  }
  std::vector<std::size_t> last(seq.batch), first(seq.batch);
  for (std::size_t i = 0; i < seq.batch; ++i) {
    last[i] = (seq.lengths[i] - 1) * seq.batch + i;
    first[i] = i;
  }
  const std::size_t h = seq.hidden;
  Var<T> fwd = slice_cols(gather_rows(seq.states, std::span<const std::size_t>(last)), 0, h);
  Var<T> bwd = slice_cols(gather_rows(seq.states, std::span<const std::size_t>(first)), h, 2 * h);
  return concat_cols<T>({fwd, bwd});
}

template <typename T>
Attention<T> inner_attention(const ContextualSequence<T>& seq, Var<T> raw, Var<T> weights, Var<T> vector) {
  const std::size_t d = seq.states.value().cols();
  if (raw.value().rows() != seq.batch || raw.value().cols() != d || raw.value().rank() != 2)
    throw DimensionError("inner_attention: raw " + shape_string(raw.shape()) + " vs states " +
                         shape_string(seq.states.shape()));
  if (weights.value().rank() != 2 || weights.value().rows() != 2 * d || weights.value().cols() != 2 * d ||
      vector.value().size() != 2 * d)
    throw DimensionError("inner_attention: W " + shape_string(weights.shape()) + " and v " +
                         shape_string(vector.shape()) + " must match [raw ; h_i] of width " + std::to_string(2 * d));
  // W [raw ; h_i] = W[:, :d] raw + W[:, d:] h_i, so the raw half is computed
  // once per sentence.
  Var<T> wt = transpose(weights);
  Var<T> query = matmul(raw, slice_rows(wt, 0, d));
  Var<T> keys = matmul(seq.states, slice_rows(wt, d, 2 * d));
  Var<T> hidden = tanh(keys + repeat_rows(query, seq.length));
  Var<T> scores = matmul(hidden, reshape(vector, Shape{2 * d, 1}));
  Var<T> alpha = masked_softmax(scores, seq.mask, seq.batch);
  return {weighted_sum(alpha, seq.states, seq.batch), alpha};
}

template <typename T>
SentenceEncoding<T> encode(const EncoderVars<T>& vars, const EncoderConfig& config, const SentenceBatch& batch) {
  SentenceEncoding<T> enc;
  Var<T> x = embed_tokens(vars, batch, config.use_chars);
  enc.context = bilstm(vars.forward, vars.backward, x, batch);
  enc.raw = pool(enc.context, config.pooling);
  auto att = inner_attention(enc.context, enc.raw, vars.attention_weights, vars.attention_vector);
  enc.refined = att.refined;
  enc.attention = att.weights;
  return enc;
}

#define NLI_INSTANTIATE(T)                                                                                   \
  template struct LstmParams<T>;                                                                             \
  template struct EncoderParams<T>;                                                                          \
  template EncoderVars<T> bind(Tape<T>&, EncoderParams<T>&, const EncoderConfig&);                           \
  template EncoderVars<T> bind(Tape<T>&, const EncoderParams<T>&, const EncoderConfig&);                     \
  template LstmVars<T> bind(Tape<T>&, LstmParams<T>&);                                                       \
  template LstmState<T> zero_state(Tape<T>&, std::size_t, std::size_t);                                      \
  template LstmState<T> lstm_step(const LstmVars<T>&, Var<T>, const LstmState<T>&);                          \
  template LstmRun<T> run_lstm(const LstmVars<T>&, Var<T>, const Mask&, std::size_t, bool);                  \
  template Var<T> char_encode(Var<T>, const LstmVars<T>&, std::span<const std::size_t>, const Mask&,         \
                              std::size_t, std::size_t);                                                     \
  template Var<T> embed_tokens(const EncoderVars<T>&, const SentenceBatch&, bool);                           \
  template ContextualSequence<T> bilstm(const LstmVars<T>&, const LstmVars<T>&, Var<T>, const SentenceBatch&); \
  template Var<T> pool(const ContextualSequence<T>&, Pooling);                                               \
  template Attention<T> inner_attention(const ContextualSequence<T>&, Var<T>, Var<T>, Var<T>);               \
  template SentenceEncoding<T> encode(const EncoderVars<T>&, const EncoderConfig&, const SentenceBatch&);

NLI_INSTANTIATE(float)
NLI_INSTANTIATE(double)

#undef NLI_INSTANTIATE

}  // namespace nli
