#include "nli/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <random>
#include <sstream>

#include "nli/autodiff.hpp"
#include "nli/model.hpp"

namespace nli {

double gradcheck_relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / scale;
}

bool GradcheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.passed(); });
}

std::vector<std::string> GradcheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& g : groups)
    if (!g.passed()) out.push_back(g.name);
  return out;
}

namespace {

using D = double;
using Loss = std::function<Var<D>(Tape<D>&, const std::vector<Var<D>>&)>;

Tensor<D> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Values bounded away from the kinks of relu and abs.
Tensor<D> kink_free(Shape shape, std::mt19937_64& rng) {
  Tensor<D> t = random_tensor(std::move(shape), rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.values())
    if (sign(rng)) v = -v;
  return t;
}

// sum(x * R) for a fixed random R, so every output coordinate matters.
Var<D> weighted_total(Tape<D>& tape, Var<D> x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(x, tape.constant(random_tensor(x.shape(), rng))));
}

struct Checker {
  const GradcheckOptions& options;

  void arm(Tape<D>& tape) const {
    if (!options.corrupt_op.empty()) tape.corrupt_backward(options.corrupt_op, options.corrupt_factor);
  }

  GradcheckGroup op(const std::string& name, std::vector<Tensor<D>> inputs, const Loss& loss) const {
    Tape<D> tape;
    arm(tape);
    std::vector<Var<D>> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    tape.backward(loss(tape, vars));
    std::vector<Tensor<D>> analytic;
    for (const auto& v : vars) analytic.push_back(tape.grad(v.id()));

    auto evaluate = [&] {
      Tape<D> t;
      std::vector<Var<D>> vs;
      for (const auto& x : inputs) vs.push_back(t.constant(x));
      return loss(t, vs).value().item();
    };
    GradcheckGroup g{name, 0, 0.0, options.op_tolerance};
    for (std::size_t k = 0; k < inputs.size(); ++k)
      for (std::size_t i = 0; i < inputs[k].size(); ++i) {
        const double numeric = central(inputs[k][i], evaluate);
        const double a = analytic[k].size() ? analytic[k][i] : 0.0;
        g.max_rel_error = std::max(g.max_rel_error, gradcheck_relative_error(a, numeric));
        ++g.coordinates;
      }
    return g;
  }

  template <typename F>
  double central(double& x, F&& evaluate) const {
    const double saved = x;
    x = saved + options.step;
    const double up = evaluate();
    x = saved - options.step;
    const double down = evaluate();
    x = saved;
    return (up - down) / (2 * options.step);
  }
};

void check_ops(const Checker& c, std::mt19937_64& rng, std::vector<GradcheckGroup>& out) {
  auto R = [&](Shape s) { return random_tensor(std::move(s), rng); };
  const Mask mask{1, 1, 1, 0, 1, 0, 1, 0};  // 4 steps x 2 sequences: lengths 4 and 1
  const Mask seq_mask{1, 1, 1, 0, 1, 0};    // 3 steps x 2 sequences: lengths 3 and 1

  out.push_back(c.op("matmul", {R({3, 4}), R({4, 2})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, matmul(v[0], v[1]), 1); }));
  out.push_back(c.op("transpose", {R({3, 2})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, transpose(v[0]), 2); }));
  out.push_back(c.op("add", {R({2, 3}), R({2, 3})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, v[0] + v[1], 3); }));
  out.push_back(c.op("sub", {R({2, 3}), R({2, 3})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, v[0] - v[1], 4); }));
  out.push_back(c.op("mul", {R({2, 3}), R({2, 3})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, v[0] * v[1], 5); }));
  out.push_back(c.op("scale", {R({2, 3})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, scale(v[0], 0.7), 6); }));
  out.push_back(c.op("add_row_bias", {R({3, 4}), R({4})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, add_row_bias(v[0], v[1]), 7); }));
  out.push_back(c.op("tanh", {R({2, 4})}, [](Tape<D>& t, const auto& v) { return weighted_total(t, tanh(v[0]), 8); }));
  out.push_back(
      c.op("sigmoid", {R({2, 4})}, [](Tape<D>& t, const auto& v) { return weighted_total(t, sigmoid(v[0]), 9); }));
  out.push_back(c.op("relu", {kink_free({2, 4}, rng)},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, relu(v[0]), 10); }));
  out.push_back(c.op("abs", {kink_free({2, 4}, rng)},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, abs(v[0]), 11); }));
  out.push_back(c.op("sum", {R({2, 3})}, [](Tape<D>&, const auto& v) { return scale(sum(v[0]), 1.3); }));
  out.push_back(c.op("reshape", {R({2, 3})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, reshape(v[0], Shape{3, 2}), 12); }));
  out.push_back(c.op("concat_cols", {R({2, 3}), R({2, 1})}, [](Tape<D>& t, const auto& v) {
    return weighted_total(t, concat_cols<D>({v[0], v[1], v[0]}), 13);
  }));
  out.push_back(c.op("slice_cols", {R({3, 5})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, slice_cols(v[0], 1, 4), 14); }));
  out.push_back(c.op("slice_rows", {R({5, 2})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, slice_rows(v[0], 2, 5), 15); }));
  out.push_back(c.op("stack_rows", {R({2, 3}), R({1, 3})}, [](Tape<D>& t, const auto& v) {
    return weighted_total(t, stack_rows<D>({v[0], v[1], v[0]}), 16);
  }));
  out.push_back(c.op("gather_rows", {R({4, 3})}, [](Tape<D>& t, const auto& v) {
    static const std::vector<std::size_t> ids{2, 0, 2, 3};
    return weighted_total(t, gather_rows(v[0], std::span<const std::size_t>(ids)), 17);
  }));
  out.push_back(c.op("repeat_rows", {R({2, 3})},
                     [](Tape<D>& t, const auto& v) { return weighted_total(t, repeat_rows(v[0], 3), 18); }));
  out.push_back(c.op("select_rows", {R({4, 2}), R({4, 2})}, [](Tape<D>& t, const auto& v) {
    static const Mask m{1, 0, 0, 1};
    return weighted_total(t, select_rows(m, v[0], v[1]), 19);
  }));
  out.push_back(c.op("mask_rows", {R({4, 2})}, [](Tape<D>& t, const auto& v) {
    static const Mask m{0, 1, 1, 0};
    return weighted_total(t, mask_rows(v[0], m), 20);
  }));
  out.push_back(c.op("masked_softmax", {R({8, 1})}, [mask](Tape<D>& t, const auto& v) {
    return weighted_total(t, masked_softmax(v[0], mask, 2), 21);
  }));
  const std::pair<ReduceOp, const char*> reductions[] = {
      {ReduceOp::mean, "reduce_mean"}, {ReduceOp::sum, "reduce_sum"}, {ReduceOp::max, "reduce_max"}};
  for (auto [op, name] : reductions)
    out.push_back(c.op(name, {R({6, 3})}, [seq_mask, op = op](Tape<D>& t, const auto& v) {
      return weighted_total(t, masked_reduce(op, v[0], seq_mask, 2), 22);
    }));
  out.push_back(c.op("weighted_sum", {R({6, 1}), R({6, 3})}, [](Tape<D>& t, const auto& v) {
    return weighted_total(t, weighted_sum(v[0], v[1], 2), 23);
  }));
  out.push_back(c.op("dropout", {R({3, 4})}, [](Tape<D>& t, const auto& v) {
    std::mt19937_64 fixed(5);
    return weighted_total(t, dropout(v[0], 0.25, true, fixed), 24);
  }));
  out.push_back(c.op("cross_entropy", {R({4, 3})}, [](Tape<D>&, const auto& v) {
    static const std::vector<int> labels{0, 2, 1, 2};
    return cross_entropy_from_logits(v[0], std::span<const int>(labels));
  }));
}

// A few sentence pairs over a small vocabulary.
struct TinyData {
  std::shared_ptr<Vocabulary> vocab = std::make_shared<Vocabulary>();
  std::shared_ptr<CharVocabulary> chars = std::make_shared<CharVocabulary>();
  Batch batch;

  TinyData() {
    const std::vector<std::pair<std::string, std::string>> pairs{
        {"a man plays a guitar", "nobody plays"},
        {"two dogs run", "the dogs run in a park"},
        {"she reads <num> books", "a woman reads"}};
    std::vector<NLIExample> examples;
    int label = 0;
    for (const auto& [p, h] : pairs) {
      NLIExample e;
      e.pair_id = "g" + std::to_string(label);
      e.genre = "fiction";
      e.premise = tokenize(p);
      e.hypothesis = tokenize(h);
      e.label = static_cast<Label>(label++ % kNumClasses);
      examples.push_back(e);
    }
    *vocab = Vocabulary::build(examples);
    *chars = CharVocabulary::build(examples);
    BatchOptions options;
    options.batch_size = examples.size();
    options.role = SplitRole::dev;
    std::mt19937_64 unused(0);
    batch = make_batches(examples, *vocab, *chars, options, unused).front();
  }
};

void check_model(const Checker& c, Pooling pooling, const TinyData& data, std::mt19937_64& rng,
                 std::vector<GradcheckGroup>& out) {
  const auto& o = c.options;
  ModelConfig config;
  config.encoder.use_chars = true;
  config.encoder.word_dim = o.word_dim;
  config.encoder.char_dim = o.char_dim;
  config.encoder.char_hidden = o.char_hidden;
  config.encoder.hidden = o.hidden;
  config.encoder.pooling = pooling;
  config.mlp_widths = o.mlp_widths;
  config.dropout = 0.25;

  Parameter<D> table("word_embeddings", random_tensor({data.vocab->size(), o.word_dim}, rng), false);
  for (auto& v : table.value.row(Vocabulary::kPad)) v = 0;
  auto params = ModelParams<D>::create(config, table, data.chars->size(), rng);
  // Attention parameters at the scale of the other weights so the softmax is
  // far from uniform.
  params.encoder.attention_weights.value = random_tensor(params.encoder.attention_weights.value.shape(), rng);
  params.encoder.attention_vector.value = random_tensor(params.encoder.attention_vector.value.shape(), rng);

  auto loss_of = [&](Tape<D>& tape) {
    auto vars = bind(tape, params, config);
    std::mt19937_64 fixed(11);
    auto result = forward(vars, config, data.batch, true, fixed);
    return cross_entropy_from_logits(result.logits, std::span<const int>(data.batch.labels));
  };

  auto list = params.parameters(true);
  for (auto* p : list) p->zero_grad();
  {
    Tape<D> tape;
    c.arm(tape);
    tape.backward(loss_of(tape));
  }
  auto evaluate = [&] {
    Tape<D> tape;
    return loss_of(tape).value().item();
  };
  const std::string prefix = "model[" + std::string(pooling_name(pooling)) + "].";
  for (auto* p : list) {
    if (!p->trainable) continue;
    GradcheckGroup g{prefix + p->name, 0, 0.0, o.model_tolerance};
    const Tensor<D> analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double numeric = c.central(p->value[i], evaluate);
      g.max_rel_error = std::max(g.max_rel_error, gradcheck_relative_error(analytic[i], numeric));
      ++g.coordinates;
    }
    out.push_back(g);
  }
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckReport report;
  Checker checker{options};
  std::mt19937_64 rng(options.seed);
  check_ops(checker, rng, report.groups);
  {
    // A single LSTM cell update with every input free.
    auto R = [&](Shape s) { return random_tensor(std::move(s), rng); };
    report.groups.push_back(checker.op("lstm_step", {R({2, 3}), R({8, 3}), R({8, 2}), R({8}), R({2, 2}), R({2, 2})},
                                       [](Tape<D>& t, const auto& v) {
                                         LstmVars<D> cell{v[1], v[2], v[3]};
                                         auto next = lstm_step(cell, v[0], LstmState<D>{v[4], v[5]});
                                         return add(weighted_total(t, next.h, 30), weighted_total(t, next.c, 31));
                                       }));
  }
  TinyData data;
  for (Pooling p : kAllPoolings) check_model(checker, p, data, rng, report.groups);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string format_gradcheck(const GradcheckReport& report) {
  std::ostringstream out;
  char line[200];
  for (const auto& g : report.groups) {
    std::snprintf(line, sizeof line, "%-44s coords=%-5zu max_rel_err=%.3e tol=%.0e %s\n", g.name.c_str(),
                  g.coordinates, g.max_rel_error, g.tolerance, g.passed() ? "ok" : "FAIL");
    out << line;
  }
  std::snprintf(line, sizeof line, "groups=%zu failed=%zu seconds=%.2f\n", report.groups.size(),
                report.failures().size(), report.seconds);
  out << line;
  return out.str();
}

}  // namespace nli
