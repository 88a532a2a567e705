#include <doctest.h>

#include <cmath>
#include <random>

#include "nli/classifier.hpp"
#include "nli/error.hpp"
#include "nli/model.hpp"
#include "support/fd_oracle.hpp"
#include "support/synthetic.hpp"
#include "support/tiny_model.hpp"

using namespace nli;
using nli::test::random_tensor;

TEST_CASE("aggregate builds [p ; h ; p*h ; |p-h|]") {
  Tape<double> tape;
  auto p = tape.constant(Tensor<double>({1, 2}, {1, -2}));
  auto h = tape.constant(Tensor<double>({1, 2}, {3, 4}));
  CHECK(aggregate(p, h).value().values()[0] == 1);
  const std::vector<double> expected{1, -2, 3, 4, 3, -8, 2, 6};
  auto r = aggregate(p, h).value();
  CHECK(std::vector<double>(r.values().begin(), r.values().end()) == expected);

  SUBCASE("p equal to h") {
    auto same = aggregate(p, p).value();
    CHECK(same.at(0, 4) == 1);
    CHECK(same.at(0, 5) == 4);
    CHECK(same.at(0, 6) == 0);
    CHECK(same.at(0, 7) == 0);
  }
  SUBCASE("argument swap") {
    std::mt19937_64 rng(3);
    auto a = tape.constant(random_tensor({3, 5}, rng));
    auto b = tape.constant(random_tensor({3, 5}, rng));
    auto ab = aggregate(a, b).value(), ba = aggregate(b, a).value();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK(ab.at(i, j) == ba.at(i, 5 + j));
        CHECK(ab.at(i, 10 + j) == ba.at(i, 10 + j));
        CHECK(ab.at(i, 15 + j) == ba.at(i, 15 + j));
        CHECK(ab.at(i, 15 + j) >= 0.0);
      }
  }
  SUBCASE("width mismatch") {
    CHECK_THROWS_AS(aggregate(p, tape.constant(Tensor<double>({1, 3}))), DimensionError);
  }
}

namespace {

MlpParams<double> zero_mlp(std::size_t in, std::vector<std::size_t> widths) {
  std::mt19937_64 rng(1);
  auto mlp = MlpParams<double>::create(in, widths, rng);
  for (auto* p : mlp.parameters()) p->value.fill(0.0);
  return mlp;
}

}  // namespace

TEST_CASE("classify") {
  std::mt19937_64 rng(9);

  SUBCASE("a zero network is uniform and picks class 0") {
    auto mlp = zero_mlp(8, {4, 4, 4});
    Tape<double> tape;
    auto logits = classify(bind(tape, std::as_const(mlp)), tape.constant(random_tensor({2, 8}, rng)), 0.25, false, rng);
    auto dist = distributions(logits.value());
    for (const auto& d : dist) {
      for (double p : d.probs) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
      CHECK(d.predicted == 0);
    }
  }

  SUBCASE("tiny network against a hand-composed chain") {
    auto mlp = MlpParams<double>::create(5, {4, 4, 4}, rng);
    for (auto* p : mlp.parameters()) p->value = random_tensor(p->value.shape(), rng);
    Tensor<double> r = random_tensor({1, 5}, rng);
    Tape<double> tape;
    auto logits = classify(bind(tape, std::as_const(mlp)), tape.constant(r), 0.25, false, rng).value();

    std::vector<double> x(r.values().begin(), r.values().end());
    auto layer = [](const DenseLayer<double>& l, const std::vector<double>& in, bool relu) {
      std::vector<double> out(l.output_size());
      for (std::size_t o = 0; o < out.size(); ++o) {
        double s = l.bias.value[o];
        for (std::size_t i = 0; i < in.size(); ++i) s += l.weights.value.at(o, i) * in[i];
        out[o] = relu ? std::max(0.0, s) : s;
      }
      return out;
    };
    for (const auto& l : mlp.hidden) x = layer(l, x, true);
    x = layer(mlp.output, x, false);
    for (int c = 0; c < kNumClasses; ++c) CHECK(logits.at(0, c) == doctest::Approx(x[c]).epsilon(1e-12));
  }

  SUBCASE("inference is deterministic and training applies dropout") {
    auto mlp = MlpParams<double>::create(6, {32}, rng);
    Tensor<double> r = random_tensor({1, 6}, rng);
    Tape<double> tape;
    auto vars = bind(tape, std::as_const(mlp));
    auto a = classify(vars, tape.constant(r), 0.5, false, rng).value();
    auto b = classify(vars, tape.constant(r), 0.5, false, rng).value();
    CHECK(a == b);
    auto t = classify(vars, tape.constant(r), 0.5, true, rng).value();
    CHECK_FALSE(t == a);
  }

  SUBCASE("wrong feature width is a configuration error") {
    auto mlp = zero_mlp(8, {4});
    Tape<double> tape;
    CHECK_THROWS_AS(classify(bind(tape, std::as_const(mlp)), tape.constant(Tensor<double>({1, 7})), 0.0, false, rng),
                    ConfigError);
  }

  SUBCASE("initialization bounds") {
    auto mlp = MlpParams<float>::create(100, {50}, rng);
    float largest = 0;
    for (float v : mlp.hidden[0].weights.value.values()) largest = std::max(largest, std::abs(v));
    CHECK(largest <= 0.1f);
    CHECK(largest > 0.09f);
    for (float v : mlp.hidden[0].bias.value.values()) CHECK(v == 0.0f);
    CHECK(mlp.output.output_size() == 3);
  }
}

TEST_CASE("distributions") {
  SUBCASE("softmax sums to one and ties go to the lowest index") {
    auto d = distributions(Tensor<double>::matrix(2, 3, {1, 3, 3, -2, 0.5, 0.25}));
    CHECK(d[0].predicted == 1);
    CHECK(d[1].predicted == 1);
    for (const auto& x : d) CHECK(x.probs[0] + x.probs[1] + x.probs[2] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("shifting every logit changes nothing") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 200; ++trial) {
      Tensor<double> logits = random_tensor({1, 3}, rng, -5, 5);
      Tensor<double> shifted = logits;
      const double c = std::uniform_real_distribution<double>(-100, 100)(rng);
      for (auto& v : shifted.values()) v += c;
      auto a = distributions(logits)[0], b = distributions(shifted)[0];
      for (int k = 0; k < 3; ++k) REQUIRE(a.probs[k] == doctest::Approx(b.probs[k]).epsilon(1e-9));
      REQUIRE(a.predicted == b.predicted);
    }
  }
  SUBCASE("extreme logits stay finite") {
    auto d = distributions(Tensor<float>::matrix(1, 3, {1000.0f, -1000.0f, 0.0f}))[0];
    CHECK(d.probs[0] == 1.0);
    CHECK(d.probs[1] == 0.0);
  }
}

TEST_CASE("full model shapes and gradients") {
  SUBCASE("matching vector is four representations wide") {
    for (bool chars : {true, false}) {
      auto examples = nli::test::synthetic_nli({6, 2, 4});
      auto model = nli::test::tiny_model(examples, nli::test::tiny_config(Pooling::max, chars));
      BatchOptions options;
      options.role = SplitRole::dev;
      std::mt19937_64 rng(1);
      auto batch = make_batches(examples, model.vocab(), model.chars(), options, rng).front();
      Tape<float> tape;
      auto out = forward(bind(tape, std::as_const(model.params()), model.config()), model.config(), batch, false, rng);
      CHECK(out.matching.value().shape() == Shape{6, 4 * model.config().encoder.representation_dim()});
      CHECK(out.logits.value().shape() == Shape{6, 3});
    }
  }

  SUBCASE("loss through classify, aggregate and encode matches finite differences") {
    auto examples = nli::test::synthetic_nli({4, 5, 3});
    Vocabulary vocab = Vocabulary::build(examples);
    CharVocabulary chars = CharVocabulary::build(examples);
    auto config = nli::test::tiny_config(Pooling::mean, true);
    config.mlp_widths = {5, 5};
    std::mt19937_64 rng(2);
    Parameter<double> words("w", random_tensor({vocab.size(), config.encoder.word_dim}, rng), false);
    for (auto& v : words.value.row(0)) v = 0;
    auto params = ModelParams<double>::create(config, words, chars.size(), rng);
    BatchOptions options;
    options.role = SplitRole::dev;
    auto batch = make_batches(examples, vocab, chars, options, rng).front();

    auto list = params.parameters(true);
    std::vector<Tensor<double>> inputs;
    for (auto* p : list)
      if (p->trainable) inputs.push_back(p->value);
    nli::test::Fn f = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
      ModelVars<double> vars;
      vars.encoder.word_embeddings = tape.view(params.encoder.word_embeddings.value);
      vars.encoder.char_embeddings = v[0];
      vars.encoder.char_lstm = {v[1], v[2], v[3]};
      vars.encoder.forward = {v[4], v[5], v[6]};
      vars.encoder.backward = {v[7], v[8], v[9]};
      vars.encoder.attention_weights = v[10];
      vars.encoder.attention_vector = v[11];
      for (std::size_t k = 0; k < 2; ++k) vars.mlp.hidden.push_back({v[12 + 2 * k], v[13 + 2 * k]});
      vars.mlp.output = {v[16], v[17]};
      std::mt19937_64 fixed(3);
      auto out = forward(vars, config, batch, true, fixed);
      return cross_entropy_from_logits(out.logits, std::span<const int>(batch.labels));
    };
    REQUIRE(inputs.size() == 18);
    auto cmp = nli::test::compare_gradients(f, inputs, 1e-4);
    CHECK(cmp.max_rel_error < 1e-3);
  }
}
