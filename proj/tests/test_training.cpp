#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "nli/checkpoint.hpp"
#include "nli/error.hpp"
#include "nli/evaluation.hpp"
#include "nli/training.hpp"
#include "support/synthetic.hpp"
#include "support/tiny_model.hpp"

using namespace nli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "nli_training_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Batch whole_batch(const Model& model, const std::vector<NLIExample>& examples) {
  BatchOptions options;
  options.batch_size = examples.size();
  options.role = SplitRole::dev;
  std::mt19937_64 rng(0);
  return make_batches(examples, model.vocab(), model.chars(), options, rng).front();
}

}  // namespace

TEST_CASE("RMSProp update rule") {
  SUBCASE("first step from g = 2") {
    Parameter<double> theta("theta", Tensor<double>::scalar(1.0));
    theta.grad = Tensor<double>::scalar(2.0);
    RmsProp<double> opt;
    opt.step({&theta});
    CHECK(opt.state()[0].item() == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(theta.value.item() - 1.0 == doctest::Approx(-0.001 * 2.0 / (std::sqrt(0.4) + 1e-8)).epsilon(1e-12));
    CHECK(theta.value.item() - 1.0 == doctest::Approx(-0.0031623).epsilon(1e-5));

    // Second step with g = -1: s = 0.9 * 0.4 + 0.1 * 1.
    const double before = theta.value.item();
    theta.grad = Tensor<double>::scalar(-1.0);
    opt.step({&theta});
    CHECK(opt.state()[0].item() == doctest::Approx(0.46).epsilon(1e-15));
    CHECK(theta.value.item() - before == doctest::Approx(0.001 / (std::sqrt(0.46) + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("float parameters follow the same rule") {
    Parameter<float> theta("theta", Tensor<float>::scalar(0.0f));
    theta.grad = Tensor<float>::scalar(2.0f);
    RmsProp<float> opt;
    opt.step({&theta});
    CHECK(theta.value.item() == doctest::Approx(-0.0031623).epsilon(1e-4));
  }
  SUBCASE("zero gradient is a fixed point") {
    Parameter<double> theta("theta", Tensor<double>::vector({0.5, -0.25}));
    RmsProp<double> opt;
    opt.step({&theta});
    CHECK(theta.value == Tensor<double>::vector({0.5, -0.25}));
    CHECK(opt.state()[0] == Tensor<double>::vector({0.0, 0.0}));
  }
  SUBCASE("frozen parameters are skipped") {
    Parameter<double> frozen("frozen", Tensor<double>::vector({1.0}), false);
    frozen.grad = Tensor<double>::vector({5.0});
    RmsProp<double> opt;
    opt.step({&frozen});
    CHECK(frozen.value[0] == 1.0);
  }
  SUBCASE("a NaN gradient aborts the whole step") {
    Parameter<double> a("alpha", Tensor<double>::vector({1.0}));
    Parameter<double> b("beta", Tensor<double>::vector({1.0}));
    a.grad = Tensor<double>::vector({1.0});
    b.grad = Tensor<double>::vector({std::numeric_limits<double>::quiet_NaN()});
    RmsProp<double> opt;
    try {
      opt.step({&a, &b});
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("beta") != std::string::npos);
    }
    CHECK(a.value[0] == 1.0);
  }
}

TEST_CASE("training steps") {
  auto examples = nli::test::synthetic_nli({12, 3, 4});
  auto model = nli::test::tiny_model(examples, nli::test::tiny_config());
  auto batch = whole_batch(model, examples);

  SUBCASE("a small step lowers the loss of a single example") {
    std::vector<NLIExample> one{examples.front()};
    auto single = whole_batch(model, one);
    std::mt19937_64 rng(1);
    RmsProp<float> opt({1e-4, 0.9, 1e-8});
    const double before = batch_loss(model, single, false, rng);
    CHECK(train_step(model, opt, single, rng, false) == doctest::Approx(before).epsilon(1e-6));
    CHECK(batch_loss(model, single, false, rng) < before);
  }

  SUBCASE("frozen embeddings survive 100 steps bit for bit") {
    const Tensor<float> embeddings = model.params().encoder.word_embeddings.value;
    const Tensor<float> attention = model.params().encoder.attention_weights.value;
    std::mt19937_64 rng(2);
    RmsProp<float> opt;
    for (int step = 0; step < 100; ++step) train_step(model, opt, batch, rng);
    CHECK(model.params().encoder.word_embeddings.value == embeddings);
    CHECK_FALSE(model.params().encoder.attention_weights.value == attention);
  }

  SUBCASE("a non-finite loss leaves parameters untouched") {
    model.params().mlp.output.bias.value[0] = std::numeric_limits<float>::infinity();
    model.params().mlp.output.bias.value[1] = -std::numeric_limits<float>::infinity();
    const Tensor<float> w = model.params().mlp.hidden[0].weights.value;
    std::mt19937_64 rng(3);
    RmsProp<float> opt;
    CHECK_THROWS_AS(train_step(model, opt, batch, rng), NumericError);
    CHECK(model.params().mlp.hidden[0].weights.value == w);
  }
}

TEST_CASE("train loop") {
  auto train_set = nli::test::synthetic_nli({32, 5, 4});
  auto dev_set = nli::test::synthetic_nli({30, 6, 4});
  auto config = nli::test::tiny_config();
  TrainConfig tc;
  tc.batch_size = 8;
  tc.max_epochs = 3;
  tc.seed = 42;

  SUBCASE("equal seeds replay exactly") {
    auto a = train(nli::test::tiny_model(train_set, config, 5), tc, train_set, dev_set);
    auto b = train(nli::test::tiny_model(train_set, config, 5), tc, train_set, dev_set);
    REQUIRE(a.epochs.size() == 3);
    CHECK(a.epochs[0].train_loss == b.epochs[0].train_loss);
    CHECK(a.epochs[2].train_loss == b.epochs[2].train_loss);
    CHECK(a.best.params().encoder.attention_weights.value == b.best.params().encoder.attention_weights.value);
  }

  SUBCASE("the best snapshot scores what it recorded") {
    std::ostringstream log;
    TrainHooks hooks;
    hooks.log = &log;
    auto result = train(nli::test::tiny_model(train_set, config, 6), tc, train_set, dev_set, hooks);
    CHECK(result.best_epoch >= 1);
    CHECK(evaluate(result.best, dev_set).accuracy() == doctest::Approx(result.best_dev_accuracy).epsilon(1e-9));
    for (const auto& e : result.epochs) CHECK(e.dev_accuracy <= result.best_dev_accuracy);
    const std::string text = log.str();
    CHECK(text.find("epoch=1 train_loss=") != std::string::npos);
    CHECK(text.find("dev_acc=") != std::string::npos);
    CHECK(text.find("seconds=") != std::string::npos);
  }

  SUBCASE("a numeric blow-up halts and keeps the last good model") {
    TrainHooks hooks;
    hooks.on_epoch = [](const EpochRecord& r, const Model& m) {
      if (r.epoch == 1) const_cast<Model&>(m).params().mlp.output.bias.value[0] = std::numeric_limits<float>::quiet_NaN();
      return true;
    };
    auto result = train(nli::test::tiny_model(train_set, config, 7), tc, train_set, dev_set, hooks);
    CHECK(result.halted);
    CHECK(result.epochs.size() == 1);
    CHECK(result.best_epoch == 1);
    CHECK(std::isfinite(result.best.params().mlp.output.bias.value[0]));
  }

  SUBCASE("configuration errors") {
    TrainConfig bad = tc;
    bad.batch_size = 0;
    CHECK_THROWS_AS(train(nli::test::tiny_model(train_set, config), bad, train_set, dev_set), ConfigError);
    CHECK_THROWS_AS(train(nli::test::tiny_model(train_set, config), tc, train_set, {}), InvalidInputError);
  }
}

TEST_CASE("overfitting a small rule-labelled set") {
  auto data = nli::test::synthetic_nli({32, 11, 4});
  TrainConfig tc;
  tc.batch_size = 8;
  tc.max_epochs = 300;
  tc.seed = 3;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r, const Model&) { return r.dev_accuracy < 1.0; };
  auto result = train(nli::test::tiny_model(data, nli::test::tiny_config(Pooling::mean, false), 2), tc, data, data, hooks);
  CHECK(result.best_dev_accuracy == 1.0);
  MESSAGE("epochs to 100% train accuracy: " << result.epochs.size());
}

TEST_CASE("checkpoints") {
  auto data = nli::test::synthetic_nli({20, 8, 5});
  auto model = nli::test::tiny_model(data, nli::test::tiny_config(Pooling::last, true), 9);
  const CheckpointMeta meta{4, 0.625, 77};
  const fs::path path = scratch("model.ckpt");
  save_checkpoint(model, meta, path);

  SUBCASE("round trip is exact") {
    auto loaded = load_checkpoint(path);
    CHECK(loaded.meta.epoch == 4);
    CHECK(loaded.meta.dev_accuracy == 0.625);
    CHECK(loaded.meta.seed == 77);
    CHECK(loaded.model.vocab() == model.vocab());
    CHECK(loaded.model.chars() == model.chars());
    auto before = model.parameters();
    auto after = loaded.model.parameters();
    REQUIRE(before.size() == after.size());
    for (std::size_t k = 0; k < before.size(); ++k) {
      CHECK(before[k]->name == after[k]->name);
      CHECK(before[k]->value == after[k]->value);
      CHECK(before[k]->trainable == after[k]->trainable);
    }
    auto p1 = model.predict(data);
    auto p2 = loaded.model.predict(data);
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(p1[i].probs == p2[i].probs);

    const fs::path again = scratch("model_again.ckpt");
    save_checkpoint(loaded.model, loaded.meta, again);
    CHECK(slurp(path) == slurp(again));
  }

  SUBCASE("layout is a length-prefixed manifest and a float32 blob") {
    const std::string bytes = slurp(path);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    REQUIRE(len < bytes.size());
    auto manifest = nlohmann::json::parse(bytes.substr(8, len));
    std::size_t floats = 0;
    for (const auto* p : model.parameters()) floats += p->value.size();
    CHECK(bytes.size() - 8 - len == 4 * floats);
    CHECK(manifest.at("parameters").size() == model.parameters().size());
    CHECK(manifest.at("config").at("encoder").at("pooling") == "last");
  }

  SUBCASE("truncated and corrupted files are rejected") {
    const std::string bytes = slurp(path);
    const fs::path bad = scratch("bad.ckpt");
    for (std::size_t cut : {std::size_t{3}, std::size_t{100}, bytes.size() - 1}) {
      std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(cut));
      CHECK_THROWS_AS(load_checkpoint(bad), IntegrityError);
    }
    std::string flipped = bytes;
    flipped[bytes.size() - 10] ^= 0x40;
    std::ofstream(bad, std::ios::binary).write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
    CHECK_THROWS_AS(load_checkpoint(bad), IntegrityError);
    CHECK_THROWS_AS(load_checkpoint(scratch("missing.ckpt")), IoError);
  }

  SUBCASE("vocabulary mismatch") {
    Vocabulary other = Vocabulary::build(nli::test::synthetic_nli({20, 99, 14}));
    CHECK_THROWS_AS(load_checkpoint(path, other, model.chars()), ConfigError);
    CHECK_NOTHROW(load_checkpoint(path, model.vocab(), model.chars()));
  }

  SUBCASE("model config json round trip") {
    auto config = nli::test::tiny_config(Pooling::max, false);
    config.mlp_widths = {3, 9};
    auto back = model_config_from_json(model_config_json(config));
    CHECK(back.encoder.pooling == Pooling::max);
    CHECK_FALSE(back.encoder.use_chars);
    CHECK(back.mlp_widths == std::vector<std::size_t>{3, 9});
    CHECK_THROWS_AS(model_config_from_json("{"), ConfigError);
  }
}
