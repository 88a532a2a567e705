#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "json.hpp"
#include "nli/checkpoint.hpp"
#include "nli/cli.hpp"
#include "nli/error.hpp"
#include "support/synthetic.hpp"

using namespace nli;
namespace fs = std::filesystem;

namespace {

const fs::path kData = NLI_TEST_DATA_DIR;

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args, const std::string& input = {}) {
  std::istringstream in(input);
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, in, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "nli_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string field(const std::string& text, const std::string& key) {
  std::smatch m;
  if (!std::regex_search(text, m, std::regex("(?:^|\\s)" + key + "=(\\S+)"))) return {};
  return m[1];
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string tiny_cfg() { return (kData / "tiny.cfg").string(); }

fs::path train_fixture(const fs::path& out_dir, std::uint64_t seed, std::vector<std::string> extra = {}) {
  std::vector<std::string> args{"train", "--config", tiny_cfg(), "--out-dir", out_dir.string(), "--seed",
                                std::to_string(seed)};
  args.insert(args.end(), extra.begin(), extra.end());
  auto r = cli(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  return fs::path(field(r.out, "run_dir")) / "best.ckpt";
}

// Section of an eval printout from the header row through the confusion matrix.
std::string report_block(const std::string& out) {
  const auto start = out.find("[matched]");
  return start == std::string::npos ? std::string() : out.substr(start);
}

}  // namespace

TEST_CASE("config files") {
  SUBCASE("format and parse round trip") {
    RunConfig c;
    c.train.seed = 42;
    c.train.learning_rate = 0.0005;
    c.model.mlp_widths = {30, 20};
    c.model.encoder.pooling = Pooling::max;
    c.model.encoder.use_chars = false;
    c.embeddings = "/data/glove.txt";
    const std::string text = format_config(c);
    std::istringstream in(text);
    CHECK(format_config(parse_config(in)) == text);
    std::size_t lines = 0;
    for (char ch : text) lines += ch == '\n';
    CHECK(lines == config_keys().size());
  }
  SUBCASE("comments, blanks and relative paths") {
    std::istringstream in("# comment\n\n train_file = a/train.jsonl  # trailing\nembeddings = /abs/e.txt\n");
    auto c = parse_config(in, "x.cfg", "/base");
    CHECK(c.train_file == fs::path("/base/a/train.jsonl"));
    CHECK(c.embeddings == fs::path("/abs/e.txt"));
  }
  SUBCASE("unknown keys and bad values name the line") {
    std::istringstream unknown("seed = 1\nlearning_rat = 0.1\n");
    try {
      parse_config(unknown, "my.cfg");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("my.cfg:2") != std::string::npos);
      CHECK(std::string(e.what()).find("learning_rat") != std::string::npos);
    }
    for (const char* bad : {"seed = -1\n", "pooling = median\n", "chars = maybe\n", "mlp_widths = 3,x\n",
                            "dropout = \n", "justtext\n"}) {
      std::istringstream in(bad);
      CHECK_THROWS_AS(parse_config(in), ConfigError);
    }
  }
  SUBCASE("defaults follow the training protocol") {
    RunConfig c;
    CHECK(c.train.learning_rate == 0.001);
    CHECK(c.train.rho == 0.9);
    CHECK(c.train.epsilon == 1e-8);
    CHECK(c.model.mlp_widths == std::vector<std::size_t>{2000, 2000, 2000});
    CHECK(c.model.dropout == 0.25);
    CHECK(c.snli_fraction == 0.15);
    CHECK(c.train.max_premise_len == 200);
  }
  SUBCASE("validation") {
    RunConfig c = load_config(kData / "tiny.cfg");
    CHECK_NOTHROW(validate_config(c, "train"));
    c.train.batch_size = 0;
    CHECK_THROWS_AS(validate_config(c, "train"), ConfigError);
    c = load_config(kData / "tiny.cfg");
    c.embeddings = kData / "missing.txt";
    CHECK_THROWS_WITH_AS(validate_config(c, "train"), doctest::Contains("missing.txt"), ConfigError);
    c = load_config(kData / "tiny.cfg");
    c.runs_per_cell = 1;
    CHECK_THROWS_AS(validate_config(c, "sweep"), ConfigError);
  }
  SUBCASE("exit codes by error category") {
    CHECK(exit_code_for(ConfigError("x")) == 1);
    CHECK(exit_code_for(UsageError("x")) == 1);
    CHECK(exit_code_for(DataError("x")) == 2);
    CHECK(exit_code_for(IntegrityError("x")) == 2);
    CHECK(exit_code_for(NumericError("x")) == 3);
  }
}

TEST_CASE("usage errors") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  CHECK(cli({"train", "--epochs", "ten"}).code == 1);
  CHECK(cli({"gradcheck", "--dims", "huge"}).code == 1);
  auto help = cli({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("sweep") != std::string::npos);
}

TEST_CASE("train") {
  const fs::path dir = scratch("train");

  SUBCASE("the fixture corpus trains end to end") {
    auto r = cli({"train", "--config", tiny_cfg(), "--out-dir", dir.string(), "--seed", "5"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(field(r.out, "seed") == "5");
    const fs::path run = field(r.out, "run_dir");
    CHECK(run.parent_path() == dir);
    for (const char* f : {"best.ckpt", "vocab.txt", "chars.txt", "epochs.log", "config.txt", "eval-matched.json",
                          "eval-mismatched.json"})
      CHECK_MESSAGE(fs::exists(run / f), f);
    auto effective = load_config(run / "config.txt");
    CHECK(effective.train.seed == 5);
    CHECK(effective.train_file == load_config(kData / "tiny.cfg").train_file);
    CHECK(r.out.find("MultiNLI Overall") != std::string::npos);
    CHECK(slurp(run / "epochs.log").find("epoch=3 ") != std::string::npos);
    auto loaded = load_checkpoint(run / "best.ckpt");
    CHECK(loaded.model.vocab() == Vocabulary::load(run / "vocab.txt"));
    CHECK(loaded.meta.seed == 5);
  }

  SUBCASE("flags override the file and --set") {
    auto r = cli({"train", "--config", tiny_cfg(), "--out-dir", dir.string(), "--set", "pooling=sum", "--set",
                  "max_epochs=1", "--pooling", "max", "--no-chars", "--lr", "0.002", "--batch-size", "16"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    auto c = load_config(fs::path(field(r.out, "run_dir")) / "config.txt");
    CHECK(c.model.encoder.pooling == Pooling::max);
    CHECK_FALSE(c.model.encoder.use_chars);
    CHECK(c.train.learning_rate == 0.002);
    CHECK(c.train.batch_size == 16);
    CHECK(c.train.max_epochs == 1);
  }

  SUBCASE("the config may come from the environment") {
    ::setenv(kConfigEnv, tiny_cfg().c_str(), 1);
    auto r = cli({"train", "--out-dir", dir.string(), "--epochs", "1"});
    ::unsetenv(kConfigEnv);
    CHECK_MESSAGE(r.code == 0, r.err);
  }

  SUBCASE("mean pooling without chars gives 600-wide sentence vectors") {
    auto r = cli({"train", "--config", tiny_cfg(), "--out-dir", dir.string(), "--pooling", "mean", "--no-chars",
                  "--epochs", "1", "--set", "word_dim=300", "--set", "hidden=0", "--set", "embeddings=", "--set",
                  "mlp_widths=8"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(field(r.out, "representation_dim") == "600");
    CHECK(field(r.out, "matching_dim") == "2400");
  }

  SUBCASE("a missing embeddings file fails before any output") {
    auto r = cli({"train", "--config", tiny_cfg(), "--out-dir", dir.string(), "--set",
                  "embeddings=" + (dir / "glove.840B.300d.txt").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("glove.840B.300d.txt") != std::string::npos);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
    CHECK(fs::is_empty(dir));
  }

  SUBCASE("malformed corpus lines are data errors with a structured log") {
    const fs::path bad = dir / "bad.jsonl";
    std::ofstream(bad) << "{\"gold_label\": \"neutral\", \"sentence1\": \"a b\"\n";
    auto r = cli({"train", "--config", tiny_cfg(), "--out-dir", dir.string(), "--set", "train_file=" + bad.string()});
    CHECK(r.code == 2);
    const fs::path run = field(r.out, "run_dir");
    REQUIRE(fs::exists(run / "error.json"));
    auto j = nlohmann::json::parse(slurp(run / "error.json"));
    CHECK(j.at("kind") == "data");
    CHECK(j.at("exit_code") == 2);
  }

  SUBCASE("a diverging run exits with the numeric code") {
    auto r = cli({"train", "--config", tiny_cfg(), "--out-dir", dir.string(), "--lr", "1e30", "--epochs", "2"});
    CHECK(r.code == 3);
    CHECK(r.err.find("error:") == 0);
  }
}

TEST_CASE("eval, ensemble, predict and export") {
  const fs::path dir = scratch("eval");
  const fs::path ckpt = train_fixture(dir / "runs", 1);
  const std::string dev = (kData / "dev_matched.jsonl").string();

  SUBCASE("eval prints the genre table and writes a JSON copy") {
    auto a = cli({"eval", "--checkpoint", ckpt.string(), "--data", dev});
    REQUIRE_MESSAGE(a.code == 0, a.err);
    CHECK(a.out.find("MultiNLI Overall") != std::string::npos);
    CHECK(a.out.find("Fiction") < a.out.find("Travel"));
    auto b = cli({"eval", "--checkpoint", ckpt.string(), "--data", dev});
    CHECK(report_block(a.out) == report_block(b.out));
    auto j = nlohmann::json::parse(slurp(ckpt.parent_path() / "best.matched.json"));
    CHECK(j.at("total") == 45);
  }

  SUBCASE("a dataset labelled by the model itself scores 100") {
    auto model = load_checkpoint(ckpt).model;
    auto examples = load_dataset(dev, SplitRole::dev).examples;
    auto predictions = model.predict(examples);
    for (std::size_t i = 0; i < examples.size(); ++i) examples[i].label = static_cast<Label>(predictions[i].predicted);
    const fs::path relabelled = dir / "oracle.jsonl";
    nli::test::write_jsonl(examples, relabelled);
    auto r = cli({"eval", "--checkpoint", ckpt.string(), "--data", relabelled.string(), "--json",
                  (dir / "oracle.json").string()});
    REQUIRE(r.code == 0);
    CHECK(std::regex_search(r.out, std::regex("MultiNLI Overall +100\\.000 ")));
  }

  SUBCASE("the split picks the dev file from the config") {
    auto r = cli({"eval", "--checkpoint", ckpt.string(), "--config", tiny_cfg(), "--split", "mismatched"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("9/11") != std::string::npos);
    CHECK(fs::exists(ckpt.parent_path() / "best.mismatched.json"));
  }

  SUBCASE("vocabulary mismatch is a configuration error") {
    auto other = Vocabulary::build(nli::test::synthetic_nli({10, 3, 14}));
    other.save(dir / "other_vocab.txt");
    auto r = cli({"eval", "--checkpoint", ckpt.string(), "--data", dev, "--vocab", (dir / "other_vocab.txt").string(),
                  "--chars-vocab", (ckpt.parent_path() / "chars.txt").string()});
    CHECK(r.code == 1);
    auto same = cli({"eval", "--checkpoint", ckpt.string(), "--data", dev, "--vocab",
                     (ckpt.parent_path() / "vocab.txt").string(), "--chars-vocab",
                     (ckpt.parent_path() / "chars.txt").string()});
    CHECK(same.code == 0);
  }

  SUBCASE("a corrupted checkpoint is a data error") {
    std::string bytes = slurp(ckpt);
    bytes[bytes.size() - 5] ^= 0x40;
    std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
    CHECK(cli({"eval", "--checkpoint", (dir / "bad.ckpt").string(), "--data", dev}).code == 2);
  }

  SUBCASE("one-member ensemble equals eval") {
    auto e = cli({"eval", "--checkpoint", ckpt.string(), "--data", dev});
    auto s = cli({"ensemble", "--checkpoint", ckpt.string(), "--data", dev, "--json", (dir / "e.json").string()});
    REQUIRE_MESSAGE(s.code == 0, s.err);
    CHECK(report_block(s.out) == report_block(e.out));
  }

  SUBCASE("four seeds ensemble") {
    std::vector<std::string> args{"ensemble", "--data", dev};
    std::vector<double> members;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      auto c = train_fixture(dir / "seeds", seed, {"--epochs", "12"});
      args.insert(args.end(), {"--checkpoint", c.string()});
    }
    auto r = cli(args);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("ensemble of 4") != std::string::npos);
    std::regex member("member \\d accuracy=([0-9.]+)");
    for (auto it = std::sregex_iterator(r.out.begin(), r.out.end(), member); it != std::sregex_iterator(); ++it)
      members.push_back(std::stod((*it)[1]));
    REQUIRE(members.size() == 4);
    std::smatch m;
    REQUIRE(std::regex_search(r.out, m, std::regex("MultiNLI Overall\\s+([0-9.]+)")));
    CHECK(std::stod(m[1]) >= *std::min_element(members.begin(), members.end()));
  }

  SUBCASE("predict reads a pair from stdin") {
    auto r = cli({"predict", "--checkpoint", ckpt.string()}, "The dog runs outside .\nThe dog runs outside .\n");
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const double sum =
        std::stod(field(r.out, "entailment")) + std::stod(field(r.out, "neutral")) + std::stod(field(r.out, "contradiction"));
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(parse_label(field(r.out, "predicted")).has_value());
    CHECK(cli({"predict", "--checkpoint", ckpt.string()}, "only one line\n").code == 1);
  }

  SUBCASE("export rows match the representation width") {
    const fs::path tsv = dir / "vectors.tsv";
    auto r = cli({"export", "--checkpoint", ckpt.string(), "--data", dev, "--output", tsv.string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(field(r.out, "records") == "90");
    const std::size_t dim = load_checkpoint(ckpt).model.config().encoder.representation_dim();
    std::ifstream in(tsv);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      CHECK(static_cast<std::size_t>(std::count(line.begin(), line.end(), '\t')) == dim + 1);
      ++rows;
    }
    CHECK(rows == 90);
  }
}

TEST_CASE("sweep") {
  const fs::path dir = scratch("sweep");
  auto r = cli({"sweep", "--config", tiny_cfg(), "--out-dir", dir.string(), "--runs", "2", "--epochs", "1", "--jobs",
                "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(field(r.out, "cells") == "8");
  const fs::path run = field(r.out, "run_dir");
  std::ifstream records(run / "runs.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(records, line);) ++lines;
  CHECK(lines == 16);
  auto again = cli({"sweep", "--summarize", (run / "runs.jsonl").string()});
  REQUIRE(again.code == 0);
  CHECK(again.out == slurp(run / "tables.txt"));
  CHECK(cli({"sweep", "--config", tiny_cfg(), "--out-dir", dir.string(), "--runs", "1"}).code == 1);
}

TEST_CASE("gradcheck command") {
  auto ok = cli({"gradcheck", "--dims", "tiny"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("failed=0") != std::string::npos);
  auto bad = cli({"gradcheck", "--corrupt-op", "sigmoid", "--corrupt-factor", "1.01"});
  CHECK(bad.code == 3);
  CHECK(bad.err.find("sigmoid") != std::string::npos);
}
