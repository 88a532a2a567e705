#include "nli/cli.hpp"

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "nli/checkpoint.hpp"
#include "nli/error.hpp"
#include "nli/evaluation.hpp"
#include "nli/gradcheck.hpp"
#include "nli/sweep.hpp"

namespace nli {

namespace fs = std::filesystem;

// --- config values ----------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty())
    throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty())
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::vector<std::size_t> parse_widths(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  for (std::string part; std::getline(ss, part, ',');) out.push_back(parse_size(key, trim(part)));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list of widths");
  return out;
}

Pooling parse_pooling_value(const std::string& key, const std::string& value) {
  auto p = parse_pooling(value);
  if (!p) throw ConfigError(key + ": expected mean, sum, last or max, got '" + value + "'");
  return *p;
}

std::string number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const fs::path&)> set;
  std::function<std::string(const RunConfig&)> get;
};

Field path_field(fs::path RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v, const fs::path& base) {
            fs::path p(v);
            c.*member = (!base.empty() && !p.empty() && p.is_relative()) ? base / p : p;
          },
          [member](const RunConfig& c) { return (c.*member).generic_string(); }};
}

template <typename Get>
Field size_field(const std::string& key, Get get) {
  return {[key, get](RunConfig& c, const std::string& v, const fs::path&) { get(c) = parse_size(key, v); },
          [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field double_field(const std::string& key, Get get) {
  return {[key, get](RunConfig& c, const std::string& v, const fs::path&) { get(c) = parse_double(key, v); },
          [get](const RunConfig& c) { return number(get(const_cast<RunConfig&>(c))); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("train_file", path_field(&RunConfig::train_file));
    t.emplace_back("dev_matched_file", path_field(&RunConfig::dev_matched_file));
    t.emplace_back("dev_mismatched_file", path_field(&RunConfig::dev_mismatched_file));
    t.emplace_back("snli_file", path_field(&RunConfig::snli_file));
    t.emplace_back("snli_fraction", double_field("snli_fraction", [](RunConfig& c) -> double& { return c.snli_fraction; }));
    t.emplace_back("embeddings", path_field(&RunConfig::embeddings));
    t.emplace_back("out_dir", path_field(&RunConfig::out_dir));
    t.emplace_back("train_limit", size_field("train_limit", [](RunConfig& c) -> std::size_t& { return c.train_limit; }));
    t.emplace_back("dev_limit", size_field("dev_limit", [](RunConfig& c) -> std::size_t& { return c.dev_limit; }));
    t.emplace_back("learning_rate",
                   double_field("learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; }));
    t.emplace_back("rho", double_field("rho", [](RunConfig& c) -> double& { return c.train.rho; }));
    t.emplace_back("epsilon", double_field("epsilon", [](RunConfig& c) -> double& { return c.train.epsilon; }));
    t.emplace_back("batch_size", size_field("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    t.emplace_back("max_epochs", size_field("max_epochs", [](RunConfig& c) -> std::size_t& { return c.train.max_epochs; }));
    t.emplace_back("max_premise_len",
                   size_field("max_premise_len", [](RunConfig& c) -> std::size_t& { return c.train.max_premise_len; }));
    t.emplace_back("seed", Field{[](RunConfig& c, const std::string& v, const fs::path&) {
                                   c.train.seed = parse_size("seed", v);
                                 },
                                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    t.emplace_back("word_dim", size_field("word_dim", [](RunConfig& c) -> std::size_t& { return c.model.encoder.word_dim; }));
    t.emplace_back("char_dim", size_field("char_dim", [](RunConfig& c) -> std::size_t& { return c.model.encoder.char_dim; }));
    t.emplace_back("char_hidden",
                   size_field("char_hidden", [](RunConfig& c) -> std::size_t& { return c.model.encoder.char_hidden; }));
    t.emplace_back("hidden", size_field("hidden", [](RunConfig& c) -> std::size_t& { return c.model.encoder.hidden; }));
    t.emplace_back("pooling", Field{[](RunConfig& c, const std::string& v, const fs::path&) {
                                      c.model.encoder.pooling = parse_pooling_value("pooling", v);
                                    },
                                    [](const RunConfig& c) { return std::string(pooling_name(c.model.encoder.pooling)); }});
    t.emplace_back("chars", Field{[](RunConfig& c, const std::string& v, const fs::path&) {
                                    c.model.encoder.use_chars = parse_bool("chars", v);
                                  },
                                  [](const RunConfig& c) { return std::string(c.model.encoder.use_chars ? "true" : "false"); }});
    t.emplace_back("mlp_widths", Field{[](RunConfig& c, const std::string& v, const fs::path&) {
                                         c.model.mlp_widths = parse_widths("mlp_widths", v);
                                       },
                                       [](const RunConfig& c) {
                                         std::string s;
                                         for (auto w : c.model.mlp_widths) s += (s.empty() ? "" : ",") + std::to_string(w);
                                         return s;
                                       }});
    t.emplace_back("dropout", double_field("dropout", [](RunConfig& c) -> double& { return c.model.dropout; }));
    t.emplace_back("runs_per_cell",
                   size_field("runs_per_cell", [](RunConfig& c) -> std::size_t& { return c.runs_per_cell; }));
    t.emplace_back("jobs", size_field("jobs", [](RunConfig& c) -> std::size_t& { return c.jobs; }));
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void apply_config_value(RunConfig& config, const std::string& key, const std::string& value,
                        const fs::path& base_dir) {
  for (const auto& [name, field] : fields())
    if (name == key) return field.set(config, value, base_dir);
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(std::istream& in, const std::string& source, const fs::path& base_dir) {
  RunConfig config;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(n) + ": expected 'key = value'");
    try {
      apply_config_value(config, trim(body.substr(0, eq)), trim(body.substr(eq + 1)), base_dir);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return config;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  return parse_config(in, path.string(), path.parent_path());
}

std::string format_config(const RunConfig& config) {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + " = " + field.get(config) + "\n";
  return out;
}

namespace {

void require_file(const fs::path& path, const std::string& key) {
  if (path.empty()) throw ConfigError(key + " is not set");
  if (!fs::is_regular_file(path)) throw ConfigError(key + ": no such file: " + path.string());
}

void optional_file(const fs::path& path, const std::string& key) {
  if (!path.empty()) require_file(path, key);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void validate_config(const RunConfig& config, const std::string& command) {
  const auto& t = config.train;
  const auto& m = config.model;
  require(t.learning_rate > 0, "learning_rate must be positive");
  require(t.rho >= 0 && t.rho < 1, "rho must be in [0, 1)");
  require(t.epsilon > 0, "epsilon must be positive");
  require(t.batch_size > 0, "batch_size must be positive");
  require(t.max_epochs > 0, "max_epochs must be positive");
  require(m.encoder.word_dim > 0, "word_dim must be positive");
  require(!m.encoder.use_chars || (m.encoder.char_dim > 0 && m.encoder.char_hidden > 0),
          "char_dim and char_hidden must be positive when chars are used");
  require(!m.mlp_widths.empty(), "mlp_widths must list at least one layer");
  for (auto w : m.mlp_widths) require(w > 0, "mlp_widths entries must be positive");
  require(m.dropout >= 0 && m.dropout < 1, "dropout must be in [0, 1)");
  require(config.snli_fraction >= 0 && config.snli_fraction <= 1, "snli_fraction must be in [0, 1]");
  require(config.jobs > 0, "jobs must be positive");
  if (command == "sweep") require(config.runs_per_cell >= 2, "runs_per_cell must be at least 2");
  if (command == "train" || command == "sweep") {
    require_file(config.train_file, "train_file");
    require_file(config.dev_matched_file, "dev_matched_file");
    optional_file(config.dev_mismatched_file, "dev_mismatched_file");
    optional_file(config.embeddings, "embeddings");
    if (config.snli_fraction > 0) optional_file(config.snli_file, "snli_file");
  }
}

int exit_code_for(const std::exception& error) {
  if (dynamic_cast<const NumericError*>(&error)) return kExitNumeric;
  if (dynamic_cast<const DataError*>(&error) || dynamic_cast<const IoError*>(&error) ||
      dynamic_cast<const IntegrityError*>(&error) || dynamic_cast<const InvalidInputError*>(&error))
    return kExitData;
  return kExitUsage;
}

// --- commands ---------------------------------------------------------------

namespace {

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const DataError*>(&e)) return "data";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const IntegrityError*>(&e)) return "integrity";
  if (dynamic_cast<const InvalidInputError*>(&e)) return "invalid_input";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  return "internal";
}

struct Context {
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
  std::string command;
  fs::path run_dir;  // set once a command has created one
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path make_run_dir(Context& ctx, const RunConfig& config, const std::string& tag) {
  const std::string stem = timestamp() + "-" + tag;
  fs::create_directories(config.out_dir);
  fs::path dir = config.out_dir / stem;
  for (int k = 1; !fs::create_directory(dir); ++k) dir = config.out_dir / (stem + "-" + std::to_string(k));
  std::ofstream(dir / "config.txt") << format_config(config);
  ctx.run_dir = dir;
  ctx.out << "run_dir=" << dir.generic_string() << '\n';
  return dir;
}

void write_error_log(const Context& ctx, const std::exception& e) {
  if (ctx.run_dir.empty()) return;
  nlohmann::json j{{"command", ctx.command}, {"kind", error_kind(e)}, {"message", e.what()},
                   {"exit_code", exit_code_for(e)}, {"time", timestamp()}};
  std::ofstream(ctx.run_dir / "error.json") << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw IoError("failed writing " + path.string());
}

std::vector<NLIExample> load_split(const fs::path& path, SplitRole role, std::size_t limit, std::ostream& out,
                                   const std::string& name) {
  auto loaded = load_dataset(path, role);
  if (limit && loaded.examples.size() > limit) loaded.examples.resize(limit);
  out << name << ": kept=" << loaded.stats.kept << " dropped_label=" << loaded.stats.dropped_label
      << " skipped_empty=" << loaded.stats.skipped_empty << " used=" << loaded.examples.size() << '\n';
  if (loaded.examples.empty()) throw DataError(path.string() + ": no usable examples");
  return std::move(loaded.examples);
}

struct Corpus {
  std::vector<NLIExample> train;
  std::vector<NLIExample> dev_matched;
  std::vector<NLIExample> dev_mismatched;
  std::shared_ptr<const Vocabulary> vocab;
  std::shared_ptr<const CharVocabulary> chars;
  Parameter<float> embeddings;
};

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kEmbeddingStream = 11;
constexpr std::uint64_t kInitStream = 12;
constexpr std::uint64_t kSnliStream = 13;

Corpus prepare_corpus(const RunConfig& config, std::ostream& out) {
  Corpus c;
  c.train = load_split(config.train_file, SplitRole::train, config.train_limit, out, "train");
  if (config.snli_fraction > 0 && !config.snli_file.empty()) {
    auto snli = load_split(config.snli_file, SplitRole::train, 0, out, "snli");
    auto rng = stream(config.train.seed, kSnliStream);
    c.train = mix_snli(c.train, snli, config.snli_fraction, rng);
    out << "train+snli: " << c.train.size() << '\n';
  }
  c.dev_matched = load_split(config.dev_matched_file, SplitRole::dev, config.dev_limit, out, "dev_matched");
  if (!config.dev_mismatched_file.empty())
    c.dev_mismatched = load_split(config.dev_mismatched_file, SplitRole::dev, config.dev_limit, out, "dev_mismatched");

  c.vocab = std::make_shared<const Vocabulary>(Vocabulary::build(c.train));
  c.chars = std::make_shared<const CharVocabulary>(CharVocabulary::build(c.train));
  auto rng = stream(config.train.seed, kEmbeddingStream);
  const std::size_t dim = config.model.encoder.word_dim;
  EmbeddingLoad emb = config.embeddings.empty() ? random_embeddings(*c.vocab, dim, rng)
                                                : load_embeddings(config.embeddings, *c.vocab, dim, rng);
  out << "vocab=" << c.vocab->size() << " chars=" << c.chars->size() << " embeddings_from_file=" << emb.from_file
      << " random_rows=" << emb.random_rows << '\n';
  c.embeddings = std::move(emb.matrix);
  return c;
}

Model build_model(const ModelConfig& config, const Corpus& corpus, std::uint64_t seed) {
  auto rng = stream(seed, kInitStream);
  return Model::create(config, corpus.vocab, corpus.chars, corpus.embeddings, rng);
}

std::string split_tag(const std::string& split) { return split == "mismatched" ? "mismatched" : "matched"; }

int cmd_train(Context& ctx, const RunConfig& config) {
  validate_config(config, "train");
  const fs::path dir = make_run_dir(ctx, config, "train");
  ctx.out << "seed=" << config.train.seed << '\n';
  Corpus corpus = prepare_corpus(config, ctx.out);
  corpus.vocab->save(dir / "vocab.txt");
  corpus.chars->save(dir / "chars.txt");

  Model model = build_model(config.model, corpus, config.train.seed);
  ctx.out << "representation_dim=" << config.model.encoder.representation_dim()
          << " matching_dim=" << config.model.matching_dim() << '\n';
  std::ofstream log(dir / "epochs.log");
  TrainHooks hooks;
  hooks.log = &log;
  const fs::path checkpoint = dir / "best.ckpt";
  hooks.on_epoch = [&](const EpochRecord& r, const Model& m) {
    ctx.out << format_epoch(r) << '\n' << std::flush;
    if (r.improved) save_checkpoint(m, {r.epoch, r.dev_accuracy, config.train.seed}, checkpoint);
    return true;
  };
  TrainResult result = train(std::move(model), config.train, corpus.train, corpus.dev_matched, hooks);
  if (result.best_epoch == 0) throw NumericError("training halted before any epoch finished: " + result.halt_reason);

  ctx.out << "best_epoch=" << result.best_epoch << " best_dev_accuracy=" << result.best_dev_accuracy
          << " checkpoint=" << checkpoint.generic_string() << '\n';
  auto matched = evaluate(result.best, corpus.dev_matched, "matched");
  ctx.out << format_report(matched);
  write_text(dir / "eval-matched.json", report_json(matched));
  if (!corpus.dev_mismatched.empty()) {
    auto mismatched = evaluate(result.best, corpus.dev_mismatched, "mismatched");
    ctx.out << format_report(mismatched);
    write_text(dir / "eval-mismatched.json", report_json(mismatched));
  }
  if (result.halted) throw NumericError("training halted: " + result.halt_reason);
  return kExitOk;
}

struct EvalInputs {
  std::vector<std::string> checkpoints;
  std::string data;
  std::string split = "matched";
  std::string json;
  std::string vocab;
  std::string chars;
};

fs::path dataset_for(const EvalInputs& in, const std::optional<RunConfig>& config) {
  if (!in.data.empty()) return in.data;
  if (config) {
    const auto& p = in.split == "mismatched" ? config->dev_mismatched_file : config->dev_matched_file;
    if (!p.empty()) return p;
  }
  throw UsageError("no dataset: pass --data or a config with dev_" + in.split + "_file");
}

void check_inputs(const EvalInputs& in, const fs::path& data) {
  for (const auto& c : in.checkpoints) require_file(c, "checkpoint");
  require_file(data, "data");
  optional_file(in.vocab, "vocab");
  optional_file(in.chars, "chars-vocab");
  if (in.vocab.empty() != in.chars.empty()) throw UsageError("--vocab and --chars-vocab go together");
}

LoadedCheckpoint open_checkpoint(const EvalInputs& in, const std::string& path) {
  if (in.vocab.empty()) return load_checkpoint(path);
  return load_checkpoint(path, Vocabulary::load(in.vocab), CharVocabulary::load(in.chars));
}

fs::path json_path(const EvalInputs& in, const std::string& tag) {
  if (!in.json.empty()) return in.json;
  fs::path p(in.checkpoints.front());
  return p.parent_path() / (p.stem().string() + "." + tag + ".json");
}

int cmd_eval(Context& ctx, const EvalInputs& in, const std::optional<RunConfig>& config) {
  const fs::path data = dataset_for(in, config);
  check_inputs(in, data);
  auto loaded = open_checkpoint(in, in.checkpoints.front());
  ctx.out << "checkpoint=" << in.checkpoints.front() << " epoch=" << loaded.meta.epoch << " seed=" << loaded.meta.seed
          << '\n';
  auto examples = load_split(data, SplitRole::dev, 0, ctx.out, in.split);
  auto report = evaluate(loaded.model, examples, in.split);
  ctx.out << format_report(report);
  write_text(json_path(in, split_tag(in.split)), report_json(report));
  return kExitOk;
}

int cmd_ensemble(Context& ctx, const EvalInputs& in, const std::optional<RunConfig>& config) {
  const fs::path data = dataset_for(in, config);
  check_inputs(in, data);
  std::vector<std::shared_ptr<const Model>> members;
  for (const auto& path : in.checkpoints) {
    auto loaded = open_checkpoint(in, path);
    ctx.out << "member=" << path << " epoch=" << loaded.meta.epoch << " seed=" << loaded.meta.seed << '\n';
    members.push_back(std::make_shared<const Model>(std::move(loaded.model)));
  }
  Ensemble ensemble(members);
  auto examples = load_split(data, SplitRole::dev, 0, ctx.out, in.split);
  for (std::size_t k = 0; k < members.size(); ++k) {
    auto member = evaluate(*members[k], examples, in.split);
    char line[96];
    std::snprintf(line, sizeof line, "member %zu accuracy=%.3f\n", k, 100.0 * member.accuracy());
    ctx.out << line;
  }
  auto report = evaluate(ensemble, examples, in.split);
  ctx.out << "ensemble of " << members.size() << '\n' << format_report(report);
  write_text(json_path(in, "ensemble." + split_tag(in.split)), report_json(report));
  return kExitOk;
}

int cmd_predict(Context& ctx, const EvalInputs& in) {
  require_file(in.checkpoints.front(), "checkpoint");
  auto loaded = open_checkpoint(in, in.checkpoints.front());
  std::string premise, hypothesis;
  if (!std::getline(ctx.in, premise) || !std::getline(ctx.in, hypothesis))
    throw UsageError("predict reads two lines from standard input: premise, then hypothesis");
  NLIExample e;
  e.pair_id = "stdin";
  e.premise = tokenize(premise);
  e.hypothesis = tokenize(hypothesis);
  if (e.premise.empty() || e.hypothesis.empty()) throw InvalidInputError("premise and hypothesis must not be empty");
  const auto d = loaded.model.predict(std::vector<NLIExample>{e}).front();
  char line[160];
  std::snprintf(line, sizeof line, "entailment=%.6f neutral=%.6f contradiction=%.6f predicted=%s\n", d.probs[0],
                d.probs[1], d.probs[2], std::string(label_name(static_cast<Label>(d.predicted))).c_str());
  ctx.out << line;
  return kExitOk;
}

int cmd_export(Context& ctx, const EvalInputs& in, const std::string& output,
               const std::optional<RunConfig>& config) {
  const fs::path data = dataset_for(in, config);
  check_inputs(in, data);
  if (output.empty()) throw UsageError("export needs --output");
  auto loaded = open_checkpoint(in, in.checkpoints.front());
  auto examples = load_split(data, SplitRole::dev, 0, ctx.out, in.split);
  const std::size_t rows = export_representations(loaded.model, examples, output);
  ctx.out << "records=" << rows << " dim=" << loaded.model.config().encoder.representation_dim()
          << " output=" << output << '\n';
  return kExitOk;
}

int cmd_sweep(Context& ctx, const RunConfig& config, const std::string& summarize_file) {
  if (!summarize_file.empty()) {
    std::ifstream in(summarize_file);
    if (!in) throw ConfigError("no such file: " + summarize_file);
    auto summary = summarize(parse_run_records(in));
    ctx.out << format_mean_table(summary) << '\n' << format_best_table(summary);
    return kExitOk;
  }
  validate_config(config, "sweep");
  const fs::path dir = make_run_dir(ctx, config, "sweep");
  ctx.out << "seed=" << config.train.seed << '\n';
  const auto grid = sweep_grid();
  ctx.out << "cells=" << grid.size() << " runs_per_cell=" << config.runs_per_cell << " jobs=" << config.jobs << '\n';
  for (const auto& cell : grid)
    ctx.out << "cell " << pooling_name(cell.pooling) << (cell.use_chars ? " chars" : " no-chars") << '\n';

  const Corpus corpus = prepare_corpus(config, ctx.out);
  fs::create_directories(dir / "runs");
  std::mutex out_mutex;
  RunFn run = [&](const SweepCell& cell, std::uint64_t seed) {
    ModelConfig mc = config.model;
    mc.encoder.pooling = cell.pooling;
    mc.encoder.use_chars = cell.use_chars;
    TrainConfig tc = config.train;
    tc.seed = seed;
    const std::string name =
        std::string(pooling_name(cell.pooling)) + (cell.use_chars ? "-chars-" : "-nochars-") + std::to_string(seed);
    std::ofstream log(dir / "runs" / (name + ".log"));
    TrainHooks hooks;
    hooks.log = &log;
    auto result = train(build_model(mc, corpus, seed), tc, corpus.train, corpus.dev_matched, hooks);
    if (result.best_epoch == 0) throw NumericError(name + ": " + result.halt_reason);
    std::lock_guard lock(out_mutex);
    ctx.out << "run " << name << " best_dev_accuracy=" << result.best_dev_accuracy
            << " best_epoch=" << result.best_epoch << '\n'
            << std::flush;
    return RunRecord{cell.pooling, cell.use_chars, seed, result.best_dev_accuracy, result.best_epoch};
  };
  std::ofstream sink(dir / "runs.jsonl");
  SweepOptions options{config.runs_per_cell, config.train.seed, config.jobs};
  auto summary = summarize(pooling_sweep(options, run, &sink));
  const std::string tables = format_mean_table(summary) + "\n" + format_best_table(summary);
  write_text(dir / "tables.txt", tables);
  ctx.out << tables;
  return kExitOk;
}

int cmd_gradcheck(Context& ctx, const std::string& corrupt_op, double corrupt_factor) {
  GradcheckOptions options;
  options.corrupt_op = corrupt_op;
  options.corrupt_factor = corrupt_op.empty() ? 1.0 : corrupt_factor;
  ctx.out << "seed=" << options.seed << '\n';
  auto report = run_gradcheck(options);
  ctx.out << format_gradcheck(report);
  if (!report.passed()) {
    std::string list;
    for (const auto& f : report.failures()) list += (list.empty() ? "" : ", ") + f;
    throw NumericError("gradient check failed for: " + list);
  }
  return kExitOk;
}

// Flags shared by the commands that train.
struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::string pooling;
  bool chars = true;
  std::uint64_t seed = 0;
  std::size_t batch_size = 0;
  std::size_t epochs = 0;
  double lr = 0;
  std::size_t jobs = 0;
  std::string out_dir;
  std::map<std::string, CLI::Option*> given;

  void add_config_options(CLI::App* app) {
    app->add_option("--config", config, std::string("key = value config file (default: $") + kConfigEnv + ")");
    app->add_option("--set", sets, "override one config key, key=value (repeatable)")->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  }

  void add(CLI::App* app) {
    add_config_options(app);
    given["pooling"] = app->add_option("--pooling", pooling, "mean, sum, last or max");
    given["chars"] = app->add_flag("--chars,!--no-chars", chars, "use the char-level word encoder");
    given["seed"] = app->add_option("--seed", seed, "random seed");
    given["batch_size"] = app->add_option("--batch-size", batch_size, "minibatch size");
    given["max_epochs"] = app->add_option("--epochs", epochs, "maximum epochs");
    given["learning_rate"] = app->add_option("--lr", lr, "RMSProp learning rate");
    given["jobs"] = app->add_option("--jobs", jobs, "parallel sweep runs");
    given["out_dir"] = app->add_option("--out-dir", out_dir, "parent of the run directory");
  }

  bool set(const std::string& key) const {
    auto it = given.find(key);
    return it != given.end() && it->second->count() > 0;
  }

  std::optional<RunConfig> file_config() const {
    if (!config.empty()) return load_config(config);
    if (const char* env = std::getenv(kConfigEnv); env && *env) return load_config(env);
    return std::nullopt;
  }

  RunConfig resolve() const {
    RunConfig c = file_config().value_or(RunConfig{});
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      apply_config_value(c, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    if (set("pooling")) c.model.encoder.pooling = parse_pooling_value("--pooling", pooling);
    if (set("chars")) c.model.encoder.use_chars = chars;
    if (set("seed")) c.train.seed = seed;
    if (set("batch_size")) c.train.batch_size = batch_size;
    if (set("max_epochs")) c.train.max_epochs = epochs;
    if (set("learning_rate")) c.train.learning_rate = lr;
    if (set("jobs")) c.jobs = jobs;
    if (set("out_dir")) c.out_dir = out_dir;
    return c;
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Inner-attention sentence encoders for natural language inference", "nli"};
  app.require_subcommand(1);

  ConfigFlags train_flags, sweep_flags, eval_flags;
  EvalInputs eval_in;
  std::string output, summarize_file, dims = "tiny", corrupt_op;
  double corrupt_factor = 1.01;
  std::size_t runs = 0;

  auto* train = app.add_subcommand("train", "train one model and keep the best dev checkpoint");
  train_flags.add(train);

  auto add_eval = [&](CLI::App* sub, bool many) {
    if (many)
      sub->add_option("--checkpoint", eval_in.checkpoints, "checkpoint file (repeatable)")->required()
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)->expected(1);
    else
      sub->add_option("--checkpoint", eval_in.checkpoints, "checkpoint file")->required()->expected(1);
    sub->add_option("--vocab", eval_in.vocab, "require this word vocabulary");
    sub->add_option("--chars-vocab", eval_in.chars, "require this char vocabulary");
  };
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", eval_in.data, "JSONL dataset (default: the config's dev file for --split)");
    sub->add_option("--split", eval_in.split, "matched or mismatched")->check(CLI::IsMember({"matched", "mismatched"}));
    eval_flags.add_config_options(sub);
  };

  auto* eval = app.add_subcommand("eval", "accuracy overall and per genre");
  add_eval(eval, false);
  add_data(eval);
  eval->add_option("--json", eval_in.json, "machine-readable report (default: next to the checkpoint)");

  auto* ensemble = app.add_subcommand("ensemble", "average the distributions of several checkpoints");
  add_eval(ensemble, true);
  add_data(ensemble);
  ensemble->add_option("--json", eval_in.json, "machine-readable report (default: next to the first checkpoint)");

  auto* predict = app.add_subcommand("predict", "classify one pair read from standard input");
  add_eval(predict, false);

  auto* exporter = app.add_subcommand("export", "write refined sentence vectors as TSV");
  add_eval(exporter, false);
  add_data(exporter);
  exporter->add_option("--output", output, "TSV file")->required();

  auto* sweep = app.add_subcommand("sweep", "train every pooling method with and without chars over several seeds");
  sweep_flags.add(sweep);
  auto* runs_opt = sweep->add_option("--runs", runs, "runs per cell");
  sweep->add_option("--summarize", summarize_file, "only print the tables for stored run records");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
  gradcheck->add_option("--dims", dims, "model size")->check(CLI::IsMember({"tiny"}));
  gradcheck->add_option("--corrupt-op", corrupt_op, "scale one op's backward rule (fault injection)");
  gradcheck->add_option("--corrupt-factor", corrupt_factor, "scale used with --corrupt-op");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  Context ctx{in, out, err, app.get_subcommands().front()->get_name(), {}};
  try {
    if (train->parsed()) return cmd_train(ctx, train_flags.resolve());
    if (sweep->parsed()) {
      if (!summarize_file.empty()) return cmd_sweep(ctx, RunConfig{}, summarize_file);
      RunConfig c = sweep_flags.resolve();
      if (runs_opt->count()) c.runs_per_cell = runs;
      return cmd_sweep(ctx, c, {});
    }
    if (gradcheck->parsed()) return cmd_gradcheck(ctx, corrupt_op, corrupt_factor);
    if (predict->parsed()) return cmd_predict(ctx, eval_in);
    const auto file_config = eval_flags.file_config();
    if (eval->parsed()) return cmd_eval(ctx, eval_in, file_config);
    if (ensemble->parsed()) return cmd_ensemble(ctx, eval_in, file_config);
    if (exporter->parsed()) return cmd_export(ctx, eval_in, output, file_config);
    throw UsageError("no command given");
  } catch (const std::exception& e) {
    write_error_log(ctx, e);
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

}  // namespace nli
