#include "xldg/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

namespace xldg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    std::string item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string show(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string show(std::size_t v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(const std::string& v) { return v; }
template <class T>
std::string show(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + show(v[i]);
  return out;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw std::invalid_argument("invalid value '" + std::string(value) + "' for " + std::string(key) +
                              " (expected " + expected + ")");
}

void parse_into(std::string_view key, std::string_view text, std::size_t& out) {
  const std::string s = trim(text);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_value(key, text, "a non-negative integer");
}
void parse_into(std::string_view key, std::string_view text, double& out) {
  const std::string s = trim(text);
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) bad_value(key, text, "a number");
}
void parse_into(std::string_view key, std::string_view text, bool& out) {
  const std::string s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
  } else if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
  } else {
    bad_value(key, text, "true or false");
  }
}
void parse_into(std::string_view, std::string_view text, std::string& out) { out = trim(text); }
template <class T>
void parse_into(std::string_view key, std::string_view text, std::vector<T>& out) {
  std::vector<T> items;
  for (const auto& item : split_list(text)) {
    T v{};
    parse_into(key, item, v);
    items.push_back(std::move(v));
  }
  out = std::move(items);
}

struct KeyDef {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class F>
KeyDef key(std::string name, std::string help, F field) {
  KeyDef k;
  k.name = name;
  k.help = std::move(help);
  k.set = [name, field](RunConfig& c, std::string_view v) { parse_into(name, v, field(c)); };
  k.get = [field](const RunConfig& c) { return show(field(const_cast<RunConfig&>(c))); };
  return k;
}

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> d;
    d.push_back(key("data", "corpus directory", [](RunConfig& c) -> auto& { return c.data; }));
    d.push_back(key("langs", "number of toy languages", [](RunConfig& c) -> auto& { return c.langs; }));
    d.push_back(key("concepts", "number of interlingua concepts", [](RunConfig& c) -> auto& { return c.concepts; }));
    d.push_back(key("preset", "split sizes: rich (2000/200/200) or low (256/200/200)",
                    [](RunConfig& c) -> auto& { return c.preset; }));
    d.push_back(key("corpus-seed", "corpus generation seed", [](RunConfig& c) -> auto& { return c.corpus_seed; }));
    d.push_back(key("d-model", "model width", [](RunConfig& c) -> auto& { return c.model.d_model; }));
    d.push_back(key("heads", "attention heads", [](RunConfig& c) -> auto& { return c.model.n_heads; }));
    d.push_back(key("enc-layers", "encoder layers", [](RunConfig& c) -> auto& { return c.model.n_enc_layers; }));
    d.push_back(key("dec-layers", "decoder layers", [](RunConfig& c) -> auto& { return c.model.n_dec_layers; }));
    d.push_back(key("ffn-dim", "feed-forward width", [](RunConfig& c) -> auto& { return c.model.ffn_dim; }));
    d.push_back(key("max-len", "longest assembled sequence", [](RunConfig& c) -> auto& { return c.model.max_len; }));
    d.push_back(key("task-tokens", "soft task-prompt tokens", [](RunConfig& c) -> auto& { return c.model.n_task_tokens; }));
    d.push_back(key("dropout", "dropout rate during training", [](RunConfig& c) -> auto& { return c.model.dropout; }));
    d.push_back(key("mode", "direct | prompt-combo | contrastive | pipeline-mono",
                    [](RunConfig& c) -> auto& { return c.mode; }));
    d.push_back(key("tuning", "full | prompt-only", [](RunConfig& c) -> auto& { return c.tuning; }));
    d.push_back(key("lr", "learning rate (0: 3e-4 full, 1e-2 prompt-only)", [](RunConfig& c) -> auto& { return c.lr; }));
    d.push_back(key("epochs", "training epochs", [](RunConfig& c) -> auto& { return c.epochs; }));
    d.push_back(key("batch-size", "examples per batch", [](RunConfig& c) -> auto& { return c.batch_size; }));
    d.push_back(key("lambda", "weight of the contrastive term", [](RunConfig& c) -> auto& { return c.lambda; }));
    d.push_back(key("tau", "contrastive temperature", [](RunConfig& c) -> auto& { return c.tau; }));
    d.push_back(key("sigma", "contrastive margin", [](RunConfig& c) -> auto& { return c.sigma; }));
    d.push_back(key("pooling", "attention | mean | max", [](RunConfig& c) -> auto& { return c.pooling; }));
    d.push_back(key("symmetrize-negatives", "also anchor negatives at the second group",
                    [](RunConfig& c) -> auto& { return c.symmetrize_negatives; }));
    d.push_back(key("seed", "training seed", [](RunConfig& c) -> auto& { return c.seed; }));
    d.push_back(key("seeds", "comma-separated seed list", [](RunConfig& c) -> auto& { return c.seeds; }));
    d.push_back(key("pretrain-steps", "translation pretraining steps (0 disables)",
                    [](RunConfig& c) -> auto& { return c.pretrain_steps; }));
    d.push_back(key("pretrain-lr", "translation pretraining learning rate",
                    [](RunConfig& c) -> auto& { return c.pretrain_lr; }));
    d.push_back(key("init", "checkpoint stem to start from ({seed} expands to the seed)",
                    [](RunConfig& c) -> auto& { return c.init; }));
    d.push_back(key("val-examples", "validation examples per language (0: all)",
                    [](RunConfig& c) -> auto& { return c.val_examples; }));
    d.push_back(key("max-new-tokens", "generation length cap", [](RunConfig& c) -> auto& { return c.max_new_tokens; }));
    d.push_back(key("pairs", "all | cross | mono | list like aa-bb,bb-aa", [](RunConfig& c) -> auto& { return c.pairs; }));
    d.push_back(key("limit", "test examples per pair (0: all)", [](RunConfig& c) -> auto& { return c.limit; }));
    d.push_back(key("ignore-threshold", "context Jaccard threshold for ignore-task",
                    [](RunConfig& c) -> auto& { return c.ignore_threshold; }));
    d.push_back(key("baseline", "mode that relative changes refer to", [](RunConfig& c) -> auto& { return c.baseline; }));
    d.push_back(key("poolings", "pooling functions of the ablation grid", [](RunConfig& c) -> auto& { return c.poolings; }));
    d.push_back(key("lambdas", "lambda values of the ablation grid", [](RunConfig& c) -> auto& { return c.lambdas; }));
    d.push_back(key("endpoints", "add lambda 0 and 1 rows to the ablation grid",
                    [](RunConfig& c) -> auto& { return c.endpoints; }));
    return d;
  }();
  return defs;
}

const KeyDef& find_key(std::string_view name) {
  for (const auto& k : key_defs()) {
    if (k.name == name) return k;
  }
  throw std::invalid_argument("unknown config key '" + std::string(name) + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (s.empty() || r.ec != std::errc()) throw std::invalid_argument("bad corpus hash '" + s + "'");
  return v;
}

/// Creates `dir`, refusing to touch a non-empty one unless `force` is set,
/// in which case its contents are replaced.
void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir))) {
    if (!force) throw std::runtime_error("refusing to overwrite " + dir.string() + " (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

// ---------------------------------------------------------------------------
// Command scaffolding

const std::vector<std::string> kModelKeys{"d-model", "heads", "enc-layers", "dec-layers",
                                          "ffn-dim", "max-len", "task-tokens", "dropout"};

std::vector<std::string> concat(std::initializer_list<std::vector<std::string>> parts) {
  std::vector<std::string> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

struct Command {
  CLI::App* app = nullptr;
  std::vector<std::string> keys;
  std::map<std::string, std::string> raw;
  std::map<std::string, CLI::Option*> options;
  std::string config_file;
  std::string out;
  bool force = false;

  Command(CLI::App& parent, const std::string& name, const std::string& description,
          std::vector<std::string> config_keys, const std::map<std::string, std::string>& aliases = {})
      : keys(std::move(config_keys)) {
    app = parent.add_subcommand(name, description);
    for (const auto& k : keys) {
      const auto& def = find_key(k);
      std::string flag = "--" + k;
      if (auto it = aliases.find(k); it != aliases.end()) flag = it->second + "," + flag;
      options[k] = app->add_option(flag, raw[k], def.help)
                       ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
    app->add_option("--config", config_file, "flat key=value file applied before flags");
  }

  void add_output(const std::string& default_out, const std::string& help) {
    out = default_out;
    app->add_option("-o,--out", out, help);
    app->add_flag("--force", force, "replace existing output");
  }

  bool given(const std::string& k) const {
    auto it = options.find(k);
    return it != options.end() && it->second->count() > 0;
  }

  /// Defaults < config file < flags.
  RunConfig resolve(RunConfig base = {}) const {
    if (!config_file.empty()) apply_flat(base, read_file(input_path(config_file)));
    for (const auto& k : keys) {
      if (given(k)) base.set(k, raw.at(k));
    }
    return base;
  }
};

void print_rule(std::ostream& os, std::size_t width) { os << std::string(width, '-') << "\n"; }

std::string fixed(double v, int digits = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------
// gen-data

struct LangStats {
  std::size_t train = 0, valid = 0, test = 0;
  std::size_t words = 0, polysemous = 0;
  double ctx_len = 0.0, def_len = 0.0;
};

LangStats language_stats(const toy::ToyCorpus& corpus, toy::LangId lang) {
  LangStats s;
  const auto& sp = corpus.splits[lang];
  s.train = sp.train.size();
  s.valid = sp.valid.size();
  s.test = corpus.config.test_is_valid ? 0 : sp.test.size();
  std::map<std::vector<toy::TokenId>, std::set<std::vector<toy::TokenId>>> defs;
  std::size_t n = 0;
  auto visit = [&](const std::vector<toy::Example>& exs) {
    for (const auto& ex : exs) {
      defs[ex.word].insert(ex.definition);
      s.ctx_len += static_cast<double>(ex.context.size());
      s.def_len += static_cast<double>(ex.definition.size());
      ++n;
    }
  };
  visit(sp.train);
  visit(sp.valid);
  if (!corpus.config.test_is_valid) visit(sp.test);
  s.words = defs.size();
  for (const auto& [w, d] : defs) s.polysemous += d.size() > 1;
  if (n) {
    s.ctx_len /= static_cast<double>(n);
    s.def_len /= static_cast<double>(n);
  }
  return s;
}

void print_corpus_stats(std::ostream& os, const toy::ToyCorpus& corpus) {
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %7s %7s %7s %7s %7s %9s %8s %8s\n", "lang", "train", "valid", "test",
                "vocab", "words", "polysemy", "ctx len", "def len");
  os << line;
  print_rule(os, 76);
  LangStats total;
  for (toy::LangId l = 0; l < corpus.splits.size(); ++l) {
    const auto s = language_stats(corpus, l);
    std::snprintf(line, sizeof line, "%-6s %7zu %7zu %7zu %7zu %7zu %9zu %8.2f %8.2f\n",
                  corpus.vocab.code(l).c_str(), s.train, s.valid, s.test, corpus.vocab.n_concepts(), s.words,
                  s.polysemous, s.ctx_len, s.def_len);
    os << line;
    total.train += s.train;
    total.valid += s.valid;
    total.test += s.test;
  }
  print_rule(os, 76);
  std::snprintf(line, sizeof line, "%-6s %7zu %7zu %7zu %7zu\n", "total", total.train, total.valid, total.test,
                corpus.vocab.size());
  os << line;
  if (corpus.config.test_is_valid) os << "(test split reuses the validation split)\n";
}

int cmd_gen_data(const Command& cmd, std::ostream& out) {
  const RunConfig cfg = cmd.resolve();
  const auto corpus = toy::generate_corpus(toy::preset_config(cfg.preset, cfg.langs, cfg.concepts, cfg.corpus_seed));
  const fs::path dir = output_path(cmd.out);
  prepare_output(dir, cmd.force);
  toy::save_corpus(corpus, dir);
  eval::write_text(dir / "corpus_hash.txt", hex64(toy::corpus_hash(corpus)) + "\n");
  eval::write_text(dir / "config.txt", to_flat(cfg, cmd.keys));
  out << "corpus written to " << dir.string() << " (hash " << hex64(toy::corpus_hash(corpus)) << ")\n\n";
  print_corpus_stats(out, corpus);
  return 0;
}

// ---------------------------------------------------------------------------
// train

const std::vector<std::string> kTrainKeys = concat(
    {{"data"},
     kModelKeys,
     {"mode", "tuning", "lr", "epochs", "batch-size", "lambda", "tau", "sigma", "pooling", "symmetrize-negatives",
      "seed", "pretrain-steps", "pretrain-lr", "init", "val-examples", "max-new-tokens"}});

toy::ToyCorpus load_corpus_checked(const std::string& data) {
  const fs::path dir = input_path(data);
  if (!fs::is_directory(dir)) throw std::runtime_error("corpus not found: " + data + " (run gen-data first)");
  return toy::load_corpus(dir);
}

std::string expand_seed(std::string stem, std::uint64_t seed) {
  const std::string tag = "{seed}";
  for (auto pos = stem.find(tag); pos != std::string::npos; pos = stem.find(tag)) {
    stem.replace(pos, tag.size(), std::to_string(seed));
  }
  return stem;
}

num::ParamSet load_init(const std::string& stem, const model::ModelConfig& mc, std::uint64_t seed) {
  const fs::path path = input_path(expand_seed(stem, seed));
  num::ParamSet p = num::load_params(path);
  const auto fresh = model::init_params(mc, 0);
  bool ok = p.size() == fresh.size();
  for (std::size_t i = 0; ok && i < p.size(); ++i) {
    ok = p.name(i) == fresh.name(i) && p[i].shape() == fresh[i].shape();
  }
  if (!ok) throw std::runtime_error("checkpoint " + path.string() + " does not match the model configuration");
  return p;
}

/// Starting parameters for one seed: a given checkpoint, translation
/// pretraining, or a fresh initialization.
num::ParamSet starting_params(const RunConfig& cfg, const toy::ToyCorpus& corpus, const model::ModelConfig& mc,
                              std::uint64_t seed, const fs::path& save_dir, std::ostream& out) {
  if (!cfg.init.empty()) {
    out << "starting from " << expand_seed(cfg.init, seed) << "\n";
    return load_init(cfg.init, mc, seed);
  }
  if (cfg.pretrain_steps == 0) return model::init_params(mc, seed);
  auto tc = cfg.train_config();
  tc.seed = seed;
  tc.learning_rate = cfg.pretrain_lr;
  out << "translation pretraining: " << cfg.pretrain_steps << " steps (seed " << seed << ")\n" << std::flush;
  auto pre = train::pretrain_translation(corpus, mc, tc);
  std::string log = "step,l_mle\n";
  for (std::size_t i = 0; i < pre.losses.size(); ++i) log += std::to_string(i + 1) + "," + show(pre.losses[i].l_mle) + "\n";
  const std::string stem = "pretrained-s" + std::to_string(seed);
  eval::write_text(save_dir / (stem + "_log.csv"), log);
  num::save_params(pre.params, save_dir / stem);
  out << "  final loss " << fixed(pre.losses.empty() ? 0.0 : pre.losses.back().l_mle, 4) << ", held-out accuracy "
      << fixed(train::translation_accuracy(mc, pre.params, corpus, 50)) << "\n";
  return std::move(pre.params);
}

void print_epoch(std::ostream& out, const train::EpochRecord& r) {
  char line[160];
  std::snprintf(line, sizeof line, "  epoch %3zu  steps %4zu  l_mle %.4f  l_c %.4f  l_final %.4f  val token-F1 %.4f\n",
                r.epoch, r.steps, r.l_mle, r.l_c, r.l_final, r.val_token_f1);
  out << line << std::flush;
}

void write_checkpoint(const fs::path& dir, const std::string& stem, const num::ParamSet& params, const ModelCard& card) {
  num::save_params(params, dir / stem);
  eval::write_text(dir / (stem + ".json"), model_card_json(card));
}

int cmd_train(const Command& cmd, std::ostream& out) {
  const RunConfig cfg = cmd.resolve();
  if (cfg.mode != "direct" && cfg.mode != "prompt-combo" && cfg.mode != "contrastive" && cfg.mode != "pipeline-mono") {
    throw std::invalid_argument("unknown mode '" + cfg.mode + "' (direct|prompt-combo|contrastive|pipeline-mono)");
  }
  const auto corpus = load_corpus_checked(cfg.data);
  const auto mc = cfg.model_config(corpus);
  const auto tc = cfg.train_config();
  tc.validate(corpus.splits.size());

  const fs::path dir = output_path(cmd.out.empty() ? "runs/" + cfg.mode + "-s" + std::to_string(cfg.seed) : cmd.out);
  prepare_output(dir, cmd.force);
  eval::write_text(dir / "config.txt", to_flat(cfg, cmd.keys));
  const std::uint64_t hash = toy::corpus_hash(corpus);
  eval::write_text(dir / "corpus_hash.txt", hex64(hash) + "\n");

  const auto init = starting_params(cfg, corpus, mc, cfg.seed, dir, out);
  out << "training " << cfg.mode << " (" << cfg.tuning << ", lr " << show(tc.learning_rate) << ", " << cfg.epochs
      << " epochs)\n" << std::flush;
  auto result = train::train(corpus, mc, tc, &init, [&](const train::EpochRecord& r) { print_epoch(out, r); });
  if (cfg.epochs == 0) result.best = init;

  ModelCard card{mc, corpus.languages, cfg.mode, cfg.tuning, hash};
  write_checkpoint(dir, "model", result.best, card);
  write_checkpoint(dir, "last", result.last, card);
  eval::write_text(dir / "train_log.csv", train::log_csv(result.log));
  if (result.log.best_epoch) {
    out << "best epoch " << result.log.best_epoch << " (val token-F1 " << fixed(result.log.best_val_token_f1, 4)
        << ")\n";
  }
  out << "run written to " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

std::vector<eval::LangPair> parse_pairs(const std::string& spec, const toy::Vocabulary& vocab) {
  const std::size_t n = vocab.n_langs();
  if (spec == "all") return eval::all_pairs(n);
  if (spec == "cross") return eval::cross_pairs(n);
  if (spec == "mono") {
    std::vector<eval::LangPair> out;
    for (toy::LangId l = 0; l < n; ++l) out.push_back({l, l});
    return out;
  }
  std::vector<eval::LangPair> out;
  for (const auto& item : split_list(spec)) {
    const auto dash = item.find('-');
    const auto a = dash == std::string::npos ? std::nullopt : vocab.lang_from_code(item.substr(0, dash));
    const auto b = dash == std::string::npos ? std::nullopt : vocab.lang_from_code(item.substr(dash + 1));
    if (!a || !b) throw std::invalid_argument("bad language pair '" + item + "'");
    out.push_back({*a, *b});
  }
  if (out.empty()) throw std::invalid_argument("no language pairs given");
  return out;
}

eval::Generator generator_for(const std::string& mode) {
  if (mode == "pipeline-mono") return eval::Generator::pipeline;
  if (mode == "direct") return eval::Generator::direct;
  return eval::Generator::prompted;
}

struct LoadedRun {
  fs::path dir;
  RunConfig config;
  ModelCard card;
  num::ParamSet params;
};

LoadedRun load_run(const std::string& path) {
  LoadedRun r;
  r.dir = input_path(path);
  if (!fs::exists(r.dir / "model.json")) throw std::runtime_error("not a run directory: " + path);
  apply_flat(r.config, read_file(r.dir / "config.txt"));
  r.card = parse_model_card(read_file(r.dir / "model.json"));
  r.params = num::load_params(r.dir / "model");
  return r;
}

void print_pairs(std::ostream& out, const toy::Vocabulary& vocab, const std::vector<eval::PairResult>& pairs) {
  char line[160];
  std::snprintf(line, sizeof line, "  %-7s %5s %9s %9s %9s %10s %9s\n", "pair", "n", "lang-mix", "ignore", "empty",
                "concept-F1", "token-F1");
  out << line;
  for (const auto& p : pairs) {
    const std::string name = vocab.code(p.src) + "-" + vocab.code(p.tgt);
    std::snprintf(line, sizeof line, "  %-7s %5zu %9.3f %9.3f %9.3f %10.3f %9s\n", name.c_str(), p.n_examples,
                  p.language_mix_rate, p.ignore_task_rate, p.degenerate_rate, p.concept_f1,
                  p.mono() ? fixed(p.mono_token_f1).c_str() : "-");
    out << line;
  }
}

int cmd_eval(const Command& cmd, const std::vector<std::string>& runs, std::ostream& out) {
  if (runs.empty()) throw std::invalid_argument("eval needs at least one --run");
  const RunConfig opts = cmd.resolve();
  const fs::path dir = output_path(cmd.out);
  prepare_output(dir, cmd.force);

  std::map<std::string, toy::ToyCorpus> corpora;
  std::vector<eval::ModeRuns> by_mode;
  std::set<std::string> used_names;
  std::optional<toy::Vocabulary> vocab;
  for (const auto& path : runs) {
    LoadedRun run = load_run(path);
    const std::string data = cmd.given("data") ? opts.data : run.config.data;
    if (!corpora.count(data)) corpora.emplace(data, load_corpus_checked(data));
    const auto& corpus = corpora.at(data);
    if (toy::corpus_hash(corpus) != run.card.corpus_hash) {
      throw std::runtime_error("run " + path + " was trained on a different corpus than " + data);
    }
    vocab = corpus.vocab;
    eval::EvalOptions eo;
    eo.generator = generator_for(run.card.mode);
    eo.max_new_tokens = cmd.given("max-new-tokens") ? opts.max_new_tokens : run.config.max_new_tokens;
    eo.ignore_threshold = opts.ignore_threshold;
    eo.limit = opts.limit;
    const auto pairs = parse_pairs(opts.pairs, corpus.vocab);
    const auto result = eval::evaluate(run.card.model, run.params, corpus, pairs, eo);

    std::string name = run.dir.filename().string();
    if (name.empty()) name = run.dir.parent_path().filename().string();
    for (int k = 2; used_names.count(name); ++k) name = run.dir.filename().string() + "-" + std::to_string(k);
    used_names.insert(name);
    fs::create_directories(dir / name);
    eval::write_text(dir / name / "records.jsonl", eval::records_jsonl(corpus.vocab, result.records));
    eval::write_text(dir / name / "pairs.csv", eval::pairs_csv(corpus.vocab, result.pairs));
    out << name << " (" << run.card.mode << ")\n";
    print_pairs(out, corpus.vocab, result.pairs);

    auto it = std::find_if(by_mode.begin(), by_mode.end(), [&](const auto& m) { return m.mode == run.card.mode; });
    if (it == by_mode.end()) {
      by_mode.push_back({run.card.mode, {}});
      it = by_mode.end() - 1;
    }
    it->seeds.push_back(result);
  }

  if (runs.size() > 1) {
    const bool has_baseline =
        std::any_of(by_mode.begin(), by_mode.end(), [&](const auto& m) { return m.mode == opts.baseline; });
    const std::string baseline = has_baseline ? opts.baseline : by_mode.front().mode;
    const auto report = eval::compare_report(*vocab, by_mode, baseline);
    eval::write_text(dir / "comparison.csv", report.csv);
    fs::create_directories(dir / "charts");
    for (const auto& [metric, svg] : report.charts) eval::write_text(dir / "charts" / (metric + ".svg"), svg);
    out << "comparison against " << baseline << " written to " << (dir / "comparison.csv").string() << "\n";
  }
  eval::write_text(dir / "config.txt", to_flat(opts, {"pairs", "limit", "ignore-threshold", "baseline"}));
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

const std::vector<std::string> kAblateKeys = concat(
    {{"data"},
     kModelKeys,
     {"lr", "epochs", "batch-size", "tau", "sigma", "symmetrize-negatives", "seeds", "pretrain-steps", "pretrain-lr",
      "init", "val-examples", "max-new-tokens", "poolings", "lambdas", "endpoints", "limit", "ignore-threshold"}});

struct CellKey {
  std::string pooling;
  double lambda;
  auto operator<=>(const CellKey&) const = default;
};

int cmd_ablate(const Command& cmd, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  cfg.mode = "contrastive";
  if (cfg.seeds.empty()) throw std::invalid_argument("ablate needs at least one seed");
  if (cfg.poolings.empty()) throw std::invalid_argument("ablate needs at least one pooling");
  for (const auto& p : cfg.poolings) prompt::parse_pooling(p);
  std::vector<double> lambdas = cfg.lambdas;
  if (cfg.endpoints) {
    lambdas.push_back(0.0);
    lambdas.push_back(1.0);
  }
  std::sort(lambdas.begin(), lambdas.end());
  lambdas.erase(std::unique(lambdas.begin(), lambdas.end()), lambdas.end());

  const auto corpus = load_corpus_checked(cfg.data);
  const auto mc = cfg.model_config(corpus);
  const fs::path dir = output_path(cmd.out);
  prepare_output(dir, cmd.force);
  eval::write_text(dir / "config.txt", to_flat(cfg, cmd.keys));
  eval::write_text(dir / "corpus_hash.txt", hex64(toy::corpus_hash(corpus)) + "\n");
  const auto pairs = eval::cross_pairs(corpus.splits.size());

  std::map<CellKey, std::vector<eval::PairResult>> cells;
  for (std::uint64_t seed : cfg.seeds) {
    const auto init = starting_params(cfg, corpus, mc, seed, dir, out);
    std::optional<eval::PairResult> lambda_zero;
    for (const auto& pooling : cfg.poolings) {
      for (double lambda : lambdas) {
        if (lambda == 0.0 && lambda_zero) {
          // The contrastive term has no weight, so the pooling cannot matter.
          cells[{pooling, lambda}].push_back(*lambda_zero);
          continue;
        }
        RunConfig cell = cfg;
        cell.pooling = pooling;
        cell.lambda = lambda;
        cell.seed = seed;
        auto tc = cell.train_config();
        tc.validate(corpus.splits.size());
        const auto result = train::train(corpus, mc, tc, &init);
        eval::EvalOptions eo;
        eo.max_new_tokens = cfg.max_new_tokens;
        eo.ignore_threshold = cfg.ignore_threshold;
        eo.limit = cfg.limit;
        const auto er = eval::evaluate(mc, result.best, corpus, pairs, eo);
        const auto summary = eval::cross_summary(er);
        const fs::path cell_dir = dir / "cells" / (pooling + "-l" + show(lambda) + "-s" + std::to_string(seed));
        fs::create_directories(cell_dir);
        eval::write_text(cell_dir / "train_log.csv", train::log_csv(result.log));
        eval::write_text(cell_dir / "pairs.csv", eval::pairs_csv(corpus.vocab, er.pairs));
        cells[{pooling, lambda}].push_back(summary);
        if (lambda == 0.0) lambda_zero = summary;
        out << "  seed " << seed << "  " << pooling << "  lambda " << show(lambda) << "  concept-F1 "
            << fixed(summary.concept_f1) << "  lang-mix " << fixed(summary.language_mix_rate) << "\n"
            << std::flush;
      }
    }
  }

  struct Metric {
    const char* name;
    double eval::PairResult::*field;
  };
  const Metric metrics[] = {{"concept_f1", &eval::PairResult::concept_f1},
                            {"language_mix_rate", &eval::PairResult::language_mix_rate},
                            {"ignore_task_rate", &eval::PairResult::ignore_task_rate}};
  std::string csv = "pooling,lambda,metric";
  for (auto s : cfg.seeds) csv += ",seed_" + std::to_string(s);
  csv += ",median\n";
  for (const auto& pooling : cfg.poolings) {
    for (double lambda : lambdas) {
      const auto& runs = cells.at({pooling, lambda});
      for (const auto& m : metrics) {
        std::vector<double> values;
        csv += pooling + "," + show(lambda) + "," + m.name;
        for (const auto& r : runs) {
          values.push_back(r.*m.field);
          csv += "," + fixed(r.*m.field, 6);
        }
        csv += "," + fixed(eval::median(values), 6) + "\n";
      }
    }
  }
  eval::write_text(dir / "ablation.csv", csv);

  out << "\nmedian cross-lingual concept-F1\n";
  char line[64];
  std::snprintf(line, sizeof line, "%-8s", "lambda");
  out << line;
  for (const auto& p : cfg.poolings) {
    std::snprintf(line, sizeof line, " %10s", p.c_str());
    out << line;
  }
  out << "\n";
  for (double lambda : lambdas) {
    std::snprintf(line, sizeof line, "%-8s", show(lambda).c_str());
    out << line;
    for (const auto& p : cfg.poolings) {
      std::vector<double> v;
      for (const auto& r : cells.at({p, lambda})) v.push_back(r.concept_f1);
      std::snprintf(line, sizeof line, " %10.4f", eval::median(v));
      out << line;
    }
    out << "\n";
  }
  out << "report written to " << (dir / "ablation.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// inspect

std::string render(const toy::Vocabulary& vocab, const std::vector<toy::TokenId>& tokens) {
  std::string s;
  for (auto t : tokens) s += (s.empty() ? "" : " ") + vocab.token(t);
  return s.empty() ? "(empty)" : s;
}

int cmd_inspect(const Command& cmd, const std::vector<std::string>& runs, const std::string& lang_code,
                std::size_t index, const std::string& split, const std::string& target, std::ostream& out) {
  if (runs.empty()) throw std::invalid_argument("inspect needs at least one --run");
  const RunConfig opts = cmd.resolve();
  std::vector<LoadedRun> loaded;
  for (const auto& r : runs) loaded.push_back(load_run(r));
  const std::string data = cmd.given("data") ? opts.data : loaded.front().config.data;
  const auto corpus = load_corpus_checked(data);
  const auto lang = corpus.vocab.lang_from_code(lang_code);
  if (!lang) throw std::invalid_argument("unknown language '" + lang_code + "'");
  const auto& sp = corpus.splits[*lang];
  const auto& examples = split == "train" ? sp.train : split == "valid" ? sp.valid : split == "test" ? sp.test
      : throw std::invalid_argument("split must be train, valid or test");
  if (index >= examples.size()) throw std::out_of_range("example index out of range");
  const auto& ex = examples[index];

  std::vector<toy::LangId> targets;
  if (target == "all") {
    for (toy::LangId l = 0; l < corpus.splits.size(); ++l) targets.push_back(l);
  } else {
    const auto t = corpus.vocab.lang_from_code(target);
    if (!t) throw std::invalid_argument("unknown target language '" + target + "'");
    targets.push_back(*t);
  }

  out << split << " example " << index << " (" << lang_code << ")\n";
  out << "  word       " << render(corpus.vocab, ex.word) << "\n";
  out << "  context    " << render(corpus.vocab, ex.context) << "\n";
  out << "  definition " << render(corpus.vocab, ex.definition) << "\n";
  for (auto t : targets) {
    out << "\n-> " << corpus.vocab.code(t) << "  reference: "
        << render(corpus.vocab, toy::trans_lingual_reference(corpus.vocab, ex, t)) << "\n";
    for (const auto& run : loaded) {
      if (toy::corpus_hash(corpus) != run.card.corpus_hash) {
        throw std::runtime_error("run " + run.dir.string() + " was trained on a different corpus");
      }
      const std::size_t max_new = cmd.given("max-new-tokens") ? opts.max_new_tokens : run.config.max_new_tokens;
      std::vector<toy::TokenId> output;
      if (run.card.mode == "pipeline-mono") {
        output = eval::pipeline_baseline(run.card.model, run.params, corpus.vocab, ex, t, max_new);
      } else {
        const auto pm = run.card.mode == "direct" ? model::PromptMode::direct : model::PromptMode::prompted;
        output = model::generate(run.card.model, run.params, ex.word, ex.context, ex.lang, t, pm, max_new);
      }
      const bool mix = eval::language_mix_flag(output, t, corpus.vocab).mixed;
      const bool ignore = eval::ignore_task_flag(output, ex, t, corpus.vocab, opts.ignore_threshold);
      char line[96];
      std::snprintf(line, sizeof line, "   [%s%s%s concept-F1 %.3f]", mix ? "lang-mix " : "",
                    ignore ? "ignore-task " : "", output.empty() ? "empty " : "",
                    eval::concept_f1(output, ex.def_concepts, corpus.vocab));
      out << "   " << run.dir.filename().string() << " (" << run.card.mode << "): " << render(corpus.vocab, output)
          << line << "\n";
    }
  }
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

void RunConfig::set(std::string_view k, std::string_view value) { find_key(k).set(*this, value); }

std::string RunConfig::get(std::string_view k) const { return find_key(k).get(*this); }

double RunConfig::resolved_lr() const {
  if (lr > 0.0) return lr;
  return train::parse_tuning(tuning) == train::Tuning::prompt_only ? 1e-2 : 3e-4;
}

train::TrainConfig RunConfig::train_config() const {
  train::TrainConfig t;
  t.mode = mode == "pipeline-mono" ? train::Mode::direct : train::parse_mode(mode);
  t.tuning = train::parse_tuning(tuning);
  t.batch_size = batch_size;
  t.epochs = epochs;
  t.learning_rate = resolved_lr();
  t.contrastive.margin = sigma;
  t.contrastive.temperature = tau;
  t.contrastive.pooling = prompt::parse_pooling(pooling);
  t.contrastive.lambda = lambda;
  t.contrastive.symmetrize_negatives = symmetrize_negatives;
  t.seed = seed;
  t.pretrain_steps = pretrain_steps;
  t.val_examples = val_examples;
  t.max_new_tokens = max_new_tokens;
  return t;
}

model::ModelConfig RunConfig::model_config(const toy::ToyCorpus& corpus) const {
  model::ModelConfig m = model;
  m.vocab_size = corpus.vocab.size();
  m.n_languages = corpus.splits.size();
  m.validate();
  return m;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& k : key_defs()) n.push_back(k.name);
    return n;
  }();
  return names;
}

std::map<std::string, std::string> parse_flat(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

void apply_flat(RunConfig& config, std::string_view text) {
  for (const auto& [k, v] : parse_flat(text)) config.set(k, v);
}

std::string to_flat(const RunConfig& config, const std::vector<std::string>& keys) {
  std::string out;
  for (const auto& k : keys) {
    out += k + "=" + (k == "lr" ? show(config.resolved_lr()) : config.get(k)) + "\n";
  }
  return out;
}

fs::path output_root() {
  const char* env = std::getenv("XLDG_RUN_DIR");
  return env && *env ? fs::path(env) : fs::current_path();
}

fs::path output_path(const fs::path& path) { return path.is_absolute() ? path : output_root() / path; }

fs::path input_path(const fs::path& path) {
  if (path.is_absolute() || fs::exists(path)) return path;
  const fs::path rooted = output_root() / path;
  return fs::exists(rooted) || fs::exists(rooted.string() + ".manifest") ? rooted : path;
}

std::string model_card_json(const ModelCard& card) {
  json j;
  j["format"] = "xldg-model 1";
  const auto& m = card.model;
  j["model_config"] = {{"d_model", m.d_model},         {"n_heads", m.n_heads},   {"n_enc_layers", m.n_enc_layers},
                       {"n_dec_layers", m.n_dec_layers}, {"ffn_dim", m.ffn_dim},   {"max_len", m.max_len},
                       {"vocab_size", m.vocab_size},     {"n_languages", m.n_languages},
                       {"n_task_tokens", m.n_task_tokens}, {"dropout", m.dropout}};
  j["languages"] = json::array();
  for (const auto& l : card.languages) j["languages"].push_back({{"id", l.lang_id}, {"code", l.code}});
  j["mode"] = card.mode;
  j["tuning"] = card.tuning;
  j["corpus_hash"] = hex64(card.corpus_hash);
  return j.dump(2) + "\n";
}

ModelCard parse_model_card(std::string_view text) {
  const json j = json::parse(text);
  if (j.at("format").get<std::string>() != "xldg-model 1") throw std::runtime_error("unsupported model card format");
  ModelCard card;
  const auto& m = j.at("model_config");
  card.model.d_model = m.at("d_model").get<std::size_t>();
  card.model.n_heads = m.at("n_heads").get<std::size_t>();
  card.model.n_enc_layers = m.at("n_enc_layers").get<std::size_t>();
  card.model.n_dec_layers = m.at("n_dec_layers").get<std::size_t>();
  card.model.ffn_dim = m.at("ffn_dim").get<std::size_t>();
  card.model.max_len = m.at("max_len").get<std::size_t>();
  card.model.vocab_size = m.at("vocab_size").get<std::size_t>();
  card.model.n_languages = m.at("n_languages").get<std::size_t>();
  card.model.n_task_tokens = m.at("n_task_tokens").get<std::size_t>();
  card.model.dropout = m.at("dropout").get<double>();
  for (const auto& l : j.at("languages")) {
    card.languages.push_back({l.at("id").get<toy::LangId>(), l.at("code").get<std::string>()});
  }
  card.mode = j.at("mode").get<std::string>();
  card.tuning = j.at("tuning").get<std::string>();
  card.corpus_hash = parse_hex64(j.at("corpus_hash").get<std::string>());
  return card;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Trans-lingual definition generation on synthetic languages"};
  app.name("xldg");
  app.require_subcommand(1);

  Command gen(app, "gen-data", "generate a synthetic multilingual corpus",
              {"langs", "concepts", "preset", "corpus-seed"}, {{"corpus-seed", "--seed"}});
  gen.add_output("data", "corpus directory");

  Command trn(app, "train", "pretrain (optionally) and fine-tune one model", kTrainKeys);
  trn.add_output("", "run directory (default runs/<mode>-s<seed>)");

  std::vector<std::string> eval_runs;
  Command evl(app, "eval", "evaluate runs on the test split and compare them",
              {"data", "pairs", "limit", "ignore-threshold", "max-new-tokens", "baseline"});
  evl.add_output("eval", "report directory");
  evl.app->add_option("--run", eval_runs, "run directory (repeatable)")->required();

  Command abl(app, "ablate", "pooling x lambda grid of contrastive runs", kAblateKeys);
  abl.add_output("ablate", "report directory");

  std::vector<std::string> inspect_runs;
  std::string inspect_lang = "aa", inspect_split = "test", inspect_target = "all";
  std::size_t inspect_index = 0;
  Command ins(app, "inspect", "show one example's generations across runs",
              {"data", "max-new-tokens", "ignore-threshold"});
  ins.app->add_option("--run", inspect_runs, "run directory (repeatable)")->required();
  ins.app->add_option("--lang", inspect_lang, "source language code");
  ins.app->add_option("--index", inspect_index, "example index within the split");
  ins.app->add_option("--split", inspect_split, "train | valid | test");
  ins.app->add_option("--target", inspect_target, "target language code or all");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen.app->parsed()) return cmd_gen_data(gen, out);
    if (trn.app->parsed()) return cmd_train(trn, out);
    if (evl.app->parsed()) return cmd_eval(evl, eval_runs, out);
    if (abl.app->parsed()) return cmd_ablate(abl, out);
    if (ins.app->parsed()) {
      return cmd_inspect(ins, inspect_runs, inspect_lang, inspect_index, inspect_split, inspect_target, out);
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace xldg::cli
