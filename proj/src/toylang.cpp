#include "xldg/toylang.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "xldg/numcore/random.hpp"

namespace xldg::toy {

using json = nlohmann::json;
using num::Rng;

std::string language_code(LangId lang) {
  if (lang >= 26) throw std::out_of_range("at most 26 toy languages are supported");
  const char c = static_cast<char>('a' + lang);
  return std::string{c, c};
}

Vocabulary::Vocabulary(std::size_t n_langs, std::size_t n_concepts)
    : n_langs_(n_langs), n_concepts_(n_concepts) {
  digits_ = std::max<std::size_t>(3, std::to_string(n_concepts > 0 ? n_concepts - 1 : 0).size());
  for (LangId l = 0; l < n_langs; ++l) codes_.push_back(language_code(l));
}

TokenId Vocabulary::id(LangId lang, ConceptId cid) const {
  if (lang >= n_langs_ || cid >= n_concepts_) {
    throw LexiconError("no token for language " + std::to_string(lang) + ", cid " +
                       std::to_string(cid));
  }
  return kNumSpecials + lang * n_concepts_ + cid;
}

LangId Vocabulary::lang_of(TokenId id) const {
  if (id < kNumSpecials || id >= size()) {
    throw LexiconError("token id " + std::to_string(id) + " has no language");
  }
  return (id - kNumSpecials) / n_concepts_;
}

ConceptId Vocabulary::concept_of(TokenId id) const {
  if (id < kNumSpecials || id >= size()) {
    throw LexiconError("token id " + std::to_string(id) + " has no cid");
  }
  return (id - kNumSpecials) % n_concepts_;
}

std::optional<LangId> Vocabulary::lang_from_code(std::string_view code) const {
  for (LangId l = 0; l < codes_.size(); ++l) {
    if (codes_[l] == code) return l;
  }
  return std::nullopt;
}

std::string Vocabulary::token(TokenId id) const {
  switch (id) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kSep: return "<sep>";
    default: break;
  }
  std::string num = std::to_string(concept_of(id));
  if (num.size() < digits_) num.insert(0, digits_ - num.size(), '0');
  return codes_[lang_of(id)] + "_k" + num;
}

TokenId Vocabulary::parse(std::string_view token) const {
  if (token == "<pad>") return kPad;
  if (token == "<bos>") return kBos;
  if (token == "<eos>") return kEos;
  if (token == "<sep>") return kSep;
  if (token.size() > 4 && token.substr(2, 2) == "_k") {
    if (auto lang = lang_from_code(token.substr(0, 2))) {
      std::size_t cid = 0;
      bool ok = token.size() - 4 == digits_;
      for (char c : token.substr(4)) {
        ok = ok && c >= '0' && c <= '9';
        cid = cid * 10 + static_cast<std::size_t>(c - '0');
      }
      if (ok && cid < n_concepts_) return id(*lang, cid);
    }
  }
  throw LexiconError("unknown token '" + std::string(token) + "'");
}

std::size_t Interlingua::polysemous_slots() const {
  return static_cast<std::size_t>(
      std::count_if(slots.begin(), slots.end(), [](const Slot& s) { return s.senses.size() > 1; }));
}

CorpusConfig preset_config(std::string_view name, std::size_t n_langs, std::size_t n_concepts,
                           std::uint64_t seed) {
  CorpusConfig c;
  c.n_langs = n_langs;
  c.n_concepts = n_concepts;
  c.seed = seed;
  if (name == "rich") {
    c.preset = "rich";
    c.train = 2000;
    c.valid = 200;
    c.test = 200;
  } else if (name == "low") {
    c.preset = "low";
    c.train = 256;
    c.valid = 200;
    c.test = 200;
    c.test_is_valid = true;
  } else {
    throw std::invalid_argument("unknown preset '" + std::string(name) + "' (rich|low)");
  }
  return c;
}

namespace {

void validate(const CorpusConfig& c) {
  if (c.n_langs < 2) throw std::invalid_argument("need at least 2 languages");
  if (c.n_langs > 26) throw std::invalid_argument("at most 26 languages");
  if (c.n_concepts < 50) throw std::invalid_argument("need at least 50 concepts");
  if (c.polysemy_fraction < 0.0 || c.polysemy_fraction > 0.5) {
    throw std::invalid_argument("polysemy_fraction must lie in [0, 0.5]");
  }
  if (c.templates_per_sense < 2) throw std::invalid_argument("need at least 2 templates per sense");
  if (c.cues_per_sense < 1 || c.cues_per_sense > c.templates_per_sense) {
    throw std::invalid_argument("cues_per_sense must lie in [1, templates_per_sense]");
  }
  if (c.def_min_len < 1 || c.def_min_len > c.def_max_len) {
    throw std::invalid_argument("bad definition length range");
  }
  if (c.ctx_min_len < 2 || c.ctx_min_len > c.ctx_max_len) {
    throw std::invalid_argument("context length range must start at >= 2 (word + cue)");
  }
  if (c.test_is_valid && c.test != c.valid) {
    throw std::invalid_argument("test split reuses valid, so test size must equal valid size");
  }
}

// Distinct random concepts outside `excluded`.
std::vector<ConceptId> draw_distinct(Rng& rng, std::size_t n_concepts, std::size_t count,
                                     const std::set<ConceptId>& excluded) {
  std::vector<ConceptId> out;
  std::set<ConceptId> taken = excluded;
  if (n_concepts < taken.size() + count) {
    throw std::invalid_argument("not enough concepts to draw " + std::to_string(count));
  }
  while (out.size() < count) {
    const ConceptId c = num::uniform_index(rng, n_concepts);
    if (taken.insert(c).second) out.push_back(c);
  }
  return out;
}

}  // namespace

Interlingua generate_interlingua(const CorpusConfig& config) {
  validate(config);
  const std::size_t C = config.n_concepts;
  Rng rng(num::mix_seed(config.seed, 0));
  Interlingua il;
  il.n_concepts = C;

  for (ConceptId c = 0; c < C; ++c) il.slots.push_back({c, {c}});
  const auto n_poly =
      static_cast<std::size_t>(std::llround(config.polysemy_fraction * static_cast<double>(C)));
  std::vector<ConceptId> order(C);
  std::iota(order.begin(), order.end(), 0);
  num::shuffle(std::span<ConceptId>(order), rng);
  for (std::size_t i = 0; i < n_poly; ++i) {
    const ConceptId s = order[i];
    ConceptId other = s;
    while (other == s) other = num::uniform_index(rng, C);
    il.slots[s].senses.push_back(other);
  }

  // users[sense]: word concepts that can fill a template owned by `sense`.
  std::vector<std::set<ConceptId>> users(C);
  for (const auto& slot : il.slots) {
    for (auto sense : slot.senses) users[sense].insert(slot.word);
  }

  // Cues of polysemous senses are reserved: no other template uses them, so
  // the context always tells the two senses apart.
  std::set<ConceptId> reserved;
  il.cues.assign(C, {});
  for (const auto& slot : il.slots) {
    if (slot.senses.size() < 2) continue;
    for (auto sense : slot.senses) {
      if (!il.cues[sense].empty()) continue;
      std::set<ConceptId> excluded = reserved;
      excluded.insert(users[sense].begin(), users[sense].end());
      excluded.insert(sense);
      il.cues[sense] = draw_distinct(rng, C, config.cues_per_sense, excluded);
      reserved.insert(il.cues[sense].begin(), il.cues[sense].end());
    }
  }
  for (ConceptId c = 0; c < C; ++c) {
    if (!il.cues[c].empty()) continue;
    std::set<ConceptId> excluded = reserved;
    excluded.insert(users[c].begin(), users[c].end());
    excluded.insert(c);
    il.cues[c] = draw_distinct(rng, C, config.cues_per_sense, excluded);
  }

  il.definitions.assign(C, {});
  for (ConceptId c = 0; c < C; ++c) {
    const std::size_t len =
        config.def_min_len + num::uniform_index(rng, config.def_max_len - config.def_min_len + 1);
    std::set<ConceptId> excluded = users[c];
    excluded.insert(c);
    il.definitions[c] = draw_distinct(rng, C, len, excluded);
  }

  il.contexts.assign(C, {});
  for (ConceptId c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < config.templates_per_sense; ++t) {
      const std::size_t len =
          config.ctx_min_len + num::uniform_index(rng, config.ctx_max_len - config.ctx_min_len + 1);
      std::set<ConceptId> excluded = users[c];
      excluded.insert(il.cues[c].begin(), il.cues[c].end());
      excluded.insert(reserved.begin(), reserved.end());
      std::vector<std::size_t> items = draw_distinct(rng, C, len - 2, excluded);
      items.push_back(il.cues[c][t % config.cues_per_sense]);
      num::shuffle(std::span<std::size_t>(items), rng);
      const std::size_t hole_at = num::uniform_index(rng, items.size() + 1);
      items.insert(items.begin() + static_cast<std::ptrdiff_t>(hole_at), kHole);
      il.contexts[c].push_back({c * config.templates_per_sense + t, c, std::move(items)});
    }
  }
  return il;
}

ToyCorpus generate_corpus(const CorpusConfig& config) {
  const Interlingua il = generate_interlingua(config);
  ToyCorpus corpus;
  corpus.config = config;
  corpus.vocab = Vocabulary(config.n_langs, config.n_concepts);
  for (LangId l = 0; l < config.n_langs; ++l) corpus.languages.push_back({l, language_code(l)});

  struct Pair {
    ConceptId slot;
    ConceptId sense;
    std::size_t tmpl;
  };
  std::vector<Pair> pairs;
  std::size_t n_senses = 0;
  for (const auto& slot : il.slots) {
    n_senses += slot.senses.size();
    for (auto sense : slot.senses) {
      for (std::size_t t = 0; t < config.templates_per_sense; ++t) {
        pairs.push_back({slot.word, sense, t});
      }
    }
  }
  if (config.train < n_senses) {
    throw std::invalid_argument("train size " + std::to_string(config.train) +
                                " cannot cover all " + std::to_string(n_senses) + " word senses");
  }
  const std::size_t needed = config.train + config.valid + (config.test_is_valid ? 0 : config.test);
  if (needed > pairs.size()) {
    throw std::invalid_argument("splits need " + std::to_string(needed) +
                                " distinct (word, context template) pairs but only " +
                                std::to_string(pairs.size()) + " exist per language");
  }

  for (LangId lang = 0; lang < config.n_langs; ++lang) {
    Rng rng(num::mix_seed(config.seed, 1 + lang));
    std::vector<Pair> shuffled = pairs;
    num::shuffle(std::span<Pair>(shuffled), rng);

    // Coverage first: the earliest pair of every (slot, sense) goes to train.
    std::vector<Pair> train, rest;
    std::set<std::pair<ConceptId, ConceptId>> covered;
    for (const auto& p : shuffled) {
      if (covered.insert({p.slot, p.sense}).second) {
        train.push_back(p);
      } else {
        rest.push_back(p);
      }
    }
    std::size_t cursor = 0;
    while (train.size() < config.train) train.push_back(rest[cursor++]);
    num::shuffle(std::span<Pair>(train), rng);

    auto make = [&](const Pair& p) {
      Example ex;
      ex.lang = lang;
      ex.word = {corpus.vocab.id(lang, p.slot)};
      for (auto item : il.contexts[p.sense][p.tmpl].items) {
        ex.context.push_back(item == kHole ? ex.word[0] : corpus.vocab.id(lang, item));
      }
      ex.def_concepts = il.definitions[p.sense];
      for (auto c : ex.def_concepts) ex.definition.push_back(corpus.vocab.id(lang, c));
      ex.word_concepts = {p.sense};
      return ex;
    };

    Splits splits;
    for (const auto& p : train) splits.train.push_back(make(p));
    for (std::size_t i = 0; i < config.valid; ++i) splits.valid.push_back(make(rest[cursor++]));
    if (config.test_is_valid) {
      splits.test = splits.valid;
    } else {
      for (std::size_t i = 0; i < config.test; ++i) splits.test.push_back(make(rest[cursor++]));
    }
    corpus.splits.push_back(std::move(splits));
  }
  return corpus;
}

std::vector<TokenId> lexicon_translate(const Vocabulary& vocab, std::span<const TokenId> tokens,
                                       LangId from, LangId to) {
  if (from >= vocab.n_langs() || to >= vocab.n_langs()) {
    throw LexiconError("unknown language id in lexicon_translate");
  }
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (auto t : tokens) {
    if (vocab.is_special(t)) {
      out.push_back(t);
      continue;
    }
    if (t >= vocab.size() || vocab.lang_of(t) != from) {
      const std::string shown = t < vocab.size() ? vocab.token(t) : "#" + std::to_string(t);
      throw LexiconError("token " + shown + " is not in the vocabulary of " + vocab.code(from));
    }
    out.push_back(vocab.id(to, vocab.concept_of(t)));
  }
  return out;
}

std::vector<TokenId> trans_lingual_reference(const Vocabulary& vocab, const Example& example,
                                             LangId target) {
  std::vector<TokenId> out;
  for (auto c : example.def_concepts) out.push_back(vocab.id(target, c));
  return out;
}

std::vector<ConceptId> token_concepts(const Vocabulary& vocab, std::span<const TokenId> tokens) {
  std::vector<ConceptId> out;
  for (auto t : tokens) {
    if (!vocab.is_special(t) && t < vocab.size()) out.push_back(vocab.concept_of(t));
  }
  return out;
}

std::vector<LangId> language_ids(const ToyCorpus& corpus) {
  std::vector<LangId> ids;
  for (const auto& l : corpus.languages) ids.push_back(l.lang_id);
  return ids;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

json config_to_json(const CorpusConfig& c) {
  return json{{"preset", c.preset},
              {"n_langs", c.n_langs},
              {"n_concepts", c.n_concepts},
              {"train", c.train},
              {"valid", c.valid},
              {"test", c.test},
              {"polysemy_fraction", c.polysemy_fraction},
              {"templates_per_sense", c.templates_per_sense},
              {"cues_per_sense", c.cues_per_sense},
              {"def_min_len", c.def_min_len},
              {"def_max_len", c.def_max_len},
              {"ctx_min_len", c.ctx_min_len},
              {"ctx_max_len", c.ctx_max_len},
              {"test_is_valid", c.test_is_valid},
              {"seed", c.seed}};
}

CorpusConfig config_from_json(const json& j) {
  CorpusConfig c;
  c.preset = j.at("preset").get<std::string>();
  c.n_langs = j.at("n_langs").get<std::size_t>();
  c.n_concepts = j.at("n_concepts").get<std::size_t>();
  c.train = j.at("train").get<std::size_t>();
  c.valid = j.at("valid").get<std::size_t>();
  c.test = j.at("test").get<std::size_t>();
  c.polysemy_fraction = j.at("polysemy_fraction").get<double>();
  c.templates_per_sense = j.at("templates_per_sense").get<std::size_t>();
  c.cues_per_sense = j.at("cues_per_sense").get<std::size_t>();
  c.def_min_len = j.at("def_min_len").get<std::size_t>();
  c.def_max_len = j.at("def_max_len").get<std::size_t>();
  c.ctx_min_len = j.at("ctx_min_len").get<std::size_t>();
  c.ctx_max_len = j.at("ctx_max_len").get<std::size_t>();
  c.test_is_valid = j.at("test_is_valid").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json tokens_to_json(const Vocabulary& vocab, std::span<const TokenId> tokens) {
  json arr = json::array();
  for (auto t : tokens) arr.push_back(vocab.token(t));
  return arr;
}

std::vector<TokenId> tokens_from_json(const Vocabulary& vocab, const json& arr, LangId lang) {
  std::vector<TokenId> out;
  for (const auto& s : arr) {
    const TokenId t = vocab.parse(s.get<std::string>());
    if (vocab.is_special(t) || vocab.lang_of(t) != lang) {
      throw LexiconError("token " + s.get<std::string>() + " does not belong to " +
                         vocab.code(lang));
    }
    out.push_back(t);
  }
  return out;
}

std::string split_text(const CorpusConfig& config, const Vocabulary& vocab, std::string_view split,
                       std::span<const Example> examples) {
  std::string text =
      json{{"xldg_corpus", 1}, {"split", std::string(split)}, {"config", config_to_json(config)}}
          .dump();
  text += '\n';
  for (const auto& ex : examples) {
    text += example_to_json(vocab, ex);
    text += '\n';
  }
  return text;
}

std::vector<Example> flatten(const ToyCorpus& corpus, std::vector<Example> Splits::*member) {
  std::vector<Example> all;
  for (const auto& s : corpus.splits) {
    const auto& part = s.*member;
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

constexpr std::array<std::pair<const char*, std::vector<Example> Splits::*>, 3> kSplitFiles{{
    {"train", &Splits::train},
    {"valid", &Splits::valid},
    {"test", &Splits::test},
}};

}  // namespace

std::string example_to_json(const Vocabulary& vocab, const Example& ex) {
  json j;
  j["lang"] = vocab.code(ex.lang);
  j["word"] = tokens_to_json(vocab, ex.word);
  j["context"] = tokens_to_json(vocab, ex.context);
  j["definition"] = tokens_to_json(vocab, ex.definition);
  j["word_concepts"] = ex.word_concepts;
  j["def_concepts"] = ex.def_concepts;
  return j.dump();
}

void save_split(const CorpusConfig& config, const Vocabulary& vocab, std::string_view split,
                std::span<const Example> examples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << split_text(config, vocab, split, examples);
}

std::pair<CorpusConfig, std::vector<Example>> load_split(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(path.string() + ": line " + std::to_string(lineno) + ": " + what);
  };

  CorpusConfig config;
  Vocabulary vocab;
  std::vector<Example> examples;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(std::string("malformed JSON (") + e.what() + ")");
    }
    try {
      if (!have_header) {
        if (!j.contains("xldg_corpus")) fail("missing corpus header");
        config = config_from_json(j.at("config"));
        vocab = Vocabulary(config.n_langs, config.n_concepts);
        have_header = true;
        continue;
      }
      Example ex;
      const auto code = j.at("lang").get<std::string>();
      auto lang = vocab.lang_from_code(code);
      if (!lang) fail("unknown language code '" + code + "'");
      ex.lang = *lang;
      ex.word = tokens_from_json(vocab, j.at("word"), ex.lang);
      ex.context = tokens_from_json(vocab, j.at("context"), ex.lang);
      ex.definition = tokens_from_json(vocab, j.at("definition"), ex.lang);
      ex.word_concepts = j.at("word_concepts").get<std::vector<ConceptId>>();
      ex.def_concepts = j.at("def_concepts").get<std::vector<ConceptId>>();
      if (ex.word.empty()) fail("empty word");
      examples.push_back(std::move(ex));
    } catch (const json::exception& e) {
      fail(std::string("bad field (") + e.what() + ")");
    } catch (const LexiconError& e) {
      fail(e.what());
    }
  }
  if (!have_header) {
    lineno = 1;
    fail("missing corpus header");
  }
  return {config, std::move(examples)};
}

void save_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, member] : kSplitFiles) {
    const auto all = flatten(corpus, member);
    save_split(corpus.config, corpus.vocab, name, all, dir / (std::string(name) + ".jsonl"));
  }
}

ToyCorpus load_corpus(const std::filesystem::path& dir) {
  ToyCorpus corpus;
  bool first = true;
  for (const auto& [name, member] : kSplitFiles) {
    auto [config, examples] = load_split(dir / (std::string(name) + ".jsonl"));
    if (first) {
      corpus.config = config;
      corpus.vocab = Vocabulary(config.n_langs, config.n_concepts);
      for (LangId l = 0; l < config.n_langs; ++l) corpus.languages.push_back({l, language_code(l)});
      corpus.splits.assign(config.n_langs, {});
      first = false;
    } else if (!(config == corpus.config)) {
      throw std::runtime_error(dir.string() + ": split headers disagree on the corpus config");
    }
    for (auto& ex : examples) (corpus.splits[ex.lang].*member).push_back(std::move(ex));
  }
  return corpus;
}

std::uint64_t corpus_hash(const ToyCorpus& corpus) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, member] : kSplitFiles) {
    const auto all = flatten(corpus, member);
    for (unsigned char c : split_text(corpus.config, corpus.vocab, name, all)) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace xldg::toy
