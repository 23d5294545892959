#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xldg::toy {

using TokenId = std::size_t;
using ConceptId = std::size_t;
using LangId = std::size_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr std::size_t kNumSpecials = 4;

/// Thrown when a token is not in the vocabulary of the language it is
/// claimed to belong to.
class LexiconError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shared token space of all toy languages.
///
/// Surface tokens are "<code>_k<concept>", the two-letter code identifying the
/// language. Ids: specials first, then language-major blocks of n_concepts.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::size_t n_langs, std::size_t n_concepts);

  std::size_t size() const { return kNumSpecials + n_langs_ * n_concepts_; }
  std::size_t n_langs() const { return n_langs_; }
  std::size_t n_concepts() const { return n_concepts_; }

  TokenId id(LangId lang, ConceptId cid) const;
  bool is_special(TokenId id) const { return id < kNumSpecials; }
  /// Language of a non-special token.
  LangId lang_of(TokenId id) const;
  ConceptId concept_of(TokenId id) const;

  const std::string& code(LangId lang) const { return codes_.at(lang); }
  std::optional<LangId> lang_from_code(std::string_view code) const;

  std::string token(TokenId id) const;
  /// Inverse of token(); throws LexiconError on unknown strings.
  TokenId parse(std::string_view token) const;

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  std::size_t n_langs_ = 0;
  std::size_t n_concepts_ = 0;
  std::size_t digits_ = 3;
  std::vector<std::string> codes_;
};

/// Two-letter code of language i: "aa", "bb", ...
std::string language_code(LangId lang);

struct ToyLanguage {
  LangId lang_id = 0;
  std::string code;
  friend bool operator==(const ToyLanguage&, const ToyLanguage&) = default;
};

inline constexpr std::size_t kHole = static_cast<std::size_t>(-1);

/// Concept-level grammar shared by every language.
struct Interlingua {
  struct Slot {
    ConceptId word;                 // lexical concept of the surface word
    std::vector<ConceptId> senses;  // 1 or 2 concepts; senses[0] == word
  };
  struct ContextTemplate {
    std::size_t id = 0;              // unique across the interlingua
    ConceptId owner = 0;             // sense this template evokes
    std::vector<std::size_t> items;  // concept ids with exactly one kHole
  };

  std::size_t n_concepts = 0;
  std::vector<std::vector<ConceptId>> definitions;          // per concept
  std::vector<std::vector<ContextTemplate>> contexts;       // per concept
  std::vector<std::vector<ConceptId>> cues;                 // per concept
  std::vector<Slot> slots;                                  // one per concept
  std::size_t polysemous_slots() const;
};

struct Example {
  LangId lang = 0;
  std::vector<TokenId> word;
  std::vector<TokenId> context;
  std::vector<TokenId> definition;
  std::vector<ConceptId> word_concepts;  // sense of the word in this context
  std::vector<ConceptId> def_concepts;
  friend bool operator==(const Example&, const Example&) = default;
};

struct Splits {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
  friend bool operator==(const Splits&, const Splits&) = default;
};

struct CorpusConfig {
  std::string preset = "custom";
  std::size_t n_langs = 3;
  std::size_t n_concepts = 200;
  std::size_t train = 2000;
  std::size_t valid = 200;
  std::size_t test = 200;
  double polysemy_fraction = 0.2;
  std::size_t templates_per_sense = 12;
  std::size_t cues_per_sense = 1;  // templates cycle through the sense's cues
  std::size_t def_min_len = 3;
  std::size_t def_max_len = 8;
  std::size_t ctx_min_len = 4;  // including the word slot
  std::size_t ctx_max_len = 7;
  bool test_is_valid = false;   // reuse the validation split as test
  std::uint64_t seed = 7;
  friend bool operator==(const CorpusConfig&, const CorpusConfig&) = default;
};

/// "rich": 2000/200/200 per language. "low": 256 train, 200 valid reused as test.
CorpusConfig preset_config(std::string_view name, std::size_t n_langs,
                           std::size_t n_concepts, std::uint64_t seed);

struct ToyCorpus {
  CorpusConfig config;
  Vocabulary vocab;
  std::vector<ToyLanguage> languages;
  std::vector<Splits> splits;  // indexed by language
  friend bool operator==(const ToyCorpus&, const ToyCorpus&) = default;
};

Interlingua generate_interlingua(const CorpusConfig& config);
ToyCorpus generate_corpus(const CorpusConfig& config);

/// Token-by-token relabeling through the shared concept index. Specials pass
/// through unchanged.
std::vector<TokenId> lexicon_translate(const Vocabulary& vocab, std::span<const TokenId> tokens,
                                       LangId from, LangId to);

/// The example's definition rendered in target_lang. Evaluation only.
std::vector<TokenId> trans_lingual_reference(const Vocabulary& vocab, const Example& example,
                                             LangId target);

/// Concept ids of non-special tokens, whichever language they belong to.
std::vector<ConceptId> token_concepts(const Vocabulary& vocab, std::span<const TokenId> tokens);

// JSONL persistence: <dir>/{train,valid,test}.jsonl. Line 1 of each file is a
// header carrying the corpus config; every later line is one example.

void save_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir);
ToyCorpus load_corpus(const std::filesystem::path& dir);

/// One split file: header + examples. Malformed lines raise errors naming the
/// 1-based line number.
void save_split(const CorpusConfig& config, const Vocabulary& vocab, std::string_view split,
                std::span<const Example> examples, const std::filesystem::path& path);
std::pair<CorpusConfig, std::vector<Example>> load_split(const std::filesystem::path& path);

std::string example_to_json(const Vocabulary& vocab, const Example& example);
/// 64-bit FNV-1a over the serialized splits.
std::uint64_t corpus_hash(const ToyCorpus& corpus);

std::vector<LangId> language_ids(const ToyCorpus& corpus);

}  // namespace xldg::toy
