#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xldg/seq2seq.hpp"
#include "xldg/toylang.hpp"

namespace xldg::eval {

using toy::ConceptId;
using toy::Example;
using toy::LangId;
using toy::TokenId;
using toy::Vocabulary;

struct MixFlag {
  bool mixed = false;
  std::vector<TokenId> foreign;
};

/// Non-special output tokens that do not belong to target_lang.
MixFlag language_mix_flag(std::span<const TokenId> output, LangId target_lang, const Vocabulary& vocab);

/// Jaccard similarity of two concept sets (duplicates ignored). 0 when both
/// are empty.
double jaccard(std::span<const ConceptId> a, std::span<const ConceptId> b);

/// Flags outputs that render the context instead of defining the word:
/// J_ctx >= threshold and J_ctx > J_def.
bool ignore_task_flag(std::span<const TokenId> output, const Example& example, LangId target_lang,
                      const Vocabulary& vocab, double threshold = 0.5);

/// F1 between output concepts (any language) and reference concepts, as
/// multisets. Reference must be nonempty.
double concept_f1(std::span<const TokenId> output, std::span<const ConceptId> reference,
                  const Vocabulary& vocab);

/// Multiset F1 over surface tokens, specials ignored. 1 when both are empty.
double token_f1(std::span<const TokenId> output, std::span<const TokenId> reference);

/// Renders source-language tokens in target_lang. Tokens of other languages
/// and specials are kept as they are.
std::vector<TokenId> pipeline_translate(const Vocabulary& vocab, std::span<const TokenId> tokens,
                                        LangId source_lang, LangId target_lang);

/// Mono-lingual generation with params trained in direct mode, then lexicon
/// translation to target_lang.
std::vector<TokenId> pipeline_baseline(const model::ModelConfig& config, const num::ParamSet& params_mono,
                                       const Vocabulary& vocab, const Example& example,
                                       LangId target_lang, std::size_t max_new_tokens);

/// How outputs are produced.
enum class Generator { direct, prompted, pipeline };

struct EvalOptions {
  Generator generator = Generator::prompted;
  std::size_t max_new_tokens = 16;
  double ignore_threshold = 0.5;
  /// 0 evaluates the whole test split, otherwise its first `limit` examples.
  std::size_t limit = 0;
  std::size_t generation_batch = 64;
};

struct ExampleRecord {
  LangId src = 0;
  LangId tgt = 0;
  std::size_t index = 0;  // position in the source test split
  std::vector<TokenId> word;
  std::vector<TokenId> output;
  bool language_mix = false;
  bool ignore_task = false;
  bool degenerate = false;  // empty output
  std::vector<TokenId> foreign;
  double concept_f1 = 0.0;
  double token_f1 = 0.0;
};

struct PairResult {
  LangId src = 0;
  LangId tgt = 0;
  std::size_t n_examples = 0;
  double language_mix_rate = 0.0;
  double ignore_task_rate = 0.0;
  double degenerate_rate = 0.0;
  double concept_f1 = 0.0;
  double mono_token_f1 = 0.0;  // meaningful when src == tgt
  bool mono() const { return src == tgt; }
};

struct EvalResult {
  std::uint64_t corpus_hash = 0;
  std::vector<PairResult> pairs;
  std::vector<ExampleRecord> records;
};

using LangPair = std::pair<LangId, LangId>;

std::vector<LangPair> all_pairs(std::size_t n_langs);
std::vector<LangPair> cross_pairs(std::size_t n_langs);

/// Generates on the test split for every requested pair and scores it.
EvalResult evaluate(const model::ModelConfig& config, const num::ParamSet& params,
                    const toy::ToyCorpus& corpus, std::span<const LangPair> pairs,
                    const EvalOptions& options = {});

/// Rates and means recomputed from the records of one (src, tgt) pair.
PairResult aggregate(std::span<const ExampleRecord> records, LangId src, LangId tgt);

/// Pooled metrics over all cross-lingual records.
PairResult cross_summary(const EvalResult& result);

std::string records_jsonl(const Vocabulary& vocab, std::span<const ExampleRecord> records);
std::string pairs_csv(const Vocabulary& vocab, std::span<const PairResult> pairs);
void write_text(const std::filesystem::path& path, const std::string& text);

/// "-77.8%" style relative change of value against baseline.
std::string relative_change(double value, double baseline);

/// Per-seed results of several modes over the same corpus.
struct ModeRuns {
  std::string mode;
  std::vector<EvalResult> seeds;
};

struct ComparisonReport {
  std::string csv;
  /// One SVG per metric, keyed by metric name.
  std::map<std::string, std::string> charts;
};

/// Side-by-side medians and per-seed values for each pair plus a pooled
/// cross-lingual row. Relative changes are taken against `baseline_mode`.
/// Throws std::invalid_argument when the runs were made on different corpora.
ComparisonReport compare_report(const Vocabulary& vocab, std::span<const ModeRuns> modes,
                                const std::string& baseline_mode);

double median(std::vector<double> values);

}  // namespace xldg::eval
