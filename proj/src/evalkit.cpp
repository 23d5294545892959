#include "xldg/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace xldg::eval {

using json = nlohmann::json;

MixFlag language_mix_flag(std::span<const TokenId> output, LangId target_lang, const Vocabulary& vocab) {
  MixFlag flag;
  for (auto t : output) {
    if (vocab.is_special(t)) continue;
    if (t >= vocab.size() || vocab.lang_of(t) != target_lang) flag.foreign.push_back(t);
  }
  flag.mixed = !flag.foreign.empty();
  return flag;
}

double jaccard(std::span<const ConceptId> a, std::span<const ConceptId> b) {
  const std::set<ConceptId> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 0.0;
  std::size_t common = 0;
  for (auto c : sa) common += sb.count(c);
  return static_cast<double>(common) / static_cast<double>(sa.size() + sb.size() - common);
}

bool ignore_task_flag(std::span<const TokenId> output, const Example& example, LangId target_lang,
                      const Vocabulary& vocab, double threshold) {
  const auto out = toy::token_concepts(vocab, output);
  const auto translated = toy::lexicon_translate(vocab, example.context, example.lang, target_lang);
  const auto ctx = toy::token_concepts(vocab, translated);
  const double j_ctx = jaccard(out, ctx);
  const double j_def = jaccard(out, example.def_concepts);
  return j_ctx >= threshold && j_ctx > j_def;
}

namespace {

template <typename T>
double multiset_f1(std::vector<T> a, std::vector<T> b) {
  if (a.empty() || b.empty()) return 0.0;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<T> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  if (common.empty()) return 0.0;
  const double p = static_cast<double>(common.size()) / static_cast<double>(a.size());
  const double r = static_cast<double>(common.size()) / static_cast<double>(b.size());
  return 2.0 * p * r / (p + r);
}

}  // namespace

double concept_f1(std::span<const TokenId> output, std::span<const ConceptId> reference,
                  const Vocabulary& vocab) {
  if (reference.empty()) throw std::invalid_argument("concept_f1: empty reference");
  return multiset_f1(toy::token_concepts(vocab, output),
                     std::vector<ConceptId>(reference.begin(), reference.end()));
}

double token_f1(std::span<const TokenId> output, std::span<const TokenId> reference) {
  std::vector<TokenId> a, b;
  for (auto t : output) {
    if (t >= toy::kNumSpecials) a.push_back(t);
  }
  for (auto t : reference) {
    if (t >= toy::kNumSpecials) b.push_back(t);
  }
  if (a.empty() && b.empty()) return 1.0;
  return multiset_f1(std::move(a), std::move(b));
}

std::vector<TokenId> pipeline_translate(const Vocabulary& vocab, std::span<const TokenId> tokens,
                                        LangId source_lang, LangId target_lang) {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (auto t : tokens) {
    if (!vocab.is_special(t) && t < vocab.size() && vocab.lang_of(t) == source_lang) {
      out.push_back(vocab.id(target_lang, vocab.concept_of(t)));
    } else {
      out.push_back(t);
    }
  }
  return out;
}

std::vector<TokenId> pipeline_baseline(const model::ModelConfig& config, const num::ParamSet& params_mono,
                                       const Vocabulary& vocab, const Example& example,
                                       LangId target_lang, std::size_t max_new_tokens) {
  const auto mono = model::generate(config, params_mono, example.word, example.context, example.lang,
                                    example.lang, model::PromptMode::direct, max_new_tokens);
  return pipeline_translate(vocab, mono, example.lang, target_lang);
}

std::vector<LangPair> all_pairs(std::size_t n_langs) {
  std::vector<LangPair> out;
  for (LangId s = 0; s < n_langs; ++s) {
    for (LangId t = 0; t < n_langs; ++t) out.emplace_back(s, t);
  }
  return out;
}

std::vector<LangPair> cross_pairs(std::size_t n_langs) {
  std::vector<LangPair> out;
  for (auto p : all_pairs(n_langs)) {
    if (p.first != p.second) out.push_back(p);
  }
  return out;
}

namespace {

PairResult summarize(std::span<const ExampleRecord* const> records, LangId src, LangId tgt) {
  PairResult r;
  r.src = src;
  r.tgt = tgt;
  r.n_examples = records.size();
  if (records.empty()) return r;
  for (const auto* rec : records) {
    r.language_mix_rate += rec->language_mix ? 1.0 : 0.0;
    r.ignore_task_rate += rec->ignore_task ? 1.0 : 0.0;
    r.degenerate_rate += rec->degenerate ? 1.0 : 0.0;
    r.concept_f1 += rec->concept_f1;
    r.mono_token_f1 += rec->token_f1;
  }
  const double n = static_cast<double>(records.size());
  r.language_mix_rate /= n;
  r.ignore_task_rate /= n;
  r.degenerate_rate /= n;
  r.concept_f1 /= n;
  r.mono_token_f1 /= n;
  return r;
}

}  // namespace

PairResult aggregate(std::span<const ExampleRecord> records, LangId src, LangId tgt) {
  std::vector<const ExampleRecord*> sel;
  for (const auto& r : records) {
    if (r.src == src && r.tgt == tgt) sel.push_back(&r);
  }
  return summarize(sel, src, tgt);
}

PairResult cross_summary(const EvalResult& result) {
  std::vector<const ExampleRecord*> sel;
  for (const auto& r : result.records) {
    if (r.src != r.tgt) sel.push_back(&r);
  }
  return summarize(sel, 0, 0);
}

EvalResult evaluate(const model::ModelConfig& config, const num::ParamSet& params,
                    const toy::ToyCorpus& corpus, std::span<const LangPair> pairs,
                    const EvalOptions& options) {
  const auto& vocab = corpus.vocab;
  EvalResult result;
  result.corpus_hash = toy::corpus_hash(corpus);
  const auto mode = options.generator == Generator::prompted ? model::PromptMode::prompted
                                                             : model::PromptMode::direct;

  for (const auto& [src, tgt] : pairs) {
    if (src >= corpus.splits.size() || tgt >= corpus.splits.size()) {
      throw std::out_of_range("language pair outside the corpus");
    }
    const auto& test = corpus.splits[src].test;
    const std::size_t n = options.limit ? std::min(options.limit, test.size()) : test.size();
    const LangId decode_lang = options.generator == Generator::pipeline ? src : tgt;

    std::vector<std::vector<TokenId>> outputs;
    outputs.reserve(n);
    const std::size_t chunk = std::max<std::size_t>(1, options.generation_batch);
    for (std::size_t begin = 0; begin < n; begin += chunk) {
      std::vector<model::GenerationRequest> requests;
      for (std::size_t i = begin; i < std::min(n, begin + chunk); ++i) {
        requests.push_back({model::assemble_encoder_input(test[i].word, test[i].context, src, mode, config),
                            decode_lang});
      }
      for (auto& out : model::generate_batch(config, params, requests, mode, options.max_new_tokens)) {
        if (options.generator == Generator::pipeline) out = pipeline_translate(vocab, out, src, tgt);
        outputs.push_back(std::move(out));
      }
    }

    const std::size_t first = result.records.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Example& ex = test[i];
      ExampleRecord rec;
      rec.src = src;
      rec.tgt = tgt;
      rec.index = i;
      rec.word = ex.word;
      rec.output = std::move(outputs[i]);
      auto mix = language_mix_flag(rec.output, tgt, vocab);
      rec.language_mix = mix.mixed;
      rec.foreign = std::move(mix.foreign);
      rec.ignore_task = ignore_task_flag(rec.output, ex, tgt, vocab, options.ignore_threshold);
      rec.degenerate = rec.output.empty();
      rec.concept_f1 = concept_f1(rec.output, ex.def_concepts, vocab);
      rec.token_f1 = token_f1(rec.output, toy::trans_lingual_reference(vocab, ex, tgt));
      result.records.push_back(std::move(rec));
    }
    result.pairs.push_back(
        aggregate(std::span(result.records).subspan(first), src, tgt));
  }
  return result;
}

namespace {

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

json tokens_json(const Vocabulary& vocab, std::span<const TokenId> tokens) {
  json arr = json::array();
  for (auto t : tokens) arr.push_back(vocab.token(t));
  return arr;
}

}  // namespace

std::string records_jsonl(const Vocabulary& vocab, std::span<const ExampleRecord> records) {
  std::string out;
  for (const auto& r : records) {
    json j;
    j["src"] = vocab.code(r.src);
    j["tgt"] = vocab.code(r.tgt);
    j["index"] = r.index;
    j["word"] = tokens_json(vocab, r.word);
    j["output"] = tokens_json(vocab, r.output);
    j["flags"] = json{{"language_mix", r.language_mix},
                      {"ignore_task", r.ignore_task},
                      {"degenerate", r.degenerate},
                      {"foreign", tokens_json(vocab, r.foreign)}};
    j["concept_f1"] = r.concept_f1;
    j["token_f1"] = r.token_f1;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string pairs_csv(const Vocabulary& vocab, std::span<const PairResult> pairs) {
  std::string out =
      "src,tgt,n_examples,language_mix_rate,ignore_task_rate,degenerate_rate,concept_f1,mono_token_f1\n";
  for (const auto& p : pairs) {
    out += vocab.code(p.src) + "," + vocab.code(p.tgt) + "," + std::to_string(p.n_examples) + "," +
           fmt(p.language_mix_rate) + "," + fmt(p.ignore_task_rate) + "," + fmt(p.degenerate_rate) +
           "," + fmt(p.concept_f1) + "," + (p.mono() ? fmt(p.mono_token_f1) : std::string()) + "\n";
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

std::string relative_change(double value, double baseline) {
  if (baseline == 0.0) return value == 0.0 ? "+0.0%" : "n/a";
  char buf[64];
  const double pct = 100.0 * (value - baseline) / baseline;
  std::snprintf(buf, sizeof buf, "%+.1f%%", pct);
  return buf;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of no values");
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  return values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

namespace {

struct MetricDef {
  const char* name;
  double PairResult::*field;
  bool mono_only;
  bool cross_only;
};

constexpr MetricDef kMetrics[] = {
    {"language_mix_rate", &PairResult::language_mix_rate, false, true},
    {"ignore_task_rate", &PairResult::ignore_task_rate, false, true},
    {"concept_f1", &PairResult::concept_f1, false, false},
    {"mono_token_f1", &PairResult::mono_token_f1, true, false},
};

struct PairKey {
  LangId src;
  LangId tgt;
  bool pooled;  // pooled cross-lingual row
};

std::vector<double> seed_values(const ModeRuns& runs, const PairKey& key, const MetricDef& m) {
  std::vector<double> out;
  for (const auto& r : runs.seeds) {
    if (key.pooled) {
      out.push_back(cross_summary(r).*m.field);
      continue;
    }
    auto it = std::find_if(r.pairs.begin(), r.pairs.end(),
                           [&](const PairResult& p) { return p.src == key.src && p.tgt == key.tgt; });
    if (it == r.pairs.end()) throw std::invalid_argument("runs evaluated different language pairs");
    out.push_back((*it).*m.field);
  }
  return out;
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

std::string bar_chart(const std::string& title, const std::vector<std::string>& groups,
                      const std::vector<std::string>& modes,
                      const std::vector<std::vector<double>>& values) {
  static const char* colors[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"};
  const double bar_w = 14, gap = 18, left = 50, top = 40, plot_h = 200;
  const double group_w = bar_w * static_cast<double>(modes.size()) + gap;
  const double width = left + group_w * static_cast<double>(groups.size()) + 20;
  const double height = top + plot_h + 40 + 18 * static_cast<double>(modes.size());
  double vmax = 0.0;
  for (const auto& row : values) {
    for (double v : row) vmax = std::max(vmax, v);
  }
  if (vmax <= 0.0) vmax = 1.0;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << svg_escape(title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << width - 10 << "\" y2=\""
     << top + plot_h << "\" stroke=\"black\"/>\n";
  os << "<text x=\"4\" y=\"" << top + 4 << "\">" << fmt(vmax).substr(0, 5) << "</text>\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + group_w * static_cast<double>(g) + gap / 2;
    os << "<g class=\"pair\" data-pair=\"" << svg_escape(groups[g]) << "\">\n";
    for (std::size_t m = 0; m < modes.size(); ++m) {
      const double v = values[g][m];
      const double h = plot_h * v / vmax;
      os << "<rect x=\"" << gx + bar_w * static_cast<double>(m) << "\" y=\"" << top + plot_h - h
         << "\" width=\"" << bar_w - 2 << "\" height=\"" << h << "\" fill=\"" << colors[m % 6]
         << "\"><title>" << svg_escape(modes[m]) << " " << fmt(v) << "</title></rect>\n";
    }
    os << "<text x=\"" << gx << "\" y=\"" << top + plot_h + 14 << "\">" << svg_escape(groups[g])
       << "</text>\n</g>\n";
  }
  for (std::size_t m = 0; m < modes.size(); ++m) {
    const double y = top + plot_h + 34 + 18 * static_cast<double>(m);
    os << "<rect x=\"" << left << "\" y=\"" << y - 10 << "\" width=\"10\" height=\"10\" fill=\""
       << colors[m % 6] << "\"/><text x=\"" << left + 14 << "\" y=\"" << y << "\">"
       << svg_escape(modes[m]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

ComparisonReport compare_report(const Vocabulary& vocab, std::span<const ModeRuns> modes,
                                const std::string& baseline_mode) {
  if (modes.empty()) throw std::invalid_argument("compare_report: no modes");
  const ModeRuns* base = nullptr;
  std::size_t max_seeds = 0;
  std::optional<std::uint64_t> hash;
  for (const auto& m : modes) {
    if (m.seeds.empty()) throw std::invalid_argument("mode " + m.mode + " has no runs");
    if (m.mode == baseline_mode) base = &m;
    max_seeds = std::max(max_seeds, m.seeds.size());
    for (const auto& r : m.seeds) {
      if (hash && *hash != r.corpus_hash) {
        throw std::invalid_argument("compare_report: runs were evaluated on different corpora");
      }
      hash = r.corpus_hash;
    }
  }
  if (base == nullptr) throw std::invalid_argument("baseline mode '" + baseline_mode + "' not among runs");

  std::vector<PairKey> keys;
  for (const auto& p : modes[0].seeds[0].pairs) keys.push_back({p.src, p.tgt, false});
  const bool any_cross = std::any_of(keys.begin(), keys.end(), [](const PairKey& k) { return k.src != k.tgt; });
  if (any_cross) keys.push_back({0, 0, true});

  std::string csv = "src,tgt,metric,mode";
  for (std::size_t s = 0; s < max_seeds; ++s) csv += ",seed_" + std::to_string(s + 1);
  csv += ",median,rel_change_vs_" + baseline_mode + "\n";

  ComparisonReport report;
  std::vector<std::string> mode_names;
  for (const auto& m : modes) mode_names.push_back(m.mode);

  for (const auto& metric : kMetrics) {
    std::vector<std::string> groups;
    std::vector<std::vector<double>> chart_values;
    for (const auto& key : keys) {
      const bool mono = !key.pooled && key.src == key.tgt;
      if (metric.mono_only && !mono) continue;
      if (metric.cross_only && mono) continue;
      const std::string src = key.pooled ? "cross" : vocab.code(key.src);
      const std::string tgt = key.pooled ? "all" : vocab.code(key.tgt);
      const double base_median = median(seed_values(*base, key, metric));
      std::vector<double> medians;
      for (const auto& m : modes) {
        const auto values = seed_values(m, key, metric);
        const double med = median(values);
        medians.push_back(med);
        csv += src + "," + tgt + "," + metric.name + "," + m.mode;
        for (std::size_t s = 0; s < max_seeds; ++s) csv += "," + (s < values.size() ? fmt(values[s]) : "");
        csv += "," + fmt(med) + "," + relative_change(med, base_median) + "\n";
      }
      if (!key.pooled) {
        groups.push_back(src + "-" + tgt);
        chart_values.push_back(std::move(medians));
      }
    }
    if (!groups.empty()) {
      report.charts[metric.name] = bar_chart(std::string(metric.name) + " (median over seeds)", groups,
                                             mode_names, chart_values);
    }
  }
  report.csv = std::move(csv);
  return report;
}

}  // namespace xldg::eval
