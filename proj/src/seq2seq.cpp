#include "xldg/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "xldg/numcore/ops.hpp"

namespace xldg::model {

using num::AttentionSegment;
using num::Shape;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); };
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    fail("d_model must be a positive multiple of n_heads");
  }
  if (n_enc_layers == 0 || n_dec_layers == 0) fail("need at least one encoder and decoder layer");
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (n_task_tokens == 0) fail("n_task_tokens must be >= 1");
  if (vocab_size <= toy::kNumSpecials) fail("vocab_size must exceed the special tokens");
  if (n_languages == 0) fail("n_languages must be >= 1");
  if (max_len < n_task_tokens + 4) fail("max_len too small for the prompt slots");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
}

namespace {

void check_lang(LangId lang, const ModelConfig& config) {
  if (lang >= config.n_languages) {
    throw std::out_of_range("unknown language id " + std::to_string(lang) + " (model has " +
                            std::to_string(config.n_languages) + ")");
  }
}

void push_prompts(AssembledInput& in, LangId lang, PromptMode mode, const ModelConfig& config) {
  in.lang_position = 0;
  in.slots.push_back({SlotKind::language, lang});
  if (mode == PromptMode::prompted) {
    in.has_task_span = true;
    in.task_first = 1;
    in.task_last = config.n_task_tokens;
    for (std::size_t k = 0; k < config.n_task_tokens; ++k) in.slots.push_back({SlotKind::task, k});
  }
  in.first_token_position = in.slots.size();
}

}  // namespace

AssembledInput assemble_encoder_input(std::span<const TokenId> word, std::span<const TokenId> context,
                                      LangId source_lang, PromptMode mode, const ModelConfig& config) {
  check_lang(source_lang, config);
  AssembledInput in;
  push_prompts(in, source_lang, mode, config);
  for (auto t : word) in.slots.push_back({SlotKind::token, t});
  in.slots.push_back({SlotKind::token, toy::kSep});
  if (in.slots.size() > config.max_len) {
    throw std::invalid_argument("word does not fit in max_len " + std::to_string(config.max_len));
  }
  for (auto t : context) {
    if (in.slots.size() == config.max_len) {
      in.truncated = true;
      break;
    }
    in.slots.push_back({SlotKind::token, t});
  }
  return in;
}

AssembledInput assemble_sentence_input(std::span<const TokenId> tokens, LangId source_lang,
                                       const ModelConfig& config) {
  check_lang(source_lang, config);
  AssembledInput in;
  push_prompts(in, source_lang, PromptMode::direct, config);
  for (auto t : tokens) {
    if (in.slots.size() == config.max_len) {
      in.truncated = true;
      break;
    }
    in.slots.push_back({SlotKind::token, t});
  }
  if (in.token_count() == 0) in.slots.push_back({SlotKind::token, toy::kSep});
  return in;
}

AssembledInput assemble_decoder_input(std::span<const TokenId> prefix, LangId target_lang,
                                      PromptMode mode, const ModelConfig& config) {
  check_lang(target_lang, config);
  AssembledInput in;
  in.causal = true;
  push_prompts(in, target_lang, mode, config);
  in.slots.push_back({SlotKind::token, toy::kBos});
  for (auto t : prefix) {
    if (in.slots.size() == config.max_len) {
      in.truncated = true;
      break;
    }
    in.slots.push_back({SlotKind::token, t});
  }
  return in;
}

std::vector<TokenId> decoder_targets(std::span<const TokenId> prefix, const AssembledInput& decoder) {
  const std::size_t kept = decoder.token_count() - 1;
  std::vector<TokenId> out(prefix.begin(), prefix.begin() + static_cast<std::ptrdiff_t>(kept));
  out.push_back(toy::kEos);
  return out;
}

Tensor positional_encoding(std::size_t len, std::size_t d_model) {
  Tensor pe(Shape{len, d_model}, 0.0);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      pe.at(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d_model) pe.at(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  num::Rng rng(seed);
  const std::size_t d = config.d_model;
  ParamSet p;
  auto normal = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape), 0.0);
    for (auto& x : t.data()) x = stddev * num::standard_normal(rng);
    return t;
  };
  auto add_linear = [&](const std::string& prefix, std::size_t in, std::size_t out,
                        const char* w, const char* b) {
    p.add(prefix + w, normal(Shape{in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
    p.add(prefix + b, Tensor(Shape{out}, 0.0));
  };
  auto add_norm = [&](const std::string& prefix) {
    p.add(prefix + ".g", Tensor(Shape{d}, 1.0));
    p.add(prefix + ".b", Tensor(Shape{d}, 0.0));
  };
  auto add_attn = [&](const std::string& prefix) {
    add_linear(prefix, d, d, ".wq", ".bq");
    add_linear(prefix, d, d, ".wk", ".bk");
    add_linear(prefix, d, d, ".wv", ".bv");
    add_linear(prefix, d, d, ".wo", ".bo");
  };
  auto add_ffn = [&](const std::string& prefix) {
    add_linear(prefix, d, config.ffn_dim, ".w1", ".b1");
    add_linear(prefix, config.ffn_dim, d, ".w2", ".b2");
  };

  p.add("tok_embed", normal(Shape{config.vocab_size, d}, 1.0));
  p.add(std::string(kLangPrompt), normal(Shape{config.n_languages, d}, 1.0));
  p.add(std::string(kTaskPrompt), normal(Shape{config.n_task_tokens, d}, 1.0));
  for (std::size_t l = 0; l < config.n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    add_norm(pre + ".ln1");
    add_attn(pre + ".attn");
    add_norm(pre + ".ln2");
    add_ffn(pre + ".ffn");
  }
  add_norm("enc.ln_f");
  for (std::size_t l = 0; l < config.n_dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    add_norm(pre + ".ln1");
    add_attn(pre + ".self");
    add_norm(pre + ".ln2");
    add_attn(pre + ".cross");
    add_norm(pre + ".ln3");
    add_ffn(pre + ".ffn");
  }
  add_norm("dec.ln_f");
  add_linear("out", d, config.vocab_size, ".w", ".b");
  return p;
}

ModelGraph::ModelGraph(Graph& graph, const ModelConfig& config, const ParamSet& params,
                       const std::vector<bool>* trainable, num::Rng* dropout_rng)
    : graph_(&graph), config_(&config), params_(&params), dropout_rng_(dropout_rng) {
  vars_.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool train = trainable == nullptr || (*trainable)[i];
    vars_.push_back(train ? graph.variable(params[i]) : graph.constant(params[i]));
  }
}

ModelGraph::ModelGraph(Graph& graph, const ModelConfig& config, const ParamSet& params, std::vector<Var> vars)
    : graph_(&graph), config_(&config), params_(&params), vars_(std::move(vars)), dropout_rng_(nullptr) {
  if (vars_.size() != params.size()) throw std::invalid_argument("ModelGraph: one variable per parameter required");
}

Var ModelGraph::param(std::string_view name) const { return vars_[params_->index(name)]; }

namespace {

Var norm(const ModelGraph& m, Var x, const std::string& prefix) {
  return num::layer_norm(x, m.param(prefix + ".g"), m.param(prefix + ".b"));
}

Var drop(const ModelGraph& m, Var x) {
  if (m.config().dropout <= 0.0 || m.dropout_rng() == nullptr) return x;
  return num::dropout(x, m.config().dropout, *m.dropout_rng());
}

Var attention_block(const ModelGraph& m, const std::string& prefix, Var xq, Var xkv,
                    std::span<const AttentionSegment> segs, bool causal) {
  Var q = num::linear(xq, m.param(prefix + ".wq"), m.param(prefix + ".bq"));
  Var k = num::linear(xkv, m.param(prefix + ".wk"), m.param(prefix + ".bk"));
  Var v = num::linear(xkv, m.param(prefix + ".wv"), m.param(prefix + ".bv"));
  Var a = num::attention(q, k, v, m.config().n_heads, segs, causal);
  return num::linear(a, m.param(prefix + ".wo"), m.param(prefix + ".bo"));
}

Var ffn_block(const ModelGraph& m, const std::string& prefix, Var x) {
  Var h = num::gelu(num::linear(x, m.param(prefix + ".w1"), m.param(prefix + ".b1")));
  return num::linear(h, m.param(prefix + ".w2"), m.param(prefix + ".b2"));
}

const Tensor& cached_positional_encoding(std::size_t len, std::size_t d_model) {
  thread_local std::map<std::size_t, Tensor> cache;
  auto it = cache.find(d_model);
  if (it == cache.end() || it->second.rows() < len) {
    const std::size_t rows = std::max<std::size_t>(len, 128);
    it = cache.insert_or_assign(d_model, positional_encoding(rows, d_model)).first;
  }
  return it->second;
}

// Embeds packed slots. Prompt slots read the prompt tables, token slots the
// token embedding table; sinusoidal positions restart per input.
Var embed(const ModelGraph& m, std::span<const AssembledInput> inputs,
          std::vector<std::size_t>& offsets, std::vector<std::size_t>& lengths) {
  const auto& cfg = m.config();
  const std::size_t n_lang = cfg.n_languages, n_task = cfg.n_task_tokens;
  std::vector<std::size_t> ids;
  std::size_t longest = 0;
  for (const auto& in : inputs) {
    offsets.push_back(ids.size());
    lengths.push_back(in.size());
    longest = std::max(longest, in.size());
    for (const auto& s : in.slots) {
      switch (s.kind) {
        case SlotKind::language: ids.push_back(s.index); break;
        case SlotKind::task: ids.push_back(n_lang + s.index); break;
        case SlotKind::token: ids.push_back(n_lang + n_task + s.index); break;
      }
    }
  }
  if (longest > cfg.max_len) throw std::invalid_argument("input longer than max_len");
  const std::vector<Var> tables{m.param(kLangPrompt), m.param(kTaskPrompt), m.param("tok_embed")};
  Var x = num::gather_rows(num::concat_rows(tables), ids);

  const Tensor& pe_table = cached_positional_encoding(longest, cfg.d_model);
  Tensor pe(Shape{ids.size(), cfg.d_model}, 0.0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::copy(pe_table.raw(), pe_table.raw() + lengths[i] * cfg.d_model,
              pe.raw() + offsets[i] * cfg.d_model);
  }
  return drop(m, num::add(x, m.graph().constant(std::move(pe))));
}

}  // namespace

Encoded encode(const ModelGraph& m, std::span<const AssembledInput> inputs) {
  Encoded enc;
  Var x = embed(m, inputs, enc.offsets, enc.lengths);
  std::vector<AttentionSegment> segs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    segs.push_back({enc.offsets[i], enc.lengths[i], enc.offsets[i], enc.lengths[i]});
  }
  for (std::size_t l = 0; l < m.config().n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    Var h = norm(m, x, pre + ".ln1");
    x = num::add(x, drop(m, attention_block(m, pre + ".attn", h, h, segs, false)));
    x = num::add(x, drop(m, ffn_block(m, pre + ".ffn", norm(m, x, pre + ".ln2"))));
  }
  enc.states = norm(m, x, "enc.ln_f");
  return enc;
}

Var decode_logits(const ModelGraph& m, const Encoded& encoded,
                  std::span<const AssembledInput> decoders, bool last_only) {
  if (decoders.size() != encoded.offsets.size()) {
    throw std::invalid_argument("decode_logits: decoder count differs from encoder count");
  }
  std::vector<std::size_t> offsets, lengths;
  Var y = embed(m, decoders, offsets, lengths);
  std::vector<AttentionSegment> self_segs, cross_segs;
  for (std::size_t i = 0; i < decoders.size(); ++i) {
    self_segs.push_back({offsets[i], lengths[i], offsets[i], lengths[i]});
    cross_segs.push_back({offsets[i], lengths[i], encoded.offsets[i], encoded.lengths[i]});
  }
  for (std::size_t l = 0; l < m.config().n_dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    Var h = norm(m, y, pre + ".ln1");
    y = num::add(y, drop(m, attention_block(m, pre + ".self", h, h, self_segs, true)));
    y = num::add(y, drop(m, attention_block(m, pre + ".cross", norm(m, y, pre + ".ln2"),
                                            encoded.states, cross_segs, false)));
    y = num::add(y, drop(m, ffn_block(m, pre + ".ffn", norm(m, y, pre + ".ln3"))));
  }
  y = norm(m, y, "dec.ln_f");

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < decoders.size(); ++i) {
    const std::size_t first = last_only ? lengths[i] - 1 : decoders[i].first_token_position;
    for (std::size_t p = first; p < lengths[i]; ++p) rows.push_back(offsets[i] + p);
  }
  Var selected = num::gather_rows(y, rows);
  return num::linear(selected, m.param("out.w"), m.param("out.b"));
}

Tensor encode_states(const ModelConfig& config, const ParamSet& params, const AssembledInput& input) {
  Graph g;
  g.set_recording(false);
  ModelGraph m(g, config, params);
  return encode(m, std::span<const AssembledInput>(&input, 1)).states.value();
}

Tensor decode_logits(const ModelConfig& config, const ParamSet& params, const Tensor& states,
                     const AssembledInput& decoder) {
  Graph g;
  g.set_recording(false);
  ModelGraph m(g, config, params);
  Encoded enc{g.constant(states), {0}, {states.rows()}};
  return decode_logits(m, enc, std::span<const AssembledInput>(&decoder, 1)).value();
}

std::vector<std::vector<TokenId>> generate_batch(const ModelConfig& config, const ParamSet& params,
                                                 std::span<const GenerationRequest> requests,
                                                 PromptMode mode, std::size_t max_new_tokens) {
  std::vector<std::vector<TokenId>> outputs(requests.size());
  if (requests.empty()) return outputs;
  for (const auto& r : requests) check_lang(r.target_lang, config);

  Tensor states;
  std::vector<std::size_t> enc_offsets, enc_lengths;
  {
    Graph g;
    g.set_recording(false);
    ModelGraph m(g, config, params);
    std::vector<AssembledInput> inputs;
    for (const auto& r : requests) inputs.push_back(r.encoder);
    Encoded enc = encode(m, inputs);
    states = enc.states.value();
    enc_offsets = enc.offsets;
    enc_lengths = enc.lengths;
  }

  std::vector<std::size_t> active(requests.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  for (std::size_t step = 0; step < max_new_tokens && !active.empty(); ++step) {
    Graph g;
    g.set_recording(false);
    ModelGraph m(g, config, params);
    Encoded enc{g.constant(states), {}, {}};
    std::vector<AssembledInput> decoders;
    std::vector<std::size_t> kept;
    for (auto i : active) {
      AssembledInput dec = assemble_decoder_input(outputs[i], requests[i].target_lang, mode, config);
      if (dec.truncated) continue;  // no room for another token
      enc.offsets.push_back(enc_offsets[i]);
      enc.lengths.push_back(enc_lengths[i]);
      decoders.push_back(std::move(dec));
      kept.push_back(i);
    }
    if (kept.empty()) break;
    const Tensor logits = decode_logits(m, enc, decoders, true).value();
    const std::size_t V = logits.cols();
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < kept.size(); ++r) {
      const double* row = logits.raw() + r * V;
      const auto best = static_cast<TokenId>(std::max_element(row, row + V) - row);
      if (best == toy::kEos) continue;
      outputs[kept[r]].push_back(best);
      still.push_back(kept[r]);
    }
    active = std::move(still);
  }
  return outputs;
}

std::vector<TokenId> generate(const ModelConfig& config, const ParamSet& params,
                              std::span<const TokenId> word, std::span<const TokenId> context,
                              LangId source_lang, LangId target_lang, PromptMode mode,
                              std::size_t max_new_tokens) {
  check_lang(target_lang, config);
  GenerationRequest req{assemble_encoder_input(word, context, source_lang, mode, config), target_lang};
  return generate_batch(config, params, std::span<const GenerationRequest>(&req, 1), mode,
                        max_new_tokens)[0];
}

}  // namespace xldg::model
