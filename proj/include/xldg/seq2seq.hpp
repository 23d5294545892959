#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xldg/numcore/graph.hpp"
#include "xldg/numcore/params.hpp"
#include "xldg/numcore/random.hpp"
#include "xldg/toylang.hpp"

namespace xldg::model {

using num::Graph;
using num::ParamSet;
using num::Tensor;
using num::Var;
using toy::LangId;
using toy::TokenId;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_len = 128;
  std::size_t vocab_size = 0;
  std::size_t n_languages = 0;
  std::size_t n_task_tokens = 100;
  double dropout = 0.0;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// direct: no task span (plain fine-tuning); prompted: task span after the
/// language slot on both encoder and decoder.
enum class PromptMode { direct, prompted };

enum class SlotKind { language, task, token };

struct Slot {
  SlotKind kind = SlotKind::token;
  std::size_t index = 0;  // language id, task-prompt row, or token id
  friend bool operator==(const Slot&, const Slot&) = default;
};

/// Slot layout fed to the encoder or decoder.
///
/// Encoder: [LANG(src)] [TASK_1..TASK_n] [word...] [SEP] [context...]
/// Decoder: [LANG(tgt)] [TASK_1..TASK_n] [BOS] [definition...]
/// The task span is absent in direct mode.
struct AssembledInput {
  std::vector<Slot> slots;
  std::size_t lang_position = 0;
  bool has_task_span = false;
  std::size_t task_first = 0;  // inclusive
  std::size_t task_last = 0;   // inclusive
  /// First token slot (word for encoders, BOS for decoders).
  std::size_t first_token_position = 0;
  bool causal = false;
  bool truncated = false;

  std::size_t size() const { return slots.size(); }
  std::size_t token_count() const { return slots.size() - first_token_position; }
};

AssembledInput assemble_encoder_input(std::span<const TokenId> word, std::span<const TokenId> context,
                                      LangId source_lang, PromptMode mode, const ModelConfig& config);
/// Encoder input for sentence translation: [LANG(src)] [tokens...].
AssembledInput assemble_sentence_input(std::span<const TokenId> tokens, LangId source_lang,
                                       const ModelConfig& config);
/// Teacher-forcing decoder input; `prefix` excludes BOS.
AssembledInput assemble_decoder_input(std::span<const TokenId> prefix, LangId target_lang,
                                      PromptMode mode, const ModelConfig& config);
/// Next-token targets aligned with the decoder's token slots: prefix + EOS.
std::vector<TokenId> decoder_targets(std::span<const TokenId> prefix, const AssembledInput& decoder);

/// Fresh parameters with the fixed naming scheme used by checkpoints.
ParamSet init_params(const ModelConfig& config, std::uint64_t seed);

inline constexpr std::string_view kTaskPrompt = "task_prompt";
inline constexpr std::string_view kLangPrompt = "lang_prompt";

/// Sinusoidal positional encodings for positions [0, len).
Tensor positional_encoding(std::size_t len, std::size_t d_model);

/// Parameters placed on a graph. Parameters marked non-trainable become
/// constants and receive no gradient.
class ModelGraph {
 public:
  ModelGraph(Graph& graph, const ModelConfig& config, const ParamSet& params,
             const std::vector<bool>* trainable = nullptr, num::Rng* dropout_rng = nullptr);
  /// Uses existing variables, one per parameter of `params` in order.
  ModelGraph(Graph& graph, const ModelConfig& config, const ParamSet& params, std::vector<Var> vars);

  Graph& graph() const { return *graph_; }
  const ModelConfig& config() const { return *config_; }
  Var param(std::string_view name) const;
  std::span<const Var> vars() const { return vars_; }
  num::Rng* dropout_rng() const { return dropout_rng_; }

 private:
  Graph* graph_;
  const ModelConfig* config_;
  const ParamSet* params_;
  std::vector<Var> vars_;
  num::Rng* dropout_rng_;
};

/// Encoder states of several inputs packed row-wise.
struct Encoded {
  Var states;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;
};

Encoded encode(const ModelGraph& model, std::span<const AssembledInput> inputs);

/// Next-token logits at the decoder token slots (BOS onward), packed in
/// input order. With last_only, one row per input (its final slot).
Var decode_logits(const ModelGraph& model, const Encoded& encoded,
                  std::span<const AssembledInput> decoders, bool last_only = false);

/// Final-layer encoder states of one input, [len × d_model].
Tensor encode_states(const ModelConfig& config, const ParamSet& params, const AssembledInput& input);
/// Logits for one decoder input given encoder states.
Tensor decode_logits(const ModelConfig& config, const ParamSet& params, const Tensor& states,
                     const AssembledInput& decoder);

struct GenerationRequest {
  AssembledInput encoder;
  LangId target_lang = 0;
};

/// Greedy decoding of a batch of requests in lockstep. Outputs exclude BOS
/// and EOS.
std::vector<std::vector<TokenId>> generate_batch(const ModelConfig& config, const ParamSet& params,
                                                 std::span<const GenerationRequest> requests,
                                                 PromptMode mode, std::size_t max_new_tokens);

/// Greedy definition for a word in context, decoded with the target language
/// prompt. Throws std::out_of_range for unknown language ids.
std::vector<TokenId> generate(const ModelConfig& config, const ParamSet& params,
                              std::span<const TokenId> word, std::span<const TokenId> context,
                              LangId source_lang, LangId target_lang, PromptMode mode,
                              std::size_t max_new_tokens);

}  // namespace xldg::model
