#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xldg/numcore/adam.hpp"
#include "xldg/numcore/params.hpp"
#include "xldg/numcore/random.hpp"
#include "xldg/prompting.hpp"
#include "xldg/seq2seq.hpp"
#include "xldg/toylang.hpp"

namespace xldg::train {

using model::ModelConfig;
using num::Var;
using num::ParamSet;
using toy::Example;
using toy::LangId;
using toy::ToyCorpus;

enum class Mode { pretrain_mt, direct, prompt_combo, contrastive };
enum class Tuning { full, prompt_only };
/// automatic: paired batches for contrastive mode, mixed otherwise.
enum class SamplerKind { automatic, paired, mixed };

Mode parse_mode(std::string_view name);
std::string mode_name(Mode mode);
Tuning parse_tuning(std::string_view name);
std::string tuning_name(Tuning tuning);

/// Prompt layout used by a training mode.
model::PromptMode prompt_mode(Mode mode);

struct TrainConfig {
  Mode mode = Mode::contrastive;
  Tuning tuning = Tuning::full;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  double learning_rate = 3e-4;
  prompt::ContrastiveConfig contrastive;
  std::uint64_t seed = 1;
  /// Steps of translation pretraining (pretrain_translation only).
  std::size_t pretrain_steps = 3000;
  double clip_norm = 1.0;
  SamplerKind sampler = SamplerKind::automatic;
  /// Stop after this many optimizer steps in total; 0 means no cap.
  std::size_t max_steps = 0;
  /// Validation examples per language used for model selection; 0 = all.
  std::size_t val_examples = 0;
  std::size_t max_new_tokens = 16;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate(std::size_t n_langs) const;
};

/// A batch of examples. Paired batches hold two equally sized groups in two
/// different languages; mixed batches use group_i only.
struct Batch {
  std::vector<const Example*> group_i;
  std::vector<const Example*> group_j;
  LangId lang_i = 0;
  LangId lang_j = 0;
  bool paired = false;

  std::size_t size() const { return group_i.size() + group_j.size(); }
};

/// Unordered pair of distinct languages, uniform over all pairs, returned in
/// random order.
std::pair<LangId, LangId> sample_language_pair(num::Rng& rng, std::size_t n_langs);

/// Draws training batches without replacement within an epoch.
///
/// Paired: each batch picks a language pair, then floor(B/2) examples from
/// each language's shuffled stream. A stream that runs dry starts a fresh
/// pass; the epoch ends once every language has completed a pass. Groups
/// shrink together at the end of a pass, so they always have equal size.
/// Mixed: all languages shuffled together and cut into batches of B; the
/// last batch may be short.
class BatchSampler {
 public:
  BatchSampler(const ToyCorpus& corpus, SamplerKind kind, std::size_t batch_size, std::uint64_t seed);

  /// All batches of the next epoch.
  std::vector<Batch> epoch();

 private:
  std::vector<Batch> mixed_epoch();
  std::vector<Batch> paired_epoch();

  const ToyCorpus* corpus_;
  SamplerKind kind_;
  std::size_t batch_size_;
  num::Rng rng_;
  std::vector<std::vector<const Example*>> streams_;
  std::vector<std::size_t> cursor_;
};

struct LossBreakdown {
  double l_mle = 0.0;
  double l_c = 0.0;
  double l_final = 0.0;
  double d_p = 0.0;
  double d_n = 0.0;
};

struct BatchLoss {
  Var total;   // the optimized loss
  Var logits;  // decoder logits of all target tokens
  LossBreakdown values;
};

/// Builds the training loss of `batch` under the mode of `train_config` on
/// the graph of `m`. Contrastive mode needs a paired batch.
BatchLoss batch_loss(const model::ModelGraph& m, const Batch& batch, const TrainConfig& train_config);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameters, optimizer state and trainable mask of one run.
class Trainer {
 public:
  Trainer(const ModelConfig& config, ParamSet params, const TrainConfig& train_config);

  /// Loss of a batch under the configured mode without updating anything.
  LossBreakdown evaluate_loss(const Batch& batch);
  /// One optimizer step on the batch.
  LossBreakdown step(const Batch& batch);
  /// One translation step on (source sentence, source lang, target lang) items.
  LossBreakdown translation_step(const std::vector<std::vector<toy::TokenId>>& sources,
                                 const std::vector<LangId>& source_langs,
                                 const std::vector<std::vector<toy::TokenId>>& targets,
                                 const std::vector<LangId>& target_langs);

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const ModelConfig& model_config() const { return config_; }
  const TrainConfig& train_config() const { return train_config_; }
  const std::vector<bool>& trainable() const { return trainable_; }
  std::size_t steps_taken() const { return adam_.step_count; }

 private:
  LossBreakdown run(const Batch& batch, bool update);
  void apply(num::Graph& graph, const model::ModelGraph& model);

  ModelConfig config_;
  ParamSet params_;
  TrainConfig train_config_;
  std::vector<bool> trainable_;
  std::vector<std::size_t> trainable_index_;
  num::AdamState adam_;
  num::Rng dropout_rng_;
};

/// Mean token-F1 of greedy mono-lingual generations on the validation split.
double validation_token_f1(const ModelConfig& config, const ParamSet& params, const ToyCorpus& corpus,
                           model::PromptMode mode, std::size_t per_language, std::size_t max_new_tokens);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossBreakdown loss;
  std::optional<double> val_token_f1;  // set on the last step of an epoch
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double l_mle = 0.0;  // means over the epoch's steps
  double l_c = 0.0;
  double l_final = 0.0;
  double val_token_f1 = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_token_f1 = -1.0;
};

/// CSV with columns step,epoch,l_mle,l_c,l_final,val_token_f1.
std::string log_csv(const TrainLog& log);

struct TrainResult {
  ParamSet best;  // best by validation token-F1
  ParamSet last;
  TrainLog log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Full training run. `init` of nullptr starts from fresh parameters
/// seeded by config.seed. `on_epoch` is called after each epoch's validation.
TrainResult train(const ToyCorpus& corpus, const ModelConfig& config, const TrainConfig& train_config,
                  const ParamSet* init = nullptr, const EpochCallback& on_epoch = {});

struct PretrainResult {
  ParamSet params;
  std::vector<LossBreakdown> losses;
};

/// Sentence translation between distinct languages over lexicon-translated
/// training contexts. Runs train_config.pretrain_steps steps; 0 returns the
/// initialization unchanged.
PretrainResult pretrain_translation(const ToyCorpus& corpus, const ModelConfig& config,
                                    const TrainConfig& train_config, const ParamSet* init = nullptr);

/// Token accuracy of greedy translation of validation contexts over all
/// ordered pairs of distinct languages: matches at aligned positions divided
/// by the longer of output and reference, summed over sentences.
double translation_accuracy(const ModelConfig& config, const ParamSet& params, const ToyCorpus& corpus,
                            std::size_t per_language);

}  // namespace xldg::train
