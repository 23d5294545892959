#include "xldg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "xldg/evalkit.hpp"
#include "xldg/numcore/ops.hpp"

namespace xldg::train {

using model::AssembledInput;
using model::PromptMode;
using num::Graph;
using num::Tensor;
using num::Var;
using toy::TokenId;

Mode parse_mode(std::string_view name) {
  if (name == "pretrain_mt" || name == "pretrain-mt") return Mode::pretrain_mt;
  if (name == "direct") return Mode::direct;
  if (name == "prompt_combo" || name == "prompt-combo") return Mode::prompt_combo;
  if (name == "contrastive") return Mode::contrastive;
  throw std::invalid_argument("unknown training mode '" + std::string(name) + "'");
}

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::pretrain_mt: return "pretrain-mt";
    case Mode::direct: return "direct";
    case Mode::prompt_combo: return "prompt-combo";
    case Mode::contrastive: return "contrastive";
  }
  return "?";
}

Tuning parse_tuning(std::string_view name) {
  if (name == "full") return Tuning::full;
  if (name == "prompt_only" || name == "prompt-only") return Tuning::prompt_only;
  throw std::invalid_argument("unknown tuning '" + std::string(name) + "'");
}

std::string tuning_name(Tuning tuning) { return tuning == Tuning::full ? "full" : "prompt-only"; }

PromptMode prompt_mode(Mode mode) {
  return mode == Mode::prompt_combo || mode == Mode::contrastive ? PromptMode::prompted
                                                                 : PromptMode::direct;
}

void TrainConfig::validate(std::size_t n_langs) const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("TrainConfig: " + what); };
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (!(clip_norm > 0.0)) fail("clip_norm must be > 0");
  contrastive.validate();
  if ((mode == Mode::contrastive || mode == Mode::pretrain_mt) && n_langs < 2) {
    fail(mode_name(mode) + " mode needs at least 2 languages");
  }
  if (mode == Mode::contrastive && batch_size < 2) fail("contrastive batches need batch_size >= 2");
  if (mode == Mode::contrastive && sampler == SamplerKind::mixed) {
    fail("contrastive mode needs paired batches");
  }
  if (tuning == Tuning::prompt_only && prompt_mode(mode) != PromptMode::prompted) {
    fail("prompt-only tuning needs a mode with task prompts");
  }
}

std::pair<LangId, LangId> sample_language_pair(num::Rng& rng, std::size_t n_langs) {
  if (n_langs < 2) throw std::invalid_argument("language pairs need at least 2 languages");
  const LangId a = num::uniform_index(rng, n_langs);
  LangId b = num::uniform_index(rng, n_langs - 1);
  if (b >= a) ++b;
  return {a, b};
}

BatchSampler::BatchSampler(const ToyCorpus& corpus, SamplerKind kind, std::size_t batch_size,
                           std::uint64_t seed)
    : corpus_(&corpus), kind_(kind), batch_size_(batch_size), rng_(seed) {
  if (kind_ == SamplerKind::automatic) {
    throw std::invalid_argument("BatchSampler needs an explicit paired or mixed kind");
  }
  if (batch_size_ == 0 || (kind_ == SamplerKind::paired && batch_size_ < 2)) {
    throw std::invalid_argument("batch size too small for the sampler");
  }
  if (kind_ == SamplerKind::paired && corpus.splits.size() < 2) {
    throw std::invalid_argument("paired batches need at least 2 languages");
  }
  for (const auto& s : corpus.splits) {
    std::vector<const Example*> stream;
    for (const auto& ex : s.train) stream.push_back(&ex);
    if (stream.empty()) throw std::invalid_argument("a language has no training examples");
    streams_.push_back(std::move(stream));
  }
  cursor_.assign(streams_.size(), 0);
}

std::vector<Batch> BatchSampler::epoch() {
  return kind_ == SamplerKind::paired ? paired_epoch() : mixed_epoch();
}

std::vector<Batch> BatchSampler::mixed_epoch() {
  std::vector<const Example*> all;
  for (const auto& s : streams_) all.insert(all.end(), s.begin(), s.end());
  num::shuffle(std::span(all), rng_);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < all.size(); i += batch_size_) {
    Batch b;
    b.group_i.assign(all.begin() + static_cast<std::ptrdiff_t>(i),
                     all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), i + batch_size_)));
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<Batch> BatchSampler::paired_epoch() {
  const std::size_t n = streams_.size();
  for (std::size_t l = 0; l < n; ++l) {
    num::shuffle(std::span(streams_[l]), rng_);
    cursor_[l] = 0;
  }
  std::vector<bool> done(n, false);
  const std::size_t group = batch_size_ / 2;
  std::vector<Batch> out;
  while (std::find(done.begin(), done.end(), false) != done.end()) {
    const auto [a, b] = sample_language_pair(rng_, n);
    for (LangId l : {a, b}) {
      if (cursor_[l] == streams_[l].size()) {
        num::shuffle(std::span(streams_[l]), rng_);
        cursor_[l] = 0;
      }
    }
    const std::size_t k = std::min({group, streams_[a].size() - cursor_[a], streams_[b].size() - cursor_[b]});
    Batch batch;
    batch.paired = true;
    batch.lang_i = a;
    batch.lang_j = b;
    for (std::size_t t = 0; t < k; ++t) {
      batch.group_i.push_back(streams_[a][cursor_[a]++]);
      batch.group_j.push_back(streams_[b][cursor_[b]++]);
    }
    for (LangId l : {a, b}) {
      if (cursor_[l] == streams_[l].size()) done[l] = true;
    }
    out.push_back(std::move(batch));
  }
  return out;
}

namespace {

std::vector<bool> trainable_mask(const ParamSet& params, Tuning tuning) {
  std::vector<bool> mask(params.size(), tuning == Tuning::full);
  if (tuning == Tuning::prompt_only) mask[params.index(model::kTaskPrompt)] = true;
  return mask;
}

std::string tensor_stats(const std::string& name, const Tensor& t) {
  double sum = 0.0, sq = 0.0, max_abs = 0.0;
  std::size_t bad = 0;
  for (double x : t.data()) {
    if (!std::isfinite(x)) {
      ++bad;
      continue;
    }
    sum += x;
    sq += x * x;
    max_abs = std::max(max_abs, std::fabs(x));
  }
  const double n = static_cast<double>(t.size());
  const double mean = sum / n;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s%s: mean %.4g std %.4g max|x| %.4g non-finite %zu", name.c_str(),
                num::shape_to_string(t.shape()).c_str(), mean, std::sqrt(std::max(0.0, sq / n - mean * mean)),
                max_abs, bad);
  return buf;
}

struct MleParts {
  Var loss;
  Var logits;
  model::Encoded encoded;
};

MleParts mle_loss(const model::ModelGraph& m, const std::vector<AssembledInput>& encoders,
                  const std::vector<AssembledInput>& decoders, const std::vector<std::size_t>& targets) {
  MleParts out;
  out.encoded = model::encode(m, encoders);
  out.logits = model::decode_logits(m, out.encoded, decoders);
  out.loss = num::cross_entropy(out.logits, targets, toy::kPad);
  return out;
}

}  // namespace

Trainer::Trainer(const ModelConfig& config, ParamSet params, const TrainConfig& train_config)
    : config_(config),
      params_(std::move(params)),
      train_config_(train_config),
      dropout_rng_(num::mix_seed(train_config.seed, 3)) {
  config_.validate();
  trainable_ = trainable_mask(params_, train_config_.tuning);
  std::vector<Tensor> selected;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (trainable_[i]) {
      trainable_index_.push_back(i);
      selected.push_back(params_[i]);
    }
  }
  adam_ = num::make_adam_state(selected, train_config_.learning_rate);
}

void Trainer::apply(Graph&, const model::ModelGraph& m) {
  std::vector<Tensor> grads, values;
  grads.reserve(trainable_index_.size());
  values.reserve(trainable_index_.size());
  for (auto i : trainable_index_) {
    grads.push_back(m.vars()[i].grad());
    values.push_back(std::move(params_[i]));
  }
  num::clip_global_norm(grads, train_config_.clip_norm);
  num::adam_step(values, grads, adam_);
  for (std::size_t k = 0; k < trainable_index_.size(); ++k) {
    params_[trainable_index_[k]] = std::move(values[k]);
  }
}

BatchLoss batch_loss(const model::ModelGraph& m, const Batch& batch, const TrainConfig& tc) {
  if (batch.size() == 0) throw std::invalid_argument("empty batch");
  const Mode mode = tc.mode;
  if (mode == Mode::pretrain_mt) throw std::invalid_argument("use translation_step for pretraining");
  const bool contrastive = mode == Mode::contrastive;
  if (contrastive && (!batch.paired || batch.group_i.empty() ||
                      batch.group_i.size() != batch.group_j.size() || batch.lang_i == batch.lang_j)) {
    throw std::invalid_argument("contrastive steps need two equal groups in distinct languages");
  }
  const ModelConfig& config = m.config();
  const PromptMode pm = prompt_mode(mode);

  std::vector<const Example*> examples(batch.group_i);
  examples.insert(examples.end(), batch.group_j.begin(), batch.group_j.end());
  std::vector<AssembledInput> encoders, decoders;
  std::vector<std::size_t> targets;
  for (const Example* ex : examples) {
    encoders.push_back(model::assemble_encoder_input(ex->word, ex->context, ex->lang, pm, config));
    decoders.push_back(model::assemble_decoder_input(ex->definition, ex->lang, pm, config));
    const auto t = model::decoder_targets(ex->definition, decoders.back());
    targets.insert(targets.end(), t.begin(), t.end());
  }
  MleParts mle = mle_loss(m, encoders, decoders, targets);

  BatchLoss out;
  out.logits = mle.logits;
  out.total = mle.loss;
  if (contrastive) {
    const auto& cc = tc.contrastive;
    auto group_states = [&](std::size_t begin, std::size_t end) {
      std::vector<Var> tasks, langs;
      for (std::size_t e = begin; e < end; ++e) {
        auto states = prompt::extract_prompt_states(mle.encoded.states, encoders[e], mle.encoded.offsets[e]);
        tasks.push_back(prompt::pool(states.task, states.lang, cc.pooling));
        langs.push_back(states.lang);
      }
      return std::pair{prompt::average(tasks), prompt::average(langs)};
    };
    const std::size_t half = batch.group_i.size();
    const auto [task_i, lang_i] = group_states(0, half);
    const auto [task_j, lang_j] = group_states(half, examples.size());
    const auto c = prompt::contrastive_loss(task_i, task_j, lang_i, lang_j, cc);
    out.total = prompt::combined_loss(mle.loss, c.loss, cc.lambda);
    out.values.l_c = c.loss.value().item();
    out.values.d_p = c.d_p.value().item();
    out.values.d_n = c.d_n.value().item();
  }
  out.values.l_mle = mle.loss.value().item();
  out.values.l_final = out.total.value().item();
  return out;
}

LossBreakdown Trainer::run(const Batch& batch, bool update) {
  Graph g;
  g.set_recording(update);
  model::ModelGraph m(g, config_, params_, &trainable_,
                      config_.dropout > 0.0 && update ? &dropout_rng_ : nullptr);
  const BatchLoss bl = batch_loss(m, batch, train_config_);
  const LossBreakdown& out = bl.values;

  if (!std::isfinite(out.l_final)) {
    std::ostringstream os;
    os << "non-finite loss at step " << adam_.step_count + 1 << " (l_mle " << out.l_mle << ", l_c "
       << out.l_c << ")\n  " << tensor_stats("out.w", params_.get("out.w")) << "\n  "
       << tensor_stats("out.b", params_.get("out.b")) << "\n  " << tensor_stats("logits", bl.logits.value());
    throw TrainingDiverged(os.str());
  }
  if (update) {
    g.backward(bl.total);
    apply(g, m);
  }
  return out;
}

LossBreakdown Trainer::evaluate_loss(const Batch& batch) { return run(batch, false); }

LossBreakdown Trainer::step(const Batch& batch) { return run(batch, true); }

LossBreakdown Trainer::translation_step(const std::vector<std::vector<TokenId>>& sources,
                                        const std::vector<LangId>& source_langs,
                                        const std::vector<std::vector<TokenId>>& targets_in,
                                        const std::vector<LangId>& target_langs) {
  if (sources.empty() || sources.size() != source_langs.size() || sources.size() != targets_in.size() ||
      sources.size() != target_langs.size()) {
    throw std::invalid_argument("translation_step: mismatched item lists");
  }
  Graph g;
  model::ModelGraph m(g, config_, params_, &trainable_, config_.dropout > 0.0 ? &dropout_rng_ : nullptr);
  std::vector<AssembledInput> encoders, decoders;
  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    encoders.push_back(model::assemble_sentence_input(sources[i], source_langs[i], config_));
    decoders.push_back(model::assemble_decoder_input(targets_in[i], target_langs[i], PromptMode::direct, config_));
    const auto t = model::decoder_targets(targets_in[i], decoders.back());
    targets.insert(targets.end(), t.begin(), t.end());
  }
  MleParts mle = mle_loss(m, encoders, decoders, targets);
  LossBreakdown out;
  out.l_mle = out.l_final = mle.loss.value().item();
  if (!std::isfinite(out.l_final)) {
    throw TrainingDiverged("non-finite translation loss at step " + std::to_string(adam_.step_count + 1) +
                           "\n  " + tensor_stats("out.w", params_.get("out.w")) + "\n  " +
                           tensor_stats("logits", mle.logits.value()));
  }
  g.backward(mle.loss);
  apply(g, m);
  return out;
}

double validation_token_f1(const ModelConfig& config, const ParamSet& params, const ToyCorpus& corpus,
                           PromptMode mode, std::size_t per_language, std::size_t max_new_tokens) {
  double total = 0.0;
  std::size_t count = 0;
  for (LangId l = 0; l < corpus.splits.size(); ++l) {
    const auto& valid = corpus.splits[l].valid;
    const std::size_t n = per_language ? std::min(per_language, valid.size()) : valid.size();
    for (std::size_t begin = 0; begin < n; begin += 64) {
      std::vector<model::GenerationRequest> requests;
      const std::size_t end = std::min(n, begin + 64);
      for (std::size_t i = begin; i < end; ++i) {
        requests.push_back({model::assemble_encoder_input(valid[i].word, valid[i].context, l, mode, config), l});
      }
      const auto outputs = model::generate_batch(config, params, requests, mode, max_new_tokens);
      for (std::size_t i = begin; i < end; ++i) {
        total += eval::token_f1(outputs[i - begin], valid[i].definition);
        ++count;
      }
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

std::string log_csv(const TrainLog& log) {
  std::string out = "step,epoch,l_mle,l_c,l_final,val_token_f1\n";
  char buf[256];
  for (const auto& s : log.steps) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,", s.step, s.epoch, s.loss.l_mle, s.loss.l_c,
                  s.loss.l_final);
    out += buf;
    if (s.val_token_f1) {
      std::snprintf(buf, sizeof buf, "%.17g", *s.val_token_f1);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

TrainResult train(const ToyCorpus& corpus, const ModelConfig& config, const TrainConfig& tc,
                  const ParamSet* init, const EpochCallback& on_epoch) {
  tc.validate(corpus.splits.size());
  if (tc.mode == Mode::pretrain_mt) {
    auto pre = pretrain_translation(corpus, config, tc, init);
    TrainResult out;
    for (std::size_t i = 0; i < pre.losses.size(); ++i) out.log.steps.push_back({i + 1, 0, pre.losses[i], {}});
    out.best = pre.params;
    out.last = std::move(pre.params);
    return out;
  }

  Trainer trainer(config, init ? *init : model::init_params(config, tc.seed), tc);
  SamplerKind kind = tc.sampler;
  if (kind == SamplerKind::automatic) kind = tc.mode == Mode::contrastive ? SamplerKind::paired : SamplerKind::mixed;
  BatchSampler sampler(corpus, kind, tc.batch_size, num::mix_seed(tc.seed, 1));

  TrainResult out;
  out.best = trainer.params();
  auto& log = out.log;
  bool capped = false;
  for (std::size_t epoch = 1; epoch <= tc.epochs && !capped; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    for (const auto& batch : sampler.epoch()) {
      const auto loss = trainer.step(batch);
      log.steps.push_back({trainer.steps_taken(), epoch, loss, {}});
      rec.l_mle += loss.l_mle;
      rec.l_c += loss.l_c;
      rec.l_final += loss.l_final;
      ++rec.steps;
      if (tc.max_steps && trainer.steps_taken() >= tc.max_steps) {
        capped = true;
        break;
      }
    }
    if (rec.steps) {
      const double n = static_cast<double>(rec.steps);
      rec.l_mle /= n;
      rec.l_c /= n;
      rec.l_final /= n;
    }
    rec.val_token_f1 = validation_token_f1(config, trainer.params(), corpus, prompt_mode(tc.mode),
                                           tc.val_examples, tc.max_new_tokens);
    if (!log.steps.empty()) log.steps.back().val_token_f1 = rec.val_token_f1;
    if (rec.val_token_f1 > log.best_val_token_f1) {
      log.best_val_token_f1 = rec.val_token_f1;
      log.best_epoch = epoch;
      out.best = trainer.params();
    }
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  out.last = trainer.params();
  return out;
}

PretrainResult pretrain_translation(const ToyCorpus& corpus, const ModelConfig& config,
                                    const TrainConfig& tc, const ParamSet* init) {
  const std::size_t n_langs = corpus.splits.size();
  if (n_langs < 2) throw std::invalid_argument("translation pretraining needs at least 2 languages");
  TrainConfig pre = tc;
  pre.mode = Mode::pretrain_mt;
  pre.tuning = Tuning::full;
  Trainer trainer(config, init ? *init : model::init_params(config, tc.seed), pre);
  num::Rng rng(num::mix_seed(tc.seed, 2));
  PretrainResult out;
  for (std::size_t step = 0; step < tc.pretrain_steps; ++step) {
    std::vector<std::vector<TokenId>> sources, targets;
    std::vector<LangId> src_langs, tgt_langs;
    for (std::size_t k = 0; k < tc.batch_size; ++k) {
      const auto [a, b] = sample_language_pair(rng, n_langs);
      const auto& pool = corpus.splits[a].train;
      const Example& ex = pool[num::uniform_index(rng, pool.size())];
      sources.push_back(ex.context);
      targets.push_back(toy::lexicon_translate(corpus.vocab, ex.context, a, b));
      src_langs.push_back(a);
      tgt_langs.push_back(b);
    }
    out.losses.push_back(trainer.translation_step(sources, src_langs, targets, tgt_langs));
  }
  out.params = trainer.params();
  return out;
}

double translation_accuracy(const ModelConfig& config, const ParamSet& params, const ToyCorpus& corpus,
                            std::size_t per_language) {
  std::size_t matches = 0, total = 0;
  const std::size_t n_langs = corpus.splits.size();
  for (LangId a = 0; a < n_langs; ++a) {
    const auto& valid = corpus.splits[a].valid;
    const std::size_t n = per_language ? std::min(per_language, valid.size()) : valid.size();
    for (LangId b = 0; b < n_langs; ++b) {
      if (a == b) continue;
      std::vector<model::GenerationRequest> requests;
      std::size_t longest = 0;
      for (std::size_t i = 0; i < n; ++i) {
        requests.push_back({model::assemble_sentence_input(valid[i].context, a, config), b});
        longest = std::max(longest, valid[i].context.size());
      }
      const auto outputs = model::generate_batch(config, params, requests, PromptMode::direct, longest + 4);
      for (std::size_t i = 0; i < n; ++i) {
        const auto ref = toy::lexicon_translate(corpus.vocab, valid[i].context, a, b);
        const auto& out = outputs[i];
        for (std::size_t p = 0; p < std::min(ref.size(), out.size()); ++p) matches += out[p] == ref[p];
        total += std::max(ref.size(), out.size());
      }
    }
  }
  return total ? static_cast<double>(matches) / static_cast<double>(total) : 0.0;
}

}  // namespace xldg::train
