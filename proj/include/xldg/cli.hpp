#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "xldg/evalkit.hpp"
#include "xldg/trainer.hpp"

namespace xldg::cli {

/// Everything a command needs, resolved from defaults, a config file and
/// flags (in that order of precedence). Keys in the flat text form are the
/// long flag names.
struct RunConfig {
  // corpus
  std::string data = "data";
  std::size_t langs = 3;
  std::size_t concepts = 200;
  std::string preset = "rich";
  std::uint64_t corpus_seed = 7;

  // model
  model::ModelConfig model;

  // training; mode also accepts pipeline-mono (direct training, pipeline eval)
  std::string mode = "contrastive";
  std::string tuning = "full";
  double lr = 0.0;  // 0 picks the default for the tuning mode
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double lambda = 0.2;
  double tau = 0.16;
  double sigma = 1.0;
  std::string pooling = "attention";
  bool symmetrize_negatives = false;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t pretrain_steps = 3000;
  double pretrain_lr = 2e-3;
  std::string init;  // checkpoint stem to start from instead of pretraining
  std::size_t val_examples = 0;
  std::size_t max_new_tokens = 16;

  // evaluation
  std::string pairs = "all";
  std::size_t limit = 0;
  double ignore_threshold = 0.5;
  std::string baseline = "direct";

  // ablation
  std::vector<std::string> poolings{"attention", "mean", "max"};
  std::vector<double> lambdas{0.1, 0.2, 0.3, 0.4, 0.5};
  bool endpoints = false;

  /// Sets one key from its text form; throws std::invalid_argument for
  /// unknown keys or malformed values.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  /// The tuning-dependent learning rate: 3e-4 for full, 1e-2 for prompt-only.
  double resolved_lr() const;
  train::TrainConfig train_config() const;
  /// Model sizes with vocabulary and language count taken from the corpus.
  model::ModelConfig model_config(const toy::ToyCorpus& corpus) const;
};

/// All keys known to RunConfig, in echo order.
const std::vector<std::string>& config_keys();

/// "key=value" lines; '#' starts a comment; blank lines are skipped.
std::map<std::string, std::string> parse_flat(std::string_view text);
/// Applies every key of a flat text to `config`.
void apply_flat(RunConfig& config, std::string_view text);
/// Echo of the given keys in flat form, one per line.
std::string to_flat(const RunConfig& config, const std::vector<std::string>& keys);

/// Output root: $XLDG_RUN_DIR when set, otherwise the working directory.
std::filesystem::path output_root();
/// Relative paths are placed under output_root().
std::filesystem::path output_path(const std::filesystem::path& path);
/// An input path as given when it exists, otherwise under output_root().
std::filesystem::path input_path(const std::filesystem::path& path);

/// Sidecar written next to a checkpoint.
struct ModelCard {
  model::ModelConfig model;
  std::vector<toy::ToyLanguage> languages;
  std::string mode;
  std::string tuning;
  std::uint64_t corpus_hash = 0;
};
std::string model_card_json(const ModelCard& card);
ModelCard parse_model_card(std::string_view json);

/// Runs `xldg <args...>` (args exclude the program name). Returns the exit
/// code; usage errors return 2, runtime failures 1.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace xldg::cli
