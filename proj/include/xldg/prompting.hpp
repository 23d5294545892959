#pragma once

#include <span>
#include <string>
#include <string_view>

#include "xldg/numcore/graph.hpp"
#include "xldg/seq2seq.hpp"

namespace xldg::prompt {

using num::Tensor;
using num::Var;

enum class Pooling { attention, mean, max };

/// "attention" | "mean" | "max"; anything else throws std::invalid_argument.
Pooling parse_pooling(std::string_view name);
std::string pooling_name(Pooling pooling);

struct ContrastiveConfig {
  double margin = 1.0;
  double temperature = 0.16;
  Pooling pooling = Pooling::attention;
  double lambda = 0.2;
  /// Also anchor negatives at the second group's task state.
  bool symmetrize_negatives = false;

  void validate() const;
  friend bool operator==(const ContrastiveConfig&, const ContrastiveConfig&) = default;
};

/// Encoder states at the prompt positions of one input.
struct PromptStates {
  Tensor task;  // [n × d_model]
  Tensor lang;  // [d_model]
};

struct PromptVars {
  Var task;
  Var lang;
};

/// Rows 1..n and row 0 of `states`. Throws std::invalid_argument
/// ("no task span") for inputs assembled without task prompts.
PromptStates extract_prompt_states(const Tensor& states, const model::AssembledInput& input);
/// Same, on packed graph states where the input starts at row `offset`.
PromptVars extract_prompt_states(Var states, const model::AssembledInput& input,
                                 std::size_t offset = 0);

/// Reduces task-prompt states [n × d] to one vector [d]. Attention weights
/// are softmax(<h_lp, H_tp[k]> / sqrt(d)).
Var pool(Var task, Var lang, Pooling pooling);
Tensor pool(const Tensor& task, const Tensor& lang, Pooling pooling);

struct ContrastiveOutput {
  double d_p = 0.0;
  double d_n = 0.0;
  double loss = 0.0;
};

struct ContrastiveVars {
  Var d_p;
  Var d_n;
  Var loss;
};

/// Hinge max(d_p - d_n + margin, 0) / temperature with d_p = |tp_i - tp_j|
/// and d_n = (|tp_i - lp_i| + |tp_i - lp_j|) / 2.
ContrastiveVars contrastive_loss(Var task_i, Var task_j, Var lang_i, Var lang_j,
                                 const ContrastiveConfig& config);
ContrastiveOutput contrastive_loss(const Tensor& task_i, const Tensor& task_j,
                                   const Tensor& lang_i, const Tensor& lang_j,
                                   const ContrastiveConfig& config);

/// lambda * l_c + (1 - lambda) * l_mle; lambda must lie in [0, 1].
double combined_loss(double l_mle, double l_c, double lambda);
Var combined_loss(Var l_mle, Var l_c, double lambda);

/// Arithmetic mean of equally shaped rank-1 vectors.
Var average(std::span<const Var> vectors);

}  // namespace xldg::prompt
