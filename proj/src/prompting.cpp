#include "xldg/prompting.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "xldg/numcore/ops.hpp"

namespace xldg::prompt {

using num::DimensionError;
using num::Graph;
using num::Shape;

Pooling parse_pooling(std::string_view name) {
  if (name == "attention") return Pooling::attention;
  if (name == "mean") return Pooling::mean;
  if (name == "max") return Pooling::max;
  throw std::invalid_argument("unknown pooling method '" + std::string(name) +
                              "' (expected attention, mean or max)");
}

std::string pooling_name(Pooling pooling) {
  switch (pooling) {
    case Pooling::attention: return "attention";
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
  }
  throw std::invalid_argument("unknown pooling method");
}

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  if (!(margin >= 0.0)) throw std::invalid_argument("margin must be >= 0");
}

namespace {

void require_task_span(const model::AssembledInput& input) {
  if (!input.has_task_span) throw std::invalid_argument("no task span");
}

Var as_vector(Var v) {
  if (v.value().rank() == 1) return v;
  return num::reshape(v, Shape{v.value().size()});
}

}  // namespace

PromptStates extract_prompt_states(const Tensor& states, const model::AssembledInput& input) {
  require_task_span(input);
  if (states.rank() != 2 || states.rows() < input.size()) {
    throw DimensionError("states " + num::shape_to_string(states.shape()) +
                         " do not cover an input of length " + std::to_string(input.size()));
  }
  const std::size_t d = states.cols();
  const std::size_t n = input.task_last - input.task_first + 1;
  PromptStates out{Tensor(Shape{n, d}, 0.0), Tensor(Shape{d}, 0.0)};
  const double* src = states.raw();
  std::copy(src + input.task_first * d, src + (input.task_last + 1) * d, out.task.raw());
  std::copy(src + input.lang_position * d, src + (input.lang_position + 1) * d, out.lang.raw());
  return out;
}

PromptVars extract_prompt_states(Var states, const model::AssembledInput& input,
                                 std::size_t offset) {
  require_task_span(input);
  return {num::slice_rows(states, offset + input.task_first, offset + input.task_last + 1),
          num::row(states, offset + input.lang_position)};
}

Var pool(Var task, Var lang, Pooling pooling) {
  const Tensor& t = task.value();
  if (t.rank() != 2) throw DimensionError("task states must be a matrix");
  const std::size_t n = t.rows();
  const std::size_t d = t.cols();
  if (lang.value().size() != d) {
    throw DimensionError("language state " + num::shape_to_string(lang.shape()) +
                         " does not match task states " + num::shape_to_string(t.shape()));
  }
  switch (pooling) {
    case Pooling::mean: return num::mean_rows(task);
    case Pooling::max: return num::max_rows(task);
    case Pooling::attention: {
      Var scores = num::matmul(task, num::reshape(lang, Shape{d, 1}));
      scores = num::scale(num::reshape(scores, Shape{1, n}),
                          1.0 / std::sqrt(static_cast<double>(d)));
      return as_vector(num::matmul(num::softmax(scores), task));
    }
  }
  throw std::invalid_argument("unknown pooling method");
}

Tensor pool(const Tensor& task, const Tensor& lang, Pooling pooling) {
  Graph g;
  g.set_recording(false);
  return pool(g.constant(task), g.constant(lang), pooling).value();
}

ContrastiveVars contrastive_loss(Var task_i, Var task_j, Var lang_i, Var lang_j,
                                 const ContrastiveConfig& config) {
  config.validate();
  const std::size_t d = task_i.value().size();
  for (Var v : {task_j, lang_i, lang_j}) {
    if (v.value().size() != d) {
      throw DimensionError("contrastive inputs differ in size: " +
                           num::shape_to_string(task_i.shape()) + " vs " +
                           num::shape_to_string(v.shape()));
    }
  }
  task_i = as_vector(task_i);
  task_j = as_vector(task_j);
  lang_i = as_vector(lang_i);
  lang_j = as_vector(lang_j);

  Var d_p = num::l2_norm(task_i - task_j);
  Var d_n = num::l2_norm(task_i - lang_i) + num::l2_norm(task_i - lang_j);
  if (config.symmetrize_negatives) {
    d_n = 0.25 * (d_n + num::l2_norm(task_j - lang_j) + num::l2_norm(task_j - lang_i));
  } else {
    d_n = 0.5 * d_n;
  }
  Var hinge = num::relu(num::add_scalar(d_p - d_n, config.margin));
  return {d_p, d_n, num::scale(hinge, 1.0 / config.temperature)};
}

ContrastiveOutput contrastive_loss(const Tensor& task_i, const Tensor& task_j,
                                   const Tensor& lang_i, const Tensor& lang_j,
                                   const ContrastiveConfig& config) {
  Graph g;
  g.set_recording(false);
  auto out = contrastive_loss(g.constant(task_i), g.constant(task_j), g.constant(lang_i),
                              g.constant(lang_j), config);
  return {out.d_p.value().item(), out.d_n.value().item(), out.loss.value().item()};
}

namespace {
void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
}
}  // namespace

double combined_loss(double l_mle, double l_c, double lambda) {
  check_lambda(lambda);
  return lambda * l_c + (1.0 - lambda) * l_mle;
}

Var combined_loss(Var l_mle, Var l_c, double lambda) {
  check_lambda(lambda);
  return num::scale(l_c, lambda) + num::scale(l_mle, 1.0 - lambda);
}

Var average(std::span<const Var> vectors) {
  if (vectors.empty()) throw std::invalid_argument("average of no vectors");
  std::vector<Var> rows;
  rows.reserve(vectors.size());
  for (Var v : vectors) rows.push_back(num::reshape(v, Shape{1, v.value().size()}));
  return num::mean_rows(num::concat_rows(rows));
}

}  // namespace xldg::prompt
