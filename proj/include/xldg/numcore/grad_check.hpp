#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xldg/numcore/graph.hpp"

namespace xldg::num {

/// Builds a scalar loss on `graph` from parameter variables (one per tensor
/// passed to grad_check, in order). Must be deterministic.
using ModelFn = std::function<Var(Graph& graph, std::span<const Var> params)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor: rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-4;
  /// 0 checks every element; otherwise a seeded sample of this many per tensor.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> names;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

/// Compares reverse-mode gradients with central differences.
GradCheckReport grad_check(const ModelFn& model_fn, std::span<const Tensor> params,
                           double tolerance, const GradCheckOptions& options = {});

}  // namespace xldg::num
