#include "xldg/numcore/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace xldg::num {

namespace {

double evaluate(const ModelFn& fn, const std::vector<Tensor>& params) {
  Graph g;
  g.set_recording(false);
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.constant(p));
  return fn(g, vars).value().item();
}

}  // namespace

GradCheckReport grad_check(const ModelFn& model_fn, std::span<const Tensor> params,
                           double tolerance, const GradCheckOptions& options) {
  std::vector<Tensor> work(params.begin(), params.end());

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const auto& p : work) vars.push_back(g.variable(p));
    Var loss = model_fn(g, vars);
    g.backward(loss);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  std::mt19937_64 rng(options.seed);
  const double h = options.step;
  for (std::size_t i = 0; i < work.size(); ++i) {
    GradCheckEntry entry;
    entry.name = i < options.names.size() ? options.names[i] : "param" + std::to_string(i);
    std::vector<std::size_t> idx(work[i].size());
    std::iota(idx.begin(), idx.end(), 0);
    if (options.max_entries_per_param && idx.size() > options.max_entries_per_param) {
      // Partial Fisher-Yates with the raw engine keeps the sample portable.
      for (std::size_t k = 0; k < options.max_entries_per_param; ++k) {
        const std::size_t j = k + rng() % (idx.size() - k);
        std::swap(idx[k], idx[j]);
      }
      idx.resize(options.max_entries_per_param);
    }
    for (auto j : idx) {
      const double orig = work[i][j];
      work[i][j] = orig + h;
      const double fp = evaluate(model_fn, work);
      work[i][j] = orig - h;
      const double fm = evaluate(model_fn, work);
      work[i][j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i][j];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace xldg::num
