#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xldg/numcore/tensor.hpp"

namespace xldg::num {

struct AdamState {
  std::size_t step_count = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;
};

/// Zero moments shaped like `params`.
AdamState make_adam_state(std::span<const Tensor> params, double learning_rate);

/// One bias-corrected Adam update in place.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state);

/// Scales grads in place so their joint L2 norm is at most max_norm.
/// Returns the norm before scaling.
double clip_global_norm(std::span<Tensor> grads, double max_norm);

}  // namespace xldg::num
