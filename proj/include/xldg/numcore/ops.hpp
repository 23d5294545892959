#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>

#include "xldg/numcore/graph.hpp"

namespace xldg::num {

// Differentiable operations. Every op records its own backward closure on
// the graph of its first operand. Matrices are rank-2 tensors; rank-1
// tensors act as single rows where a row is expected.

Var matmul(Var a, Var b);
/// x[m×k] · w[k×n] + bias[n], bias broadcast over rows.
Var linear(Var x, Var w, Var bias);

Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);

Var sum(Var a);
Var mean(Var a);

Var relu(Var a);
/// tanh-approximated GELU.
Var gelu(Var a);

/// Softmax along the last axis with max-subtraction.
Var softmax(Var a);
Var log_softmax(Var a);

/// Per-row normalization over the last axis, then gain/bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// Mean negative log-likelihood over positions whose target != pad_index.
Var cross_entropy(Var logits, std::span<const std::size_t> targets,
                  std::size_t pad_index);

/// Rows of table selected by ids; backward scatter-adds into the table.
Var gather_rows(Var table, std::span<const std::size_t> ids);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
/// Row i of a matrix as a rank-1 tensor.
Var row(Var a, std::size_t i);
Var reshape(Var a, Shape shape);

/// Column-wise mean over rows → rank-1 [cols].
Var mean_rows(Var a);
/// Column-wise maximum over rows → rank-1 [cols]. Gradient flows to the
/// argmax row of each column; ties go to the lowest row index.
Var max_rows(Var a);

/// Euclidean norm of all elements → scalar. Subgradient 0 at the origin.
Var l2_norm(Var a);

/// Inverted dropout; identity when p == 0.
Var dropout(Var a, double p, std::mt19937_64& rng);

/// Query/key span pair for packed multi-sequence attention.
struct AttentionSegment {
  std::size_t q_begin = 0;
  std::size_t q_len = 0;
  std::size_t k_begin = 0;
  std::size_t k_len = 0;
};

/// Scaled dot-product attention over packed sequences.
///
/// q is [Nq×d], k and v are [Nk×d]. Each segment attends its query rows to
/// its own key rows only, split into n_heads column blocks. With causal set,
/// query i of a segment sees keys 0..i (requires q_len == k_len).
Var attention(Var q, Var k, Var v, std::size_t n_heads,
              std::span<const AttentionSegment> segments, bool causal);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace xldg::num
