#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xldg/numcore/tensor.hpp"

namespace xldg::num {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Accumulated gradient; zeros when the node received none.
  Tensor grad() const;
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order; backward walks it in exact reverse. A graph supports a
/// single backward pass; rebuild it for the next step.
class Graph {
 public:
  /// Receives the output gradient and accumulates into input gradients.
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward,
           const char* tag);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* tag(std::size_t id) const { return nodes_[id].tag; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id);
  Tensor grad(std::size_t id) const;
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Reverse pass from a scalar node. Throws on non-scalar roots and on a
  /// second call.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  /// When false, ops skip recording backward closures (inference).
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const char* tag = "";
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
  bool recording_ = true;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline Tensor Var::grad() const { return graph_->grad(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

}  // namespace xldg::num
