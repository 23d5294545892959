#include "xldg/numcore/graph.hpp"

namespace xldg::num {

Var Graph::constant(Tensor value) {
  value.requires_grad = false;
  return push(std::move(value), {}, nullptr, "constant");
}

Var Graph::variable(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.value.requires_grad = true;
  node.tag = "variable";
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::push(Tensor value, std::vector<std::size_t> inputs,
                BackwardFn backward, const char* tag) {
  Node node;
  node.tag = tag;
  for (auto in : inputs) {
    if (in >= nodes_.size()) {
      throw std::logic_error(std::string("op '") + tag +
                             "' references a node that does not precede it");
    }
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.requires_grad = node.requires_grad && recording_;
  value.requires_grad = node.requires_grad;
  node.value = std::move(value);
  if (node.requires_grad) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

Tensor Graph::grad(std::size_t id) const {
  const Node& node = nodes_[id];
  if (node.grad.empty()) return Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Graph::backward(Var loss) {
  if (backward_done_) {
    throw std::logic_error(
        "backward already ran on this graph; rebuild it with a new forward");
  }
  if (&loss.graph() != this) {
    throw std::logic_error("loss node belongs to a different graph");
  }
  if (value(loss.id()).size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " +
                         shape_to_string(value(loss.id()).shape()));
  }
  backward_done_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id()).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
    // The closure may allocate input gradient buffers but never appends
    // nodes, so the reference stays valid.
    node.backward(*this, node.grad);
  }
}

}  // namespace xldg::num
