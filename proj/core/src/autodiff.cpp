#include "pointlama/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>

namespace pointlama {

DenseArray& Node::grad_buffer() {
  if (grad.empty()) grad = DenseArray(value.shape(), 0.0);
  return grad;
}

Value Value::constant(DenseArray value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Value(std::move(n));
}

Value Value::parameter(DenseArray value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = "param";
  return Value(std::move(n));
}

DenseArray Value::grad() const {
  if (node_->grad.empty()) return DenseArray(node_->value.shape(), 0.0);
  return node_->grad;
}

void Value::zero_grad() { node_->grad = DenseArray(); }

Value make_result(DenseArray value, std::vector<Value> parents, const char* op, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(fn);
  }
  return Value(std::move(n));
}

namespace {

// Post-order over nodes that require gradients; iterative to survive deep graphs.
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const Value& root) {
  if (!root) throw std::invalid_argument("backward: null root");
  if (root.size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + to_string(root.shape()));
  }
  Node* r = root.node();
  if (r->backward_done) {
    throw std::logic_error("backward: called twice on the same root without reset_backward()");
  }
  r->backward_done = true;
  if (!r->requires_grad) return;
  auto order = topo_order(r);
  r->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

void reset_backward(const Value& root) {
  Node* r = root.node();
  r->backward_done = false;
  if (!r->requires_grad) return;
  for (Node* n : topo_order(r)) n->grad = DenseArray();
}

Value detach(const Value& v) { return Value::constant(v.value()); }

}  // namespace pointlama
