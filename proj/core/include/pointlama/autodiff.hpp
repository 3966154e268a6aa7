#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pointlama/tensor.hpp"

namespace pointlama {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

/// One vertex of the reverse-mode graph. `backward` reads `grad` and
/// accumulates into the gradients of `parents` that require them.
struct Node {
  DenseArray value;
  DenseArray grad;  // empty until something flows into it
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  /// Gradient buffer, zero-initialised with the value's shape on first use.
  DenseArray& grad_buffer();
};

/// Shared handle to a graph node. Copies alias the same node.
class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Value constant(DenseArray value);
  static Value parameter(DenseArray value);

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

  const DenseArray& value() const { return node_->value; }
  DenseArray& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient, or zeros of the value's shape if none has been accumulated.
  DenseArray grad() const;
  void zero_grad();

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates a non-leaf node. `fn` is dropped when no parent requires a gradient.
Value make_result(DenseArray value, std::vector<Value> parents, const char* op, BackwardFn fn);

/// Reverse-mode accumulation from a scalar root into every reachable node that
/// requires a gradient. Throws on a non-scalar root or when called a second
/// time on the same root without reset_backward().
void backward(const Value& root);

/// Clears gradients of all reachable nodes and re-arms the root for backward().
void reset_backward(const Value& root);

/// Copy of the value with no graph linkage.
Value detach(const Value& v);

}  // namespace pointlama
