// Dense row-major arrays with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations on tensors that
// require gradients record a backward closure on the output node; calling
// backward() on a scalar walks the recorded graph once in reverse
// topological order.

#ifndef EM3RF_TENSOR_TENSOR_HPP
#define EM3RF_TENSOR_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace em3rf::tensor {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Scalar(0));
  }
};

template <typename Scalar>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, Scalar(0), requires_grad);
  }

  static Tensor filled(const Shape& shape, Scalar v, bool requires_grad = false) {
    auto n = std::make_shared<Node<Scalar>>();
    n->shape = shape;
    n->value.assign(static_cast<std::size_t>(numel(shape)), v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(const Shape& shape, std::vector<Scalar> data, bool requires_grad = false) {
    if (static_cast<Index>(data.size()) != numel(shape)) {
      throw ShapeError("from_data: buffer of " + std::to_string(data.size()) + " for shape " + to_string(shape));
    }
    auto n = std::make_shared<Node<Scalar>>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) { return filled({}, v, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(int axis) const {
    const int r = rank();
    return node_->shape.at(static_cast<std::size_t>(axis < 0 ? axis + r : axis));
  }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index size() const { return static_cast<Index>(node_->value.size()); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<Scalar>& values() { return node_->value; }
  const std::vector<Scalar>& values() const { return node_->value; }
  Scalar* data() { return node_->value.data(); }
  const Scalar* data() const { return node_->value.data(); }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  Scalar operator[](Index i) const { return node_->value[static_cast<std::size_t>(i)]; }

  /// Gradient buffer; zeros if nothing was accumulated.
  const std::vector<Scalar>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::vector<Scalar>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return from_data(shape(), values(), false); }

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

/// Creates the output node of an op. Backward is recorded only when some
/// parent requires gradients.
template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, std::vector<Scalar> value,
                           std::vector<Tensor<Scalar>> parents,
                           std::function<void(Node<Scalar>&)> backward) {
  auto n = std::make_shared<Node<Scalar>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(n));
}

/// Number of nodes visited by the most recent backward() on this thread.
inline thread_local std::size_t last_backward_visits = 0;

/// Reverse sweep from a scalar loss. Leaves that require gradients
/// accumulate into their grad buffers.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  using NodeT = Node<Scalar>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  NodeT* root = loss.node().get();
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
  last_backward_visits = order.size();
}

}  // namespace em3rf::tensor

#endif  // EM3RF_TENSOR_TENSOR_HPP
