#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hnas {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the define-by-run tape. Values are immutable once the producing
// op returns; only leaves are mutated (by initializers and optimizers).
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into parents' grads.
  std::function<void(Node& self)> backward;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// Tensors are cheap handles: copies share the same node. Operations in
/// `hnas::ops` record themselves on the graph when any input requires a
/// gradient and no `NoGradGuard` is active.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;

  std::span<const double> data() const;
  /// Mutable view of a leaf's values. Throws on non-leaf tensors.
  std::span<double> mutable_data();
  double item() const;
  double at(std::int64_t flat_index) const { return data()[static_cast<std::size_t>(flat_index)]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  /// Gradient buffer; empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  /// New leaf with a copy of the values and no graph linkage.
  Tensor detach() const;
  /// Same values, new shape with identical element count. Differentiable.
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires a gradient.
///
/// Leaf gradients accumulate across calls until `zero_grad`; gradients of
/// interior nodes are recomputed from scratch on every call.
void backward(const Tensor& root);

/// Writes the graph reachable from `root` as one line per node:
/// `id<TAB>op<TAB>shape<TAB>requires_grad<TAB>parent ids`, in topological order.
void dump_graph(const Tensor& root, std::ostream& out);

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

bool any_requires_grad(std::initializer_list<const Tensor*> inputs);
bool any_requires_grad(std::span<const Tensor> inputs);

// Builds the result tensor of an op and, when recording, links it to its parents.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn);

}  // namespace detail

}  // namespace hnas
