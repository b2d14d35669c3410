#pragma once

// Dense tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a shared handle onto a graph node. Operations record their
// parents and a backward closure when gradient tracking is enabled and any
// input requires a gradient. backward() on a scalar runs the closures in
// reverse topological order, accumulating into leaf gradients, then releases
// the interior of the graph. A consumed graph cannot be replayed.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dlf::gridnet {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using BackwardFn = std::function<void(Node<T>&)>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access, for parameter updates and test perturbations.
  std::span<T> mutable_values() { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Gradient values; all zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Gradients accumulate into leaves.
  void backward();

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Builds an op result. The backward closure is kept only when tracking
  /// is enabled and at least one parent requires a gradient.
  static Tensor make_result(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                            BackwardFn backward);

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Whether ops currently record graphs (thread-local).
bool grad_enabled();

/// Disables graph recording for the current thread within its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dlf::gridnet
