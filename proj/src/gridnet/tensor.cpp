#include "dlf/gridnet/tensor.hpp"

#include <stdexcept>
#include <unordered_map>
#include <utility>

namespace dlf::gridnet {

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e < 0) throw std::invalid_argument("negative extent in shape");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value.assign(gridnet::numel(shape), T(0));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  if (values.size() != gridnet::numel(shape))
    throw std::invalid_argument("tensor values do not match shape " + shape_string(shape));
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.node_->value.begin(), t.node_->value.end(), value);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::logic_error("item() on a tensor with " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (!node_->grad.empty()) return node_->grad;
  return std::vector<T>(node_->value.size(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                                 BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values), false);
  if (!t_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->leaf = false;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward_fn = std::move(backward);
  return out;
}

template <typename T>
void Tensor<T>::backward() {
  if (!node_ || node_->value.size() != 1) throw std::logic_error("backward() requires a scalar tensor");
  if (node_->consumed) throw std::logic_error("backward() called twice on the same graph");
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Iterative DFS post-order; state 1 = on stack, 2 = finished.
  // order holds owning handles: clearing a node's parents below must not
  // free nodes still waiting for their turn.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_map<Node<T>*, int> state;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{node_, 0}};
  state[node_.get()] = 1;
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      std::shared_ptr<Node<T>> p = n->parents[next++];
      if (!p->requires_grad) continue;
      if (p->consumed) throw std::logic_error("graph segment was already consumed by a backward pass");
      auto it = state.find(p.get());
      if (it == state.end()) {
        state[p.get()] = 1;
        stack.emplace_back(std::move(p), 0);
      } else if (it->second == 1) {
        throw std::logic_error("cycle detected in computation graph");
      }
    } else {
      state[n.get()] = 2;
      order.push_back(std::move(n));
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = it->get();
    if (n->leaf) continue;
    if (!n->grad.empty() && n->backward_fn) n->backward_fn(*n);
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace dlf::gridnet
