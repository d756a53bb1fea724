#include "lamp/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace lamp {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
std::span<T> Node<T>::grad_buffer() {
  if (!grad) grad.emplace(data.size(), T(0));
  return *grad;
}

namespace {

template <class T>
std::shared_ptr<Node<T>> new_node(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel(shape) != data.size()) {
    throw ShapeError("shape " + to_string(shape) + " does not match payload of " +
                     std::to_string(data.size()) + " elements");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(lamp::numel(shape), value);
  return Tensor(new_node<T>(std::move(shape), std::move(data), requires_grad));
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  return Tensor(new_node<T>(std::move(shape), std::move(data), requires_grad));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(new_node<T>({}, {value}, requires_grad));
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape()));
  }
  return node_->shape[axis];
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf()) throw Error("cannot mutate the payload of a non-leaf tensor");
  return node_->data;
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
  }
  return node_->data[0];
}

template <class T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw Error("requires_grad can only be changed on leaves");
  node_->requires_grad = flag;
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  if (!node_->grad) throw Error("tensor has no gradient");
  return *node_->grad;
}

template <class T>
std::span<T> Tensor<T>::mutable_grad() {
  return node_->grad_buffer();
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(new_node<T>(node_->shape, node_->data, false));
}

template <class T>
Tensor<T> Tensor<T>::clone_leaf(bool requires_grad) const {
  return Tensor(new_node<T>(node_->shape, node_->data, requires_grad));
}

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar root, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the differentiable
  // subgraph; each node is visited once.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.reset();
  }
  auto root_grad = node_->grad_buffer();
  if (node_->is_leaf()) {
    root_grad[0] += T(1);
    return;
  }
  root_grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || !n->grad) continue;
    n->backward_fn(*n);
    n->grad.reset();
  }
}

namespace {
thread_local bool g_grad_enabled = true;
}

void keep_heap_memory() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn, const char* op) {
  bool needs_grad = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                [](const Tensor<T>& t) { return t.requires_grad(); });
  auto node = new_node<T>(std::move(shape), std::move(data), needs_grad);
  node->op = op;
  if (needs_grad) {
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(Node<float>&)>, const char*);
template Tensor<double> make_result(Shape, std::vector<double>, std::vector<Tensor<double>>,
                                    std::function<void(Node<double>&)>, const char*);

}  // namespace lamp
