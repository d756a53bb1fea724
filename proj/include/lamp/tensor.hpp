#pragma once

// Dense tensors with a reverse-mode differentiation graph.
//
// A Tensor is a cheap shared handle to a Node. Nodes created by operations
// keep references to their inputs together with a backward closure, so the
// graph lives exactly as long as the tensors that hang off it. Nodes whose
// inputs all lack requires_grad carry no graph at all, which makes inference
// allocation-light.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lamp/error.hpp"

namespace lamp {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::optional<std::vector<T>> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `self.grad` and accumulates into the grads of `self.inputs`.
  std::function<void(Node& self)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  // Zero-initialized on first use.
  std::span<T> grad_buffer();
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  /// Rank-0 tensor holding one value.
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Mutable access to the payload. Only leaves may be mutated; interior
  /// nodes are immutable once created.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return node_->grad.has_value(); }
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  /// Drops the gradient buffer entirely (grad becomes absent).
  void clear_grad() { node_->grad.reset(); }

  /// Copy of the data with no graph attached.
  Tensor detach() const;
  /// Same data, fresh leaf node, requires_grad as given.
  Tensor clone_leaf(bool requires_grad) const;

  /// Reverse-mode sweep from this scalar. Leaf grads accumulate (+=); grads of
  /// interior nodes are scratch and released afterwards.
  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// While a guard is alive (per thread) ops record no graph.
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

/// Keeps freed activation buffers in the heap instead of returning them to the
/// OS after every op; training otherwise spends a third of its time in page
/// faults. Process-wide, so only programs call it.
void keep_heap_memory();

/// Builds an op result. When no input requires grad (or a NoGradGuard is
/// active) the result is a plain constant and `backward_fn` is discarded.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn, const char* op);

/// Precision conversion; the result is a fresh leaf without grad.
template <class To, class From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return Tensor<To>::from(t.shape(), std::move(out));
}

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace lamp
