#pragma once

// Minimal reverse-mode autodiff over dense row-major tensors.
//
// A Var is a shared handle to a graph node. Ops in ops.hpp build new nodes
// whose backward closures accumulate into their inputs' gradients. Graphs are
// released when the last handle to the root goes away.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ragcap::ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an op receives operands it cannot accept.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-filled on first access.
  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var zeros(Shape shape, bool requires_grad = false);
  static Var full(Shape shape, T fill, bool requires_grad = false);
  static Var from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Var scalar(T v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> value() { return node_->value; }
  std::span<const T> value() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return {node_->grad_data(), node_->value.size()}; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  /// Runs backpropagation from this node; it must hold a single element.
  void backward();

  /// A new leaf sharing no graph history (values are copied).
  Var detach() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds a result node. Inputs and the backward closure are retained only
/// when recording is on and some input requires a gradient.
template <typename T>
Var<T> make_result(Shape shape, std::vector<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward);

}  // namespace ragcap::ag
