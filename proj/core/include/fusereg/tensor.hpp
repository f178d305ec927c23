#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fusereg/error.hpp"

namespace fusereg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass populates it
  bool requires_grad = false;
  bool from_op = false;  // true when produced by a recorded operation
};

/// N-dimensional row-major array (last axis fastest) with optional gradient
/// tracking. Tensor is a shared handle: copies alias the same storage, use
/// clone() or detach() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node().data.size(); }

  std::span<const T> data() const { return node().data; }
  // Mutable access bypasses the tape; use it for leaves only (parameters, inputs).
  std::span<T> mutable_data() { return node().data; }
  T item() const;
  T at(std::size_t flat_index) const { return node().data.at(flat_index); }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  Tensor grad_tensor() const;
  void zero_grad();
  void clear_grad() { node().grad.clear(); }

  // Deep copy of values, detached from any tape and without requires_grad.
  Tensor detach() const;
  // Deep copy of values keeping the requires_grad flag (grad is not copied).
  Tensor clone() const;
  Tensor reshaped_copy(Shape shape) const;

  bool all_finite() const;
  void check_finite(std::string_view what) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }
  TensorNode<T>& node() const;

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  std::vector<To> out(src.numel());
  auto in = src.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(in[i]);
  return Tensor<To>(src.shape(), std::move(out));
}

template <typename T>
using BackwardFn = std::function<void(std::span<const T> grad_out)>;

/// Ordered record of differentiable operations. Constructing a tape makes it
/// the active recorder on the calling thread until it is destroyed; ops only
/// record when an input requires gradients. Tapes nest LIFO.
template <typename T>
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active();

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }
  std::vector<std::string> op_names() const;

  // `fn` receives d(loss)/d(output) and must accumulate into the inputs' grad
  // buffers (see grad_sink).
  void record(std::string op, const Tensor<T>& output, std::vector<Tensor<T>> inputs,
              BackwardFn<T> fn);

  // Replays the tape in reverse. Returns the number of operations visited.
  std::size_t backward(const Tensor<T>& loss);

 private:
  struct Entry {
    std::string op;
    std::shared_ptr<TensorNode<T>> output;
    std::vector<std::shared_ptr<TensorNode<T>>> inputs;
    BackwardFn<T> fn;
  };
  std::vector<Entry> entries_;
  GradTape* previous_ = nullptr;
  bool suspended_ = false;

  template <typename U>
  friend class NoGradScope;
};

/// Suspends recording on the current thread for its lifetime.
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<T>* tape_;
};

/// Populates grads on every requires_grad tensor reachable from `loss`.
/// Leaves that appear on the tape but do not influence the loss get zeros.
template <typename T>
std::size_t backward(GradTape<T>& tape, const Tensor<T>& loss) {
  return tape.backward(loss);
}

namespace detail {

// Returns the active tape when at least one input tracks gradients.
template <typename T>
GradTape<T>* tracking_tape(std::initializer_list<const Tensor<T>*> inputs);

// Gradient accumulation buffer for `t`, empty when t does not need a gradient.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t);

}  // namespace detail

namespace debug {

// Test-only fault injection: scales the upstream gradient fed to every
// recorded op named `op` by `factor`. Not thread-safe.
void set_backward_fault(std::string op, double factor);
void clear_backward_fault();

}  // namespace debug

}  // namespace fusereg
