#include "fusereg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace fusereg {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " scalars but " +
                     std::to_string(data.size()) + " were given");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
TensorNode<T>& Tensor<T>::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node().data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node().requires_grad = on;
  if (!on) node().grad.clear();
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::grad_tensor() const {
  if (!has_grad()) return Tensor(shape());
  return Tensor(shape(), node().grad);
}

template <typename T>
void Tensor<T>::zero_grad() {
  node().grad.assign(numel(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node().data);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), node().data);
  out.node().requires_grad = requires_grad();
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped_copy(Shape shape) const {
  return Tensor(std::move(shape), node().data);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(node().data.begin(), node().data.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::check_finite(std::string_view what) const {
  const auto& d = node().data;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      std::ostringstream os;
      os << what << ": non-finite value " << d[i] << " at flat index " << i << " of tensor "
         << shape_str(shape());
      throw NumericError(os.str());
    }
  }
}

// ---------------------------------------------------------------------------
// Fault injection

namespace {
struct BackwardFault {
  std::string op;
  double factor = 1.0;
  bool active = false;
};
BackwardFault& fault_state() {
  static BackwardFault f;
  return f;
}
}  // namespace

namespace debug {
void set_backward_fault(std::string op, double factor) {
  fault_state() = BackwardFault{std::move(op), factor, true};
}
void clear_backward_fault() { fault_state() = BackwardFault{}; }
}  // namespace debug

// ---------------------------------------------------------------------------
// GradTape

namespace {
template <typename T>
GradTape<T>*& active_tape_slot() {
  thread_local GradTape<T>* slot = nullptr;
  return slot;
}
}  // namespace

template <typename T>
GradTape<T>::GradTape() : previous_(active_tape_slot<T>()) {
  active_tape_slot<T>() = this;
}

template <typename T>
GradTape<T>::~GradTape() {
  if (active_tape_slot<T>() == this) active_tape_slot<T>() = previous_;
}

template <typename T>
GradTape<T>* GradTape<T>::active() {
  GradTape* t = active_tape_slot<T>();
  return (t && !t->suspended_) ? t : nullptr;
}

template <typename T>
std::vector<std::string> GradTape<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.op);
  return names;
}

template <typename T>
void GradTape<T>::record(std::string op, const Tensor<T>& output, std::vector<Tensor<T>> inputs,
                         BackwardFn<T> fn) {
  Entry e;
  e.output = output.node_ptr();
  e.output->requires_grad = true;
  e.output->from_op = true;
  e.inputs.reserve(inputs.size());
  for (auto& in : inputs) e.inputs.push_back(in.node_ptr());
  const auto& fault = fault_state();
  if (fault.active && fault.op == op) {
    const T factor = static_cast<T>(fault.factor);
    e.fn = [inner = std::move(fn), factor](std::span<const T> g) {
      std::vector<T> scaled(g.begin(), g.end());
      for (auto& v : scaled) v *= factor;
      inner(scaled);
    };
  } else {
    e.fn = std::move(fn);
  }
  e.op = std::move(op);
  entries_.push_back(std::move(e));
}

template <typename T>
std::size_t GradTape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto* loss_node = loss.node_ptr().get();
  const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output.get() == loss_node; });
  if (!on_tape && !loss.requires_grad()) {
    throw ContractError("backward: loss was not produced by an operation on this tape");
  }

  // Zero every gradient buffer the replay can touch.
  std::unordered_set<TensorNode<T>*> seen;
  auto reset = [&](const std::shared_ptr<TensorNode<T>>& n) {
    if (n->requires_grad && seen.insert(n.get()).second) n->grad.assign(n->data.size(), T(0));
  };
  for (const auto& e : entries_) {
    reset(e.output);
    for (const auto& in : e.inputs) reset(in);
  }
  loss.node().grad.assign(1, T(1));

  std::size_t visited = 0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->fn(it->output->grad);
    ++visited;
  }

  // Intermediate gradients are not part of the contract; release them.
  for (const auto& e : entries_) {
    if (e.output.get() != loss_node) e.output->grad.clear();
  }
  return visited;
}

template <typename T>
NoGradScope<T>::NoGradScope() : tape_(active_tape_slot<T>()) {
  if (tape_) tape_->suspended_ = true;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  if (tape_) tape_->suspended_ = false;
}

namespace detail {

template <typename T>
GradTape<T>* tracking_tape(std::initializer_list<const Tensor<T>*> inputs) {
  GradTape<T>* tape = GradTape<T>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  auto& n = t.node();
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

template GradTape<float>* tracking_tape(std::initializer_list<const Tensor<float>*>);
template GradTape<double>* tracking_tape(std::initializer_list<const Tensor<double>*>);
template std::span<float> grad_sink(const Tensor<float>&);
template std::span<double> grad_sink(const Tensor<double>&);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class GradTape<float>;
template class GradTape<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;

}  // namespace fusereg
