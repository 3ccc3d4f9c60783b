#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle: copying it aliases the same storage, which is
// what lets a parameter appear in many graph nodes. Use clone() for a deep
// copy. Every operation that reads at least one tensor requiring gradients
// (while gradient recording is enabled on the calling thread) links its output
// to a Node holding the backward closure. backward() orders those nodes into a
// Tape and replays them in reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fsaa {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads the output gradient and accumulates into the inputs' grad buffers.
  std::function<void(std::span<const T>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool consumed = false;  // graph already replayed by backward()
  std::shared_ptr<Node<T>> grad_fn;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Keeps freed large buffers inside the heap (glibc only) so that repeated
/// training steps reuse warm pages instead of mapping fresh ones. Call once
/// at program start; it changes process-wide allocator settings.
void configure_allocator();

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

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

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value);
  static Tensor full(Shape shape, T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  /// Writes bypass the graph; meant for leaves (parameter updates, inputs).
  std::span<T> mutable_data();
  T operator[](std::size_t flat_index) const { return data()[flat_index]; }
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  /// Empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Deep copy of values; the copy keeps requires_grad but has no history.
  Tensor clone() const;
  /// Deep copy with no history and requires_grad = false.
  Tensor detach() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(data().begin(), data().end());
    return Tensor<U>(shape(), std::move(values), requires_grad());
  }

  detail::TensorImpl<T>& impl() const;
  const std::shared_ptr<detail::TensorImpl<T>>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Reverse topological record of the operations reachable from a loss.
template <typename T>
class Tape {
 public:
  /// Collects every non-leaf tensor reachable from `root`, inputs before outputs.
  static Tape record(const Tensor<T>& root);

  std::span<const std::shared_ptr<detail::TensorImpl<T>>> nodes() const { return nodes_; }

  /// Seeds d(root)/d(root) = 1, runs each node's backward once in reverse
  /// order, then releases intermediate gradients and the graph.
  void replay();

 private:
  std::shared_ptr<detail::TensorImpl<T>> root_;
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> nodes_;
};

/// Accumulates d(loss)/d(x) into x.grad for every leaf x with requires_grad.
/// Throws ContractError for a non-scalar loss or an already-consumed graph.
template <typename T>
void backward(const Tensor<T>& loss);

namespace detail {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

/// Links `out` to a backward closure over `inputs`.
template <typename T>
void attach(Tensor<T>& out, const char* op, std::initializer_list<const Tensor<T>*> inputs,
            std::function<void(std::span<const T>)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) node->inputs.push_back(t->impl_ptr());
  node->backward = std::move(fn);
  out.impl().requires_grad = true;
  out.impl().grad_fn = std::move(node);
}

/// Grad buffer of `t` if it participates in differentiation, else an empty span.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.impl().ensure_grad();
}

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);

}  // namespace fsaa
