#include "fsaa/tensor.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <sstream>
#include <unordered_set>
#include <utility>

#include "fsaa/errors.hpp"

namespace fsaa {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad)
    : Tensor(shape, std::vector<T>(shape_numel(shape), T(0)), requires_grad) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (std::size_t d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " elements, got " + std::to_string(values.size()));
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  std::vector<T> values(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(values));
}

template <typename T>
detail::TensorImpl<T>& Tensor<T>::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return impl().shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return impl().data.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return impl().data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  return impl().data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl().requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  impl().requires_grad = flag;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl().grad_fn == nullptr;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !impl().grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return impl().grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return impl().ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), impl().data, requires_grad());
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), impl().data, false);
}

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  tape.root_ = root.impl_ptr();
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::unordered_set<const detail::TensorImpl<T>*> visited;
  std::vector<std::pair<std::shared_ptr<detail::TensorImpl<T>>, std::size_t>> stack;
  if (root.impl().grad_fn) stack.emplace_back(root.impl_ptr(), 0);
  visited.insert(root.impl_ptr().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& inputs = impl->grad_fn->inputs;
    if (next < inputs.size()) {
      auto child = inputs[next++];
      if (child->grad_fn && visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
      continue;
    }
    tape.nodes_.push_back(impl);
    stack.pop_back();
  }
  return tape;
}

template <typename T>
void Tape<T>::replay() {
  if (!root_) return;
  auto seed = root_->ensure_grad();
  seed[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::TensorImpl<T>& node = **it;
    if (!node.grad.empty()) node.grad_fn->backward(node.grad);
    node.grad.clear();
    node.grad.shrink_to_fit();
    node.grad_fn.reset();
    node.consumed = true;
  }
  nodes_.clear();
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (loss.impl().consumed) throw ContractError("graph already consumed by an earlier backward()");
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor requiring gradients");
  if (loss.is_leaf()) {
    loss.impl().ensure_grad()[0] += T(1);
    return;
  }
  Tape<T>::record(loss).replay();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace fsaa
