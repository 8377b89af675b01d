#include "milsurv/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "milsurv/error.hpp"

namespace milsurv {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<Storage>()) {
  for (auto extent : shape) {
    if (!(extent > 0)) fail(ErrorKind::dimension, "tensor extents must be positive, got " + shape_string(shape));
  }
  impl_->data.assign(shape_size(shape), fill);
  impl_->shape = std::move(shape);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Storage>()) {
  for (auto extent : shape) {
    if (!(extent > 0)) fail(ErrorKind::dimension, "tensor extents must be positive, got " + shape_string(shape));
  }
  if (!(shape_size(shape) == values.size())) fail(ErrorKind::dimension, "shape " + shape_string(shape) + " does not match " + std::to_string(values.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor({1}, std::vector<T>{value});
}

template <class T>
Tensor<T> Tensor<T>::matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
  return Tensor({rows, cols}, std::vector<T>(values));
}

template <class T>
Tensor<T> Tensor<T>::row(std::initializer_list<T> values) {
  return Tensor({1, values.size()}, std::vector<T>(values));
}

template <class T>
const Shape& Tensor<T>::shape() const {
  require(defined(), ErrorKind::contract, "use of an undefined tensor");
  return impl_->shape;
}

template <class T>
std::size_t Tensor<T>::size() const {
  return shape_size(shape());
}

template <class T>
std::size_t Tensor<T>::rows() const {
  return rank() == 2 ? shape()[0] : 1;
}

template <class T>
std::size_t Tensor<T>::cols() const {
  return shape().back();
}

template <class T>
std::span<T> Tensor<T>::values() {
  require(defined(), ErrorKind::contract, "use of an undefined tensor");
  return impl_->data;
}

template <class T>
std::span<const T> Tensor<T>::values() const {
  require(defined(), ErrorKind::contract, "use of an undefined tensor");
  return impl_->data;
}

template <class T>
T Tensor<T>::item() const {
  if (!(size() == 1)) fail(ErrorKind::contract, "item() on a tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

template <class T>
bool Tensor<T>::requires_grad() const {
  return defined() && impl_->requires_grad;
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  require(defined(), ErrorKind::contract, "use of an undefined tensor");
  impl_->requires_grad = on;
  return *this;
}

template <class T>
bool Tensor<T>::is_leaf() const {
  return !defined() || impl_->leaf;
}

template <class T>
bool Tensor<T>::has_grad() const {
  return defined() && !impl_->grad.empty();
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  require(defined(), ErrorKind::contract, "use of an undefined tensor");
  return impl_->grad;
}

template <class T>
std::vector<T>& Tensor<T>::grad_buffer() {
  require(defined(), ErrorKind::contract, "use of an undefined tensor");
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T{0});
  return impl_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  Tensor copy(shape(), impl_->data);
  copy.impl_->requires_grad = impl_->requires_grad;
  return copy;
}

template <class T>
template <class U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> converted(impl_->data.begin(), impl_->data.end());
  return Tensor<U>(shape(), std::move(converted));
}

template <class T>
bool Tape<T>::wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t != nullptr && t->requires_grad(); });
}

template <class T>
void Tape<T>::record(Tensor<T>& output, std::vector<Tensor<T>> inputs, BackwardFn fn) {
  if (!recording_) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return;
  output.impl_->requires_grad = true;
  output.impl_->leaf = false;
  nodes_.push_back(Node{std::move(inputs), output, std::move(fn)});
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!(loss.defined() && loss.size() == 1)) fail(ErrorKind::contract, "backward requires a scalar loss, got " + (loss.defined() ? shape_string(loss.shape()) : "undefined"));
  require(loss.requires_grad(), ErrorKind::contract, "backward on a loss that does not require grad");

  std::unordered_map<const void*, std::vector<T>> scratch;
  std::unordered_map<const void*, Tensor<T>> leaves;
  scratch[loss.id()] = std::vector<T>{T{1}};
  if (loss.is_leaf()) leaves.emplace(loss.id(), loss);

  std::vector<std::vector<T>*> grad_in;
  for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
    auto found = scratch.find(node->output.id());
    if (found == scratch.end()) continue;
    const std::vector<T> grad_out = std::move(found->second);
    scratch.erase(found);

    grad_in.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const Tensor<T>& input = node->inputs[i];
      if (!input.requires_grad()) continue;
      auto& buffer = scratch[input.id()];
      if (buffer.empty()) buffer.assign(input.size(), T{0});
      grad_in[i] = &buffer;
      if (input.is_leaf()) leaves.emplace(input.id(), input);
    }
    node->fn(grad_out, grad_in);
  }

  for (auto& [id, leaf] : leaves) {
    auto found = scratch.find(id);
    if (found == scratch.end()) continue;
    auto& target = leaf.grad_buffer();
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += found->second[i];
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;

}  // namespace milsurv
