#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace milsurv {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

template <class T>
class Tape;

/// Dense row-major tensor with an optional gradient buffer.
///
/// A Tensor is a handle: copies share storage, which is what lets a Tape keep
/// references to the values it saved during the forward pass. Use `clone()`
/// for an independent copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values);
  static Tensor row(std::initializer_list<T> values);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  /// Leading extent for rank-2 tensors, 1 otherwise.
  std::size_t rows() const;
  /// Trailing extent.
  std::size_t cols() const;

  std::span<T> values();
  std::span<const T> values() const;
  T item() const;
  T at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  /// False for tensors produced by a recorded operation.
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  /// Gradient buffer, allocated and zero-filled on first use.
  std::vector<T>& grad_buffer();
  void zero_grad();

  Tensor clone() const;
  template <class U>
  Tensor<U> cast() const;

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
  const void* id() const noexcept { return impl_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  std::shared_ptr<Storage> impl_;

  friend class Tape<T>;
};

/// Record of executed differentiable operations, in execution order.
///
/// Ops append a node only when the tape is recording and at least one input
/// requires a gradient. `backward` walks the nodes once in reverse and adds
/// the resulting gradients into the grad buffers of leaf tensors; repeated
/// calls therefore accumulate. Intermediate gradients live only for the
/// duration of one `backward` call.
template <class T>
class Tape {
 public:
  /// grad_in[i] is null when input i does not need a gradient.
  using BackwardFn =
      std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }
  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const;

  void record(Tensor<T>& output, std::vector<Tensor<T>> inputs, BackwardFn fn);
  void backward(const Tensor<T>& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn fn;
  };
  bool recording_;
  std::vector<Node> nodes_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace milsurv
