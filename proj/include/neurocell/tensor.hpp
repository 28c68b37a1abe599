#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "neurocell/errors.hpp"

namespace neurocell {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "no gradient buffer"
  bool requires_grad = false;
};

/// Dense row-major n-dimensional array with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage, the way
/// activations are passed between recorded operations. Use clone() for an
/// independent deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " elements, got " +
                           std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  explicit operator bool() const { return static_cast<bool>(impl_); }
  bool defined() const { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool flag) const { impl_->requires_grad = flag; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }

  // Gradient bookkeeping mutates the shared storage, not the handle, so it is
  // available through const handles captured by recorded operations.

  /// Allocates a zeroed gradient buffer if absent.
  std::span<T> ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() const {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  void clear_grad() const {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }

  /// Deep copy of shape, values, and flag; the gradient buffer is not copied.
  Tensor clone() const {
    if (!impl_) return Tensor();
    return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
  }

  /// New tensor sharing nothing, with the same values and a different shape.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " +
                           shape_str(shape));
    }
    return Tensor(std::move(shape), impl_->data);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const TensorStorage<T>* storage() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorStorage<T>> impl_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  std::vector<To> out(src.size());
  std::transform(src.data().begin(), src.data().end(), out.begin(),
                 [](From v) { return static_cast<To>(v); });
  return Tensor<To>(src.shape(), std::move(out), src.requires_grad());
}

}  // namespace neurocell
