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

#include <Eigen/Core>

#include "keyread/numcore/errors.hpp"

namespace keyread {

using Shape = std::vector<int>;

// Eigen picks vectorised paths by pointer alignment, so a fixed alignment keeps
// results bitwise reproducible across runs.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

// Dense row-major array; the last axis is contiguous.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_shape();
    values_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& values) : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end())) {}

  Tensor(Shape shape, std::initializer_list<T> values) : Tensor(std::move(shape), Buffer<T>(values)) {}

  Tensor(Shape shape, Buffer<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape();
    require(values_.size() == shape_size(shape_),
            "tensor value count " + std::to_string(values_.size()) + " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis < 0 ? rank() + axis : axis)); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  Buffer<T>& storage() { return values_; }
  const Buffer<T>& storage() const { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  // Same values, new shape of equal size.
  Tensor reshaped(Shape shape) const {
    require(shape_size(shape) == size(), "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), values_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_shape() const {
    for (int d : shape_) require(d > 0, "tensor extents must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  Buffer<T> values_;
};

// A value participating in a recorded computation. Gradient storage is
// allocated on first use and always matches the value's shape.
template <typename T>
struct Node {
  Tensor<T> value;
  Buffer<T> grad;
  bool requires_grad = false;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>(Node<T>{std::move(value), {}, requires_grad})) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Gradient view; zeros when nothing has flowed into this value.
  std::span<T> grad() const { return node_->grad_buffer(); }
  bool has_grad() const { return node_->has_grad(); }
  void zero_grad() const {
    if (node_->has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  Node<T>* node() const { return node_.get(); }
  bool same_node(const Var& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Define-by-run record of executed operations. backward() replays the
// adjoint closures in reverse exactly once each.
template <typename T>
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }
  std::size_t size() const { return ops_.size(); }

  void record(std::function<void()> adjoint) {
    if (enabled_) ops_.push_back(std::move(adjoint));
  }

  void backward(const Var<T>& loss) {
    require(loss.size() == 1, "backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  void clear() { ops_.clear(); }

 private:
  bool enabled_;
  std::vector<std::function<void()>> ops_;
};

}  // namespace keyread
