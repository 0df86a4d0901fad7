#ifndef FDL_TENSOR_HPP
#define FDL_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fdl/error.hpp"

namespace fdl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a backward pass touches this node
  bool requires_grad = false;
};

/// Shared handle to a dense row-major tensor of rank 1 or 2.
///
/// Copies alias the same storage; use clone() for a detached deep copy.
/// Values are treated as immutable once an op has consumed them; only
/// optimizers and initializers write through mutable_data().
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), T(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (shape.empty() || shape.size() > 2)
      throw ShapeError("tensor rank must be 1 or 2, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.size() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    ensure_grad();
    return node_->grad;
  }
  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    return Tensor(node_->shape, node_->value, node_->requires_grad);
  }

  // Identity used to key optimizer state and gradient maps.
  const void* id() const { return node_.get(); }
  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& shared_node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

template <typename T, typename U>
Tensor<T> cast_tensor(const Tensor<U>& t) {
  std::vector<T> v(t.data().begin(), t.data().end());
  return Tensor<T>(t.shape(), std::move(v), t.requires_grad());
}

}  // namespace fdl

#endif  // FDL_TENSOR_HPP
