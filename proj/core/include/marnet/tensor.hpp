#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "marnet/errors.hpp"

namespace marnet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Byte accounting for every tensor buffer. The high-water mark is what the
// benchmark reports as peak memory.
namespace memory {

struct Stats {
  std::size_t current_bytes = 0;
  std::size_t peak_bytes = 0;
};

Stats stats();
void reset_peak();
void on_allocate(std::size_t bytes);
void on_release(std::size_t bytes);

}  // namespace memory

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    memory::on_allocate(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    memory::on_release(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

/// Dense row-major array with an optional gradient buffer of the same shape.
///
/// Extents are positive. Most ops treat a tensor as a matrix whose row count
/// is the product of all leading extents and whose column count is the last
/// extent ("channels").
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
    check_extents();
    if (values.size() != numel(shape_)) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " needs " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(values.size()));
    }
    data_.assign(values.begin(), values.end());
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<T> data() { return {data_.data(), data_.size()}; }
  std::span<const T> data() const { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return !grad_.empty(); }
  /// Gradient buffer, allocated (zeroed) on first use.
  std::span<T> grad() {
    if (grad_.empty()) grad_.assign(data_.size(), T{0});
    return {grad_.data(), grad_.size()};
  }
  std::span<const T> grad() const { return {grad_.data(), grad_.size()}; }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{0}); }
  void release_grad() { Buffer<T>().swap(grad_); }

  /// Reinterpret the extents; the element count must not change.
  void reshape(Shape shape) {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

 private:
  void check_extents() const {
    if (shape_.empty()) throw ShapeError("tensor needs at least one extent");
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive: " + to_string(shape_));
    }
  }

  Shape shape_;
  Buffer<T> data_;
  Buffer<T> grad_;
  bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Reverse-mode graph

/// Records whether newly created results keep their parents for backward.
/// Thread-local so frozen models can be evaluated concurrently.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads value.grad() and accumulates into the parents' gradients.
  std::function<void(Node&)> backward;
  const char* op = "leaf";
  bool retain_grad = false;
};

/// Handle to a node of the recorded computation. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->value.set_requires_grad(requires_grad);
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }

  bool requires_grad() const { return node_->value.requires_grad(); }
  std::span<const T> grad() const { return std::as_const(node_->value).grad(); }
  bool has_grad() const { return node_->value.has_grad(); }
  void zero_grad() { node_->value.zero_grad(); }

  /// Keep this node's gradient after backward (intermediates release theirs).
  void retain_grad() { node_->retain_grad = true; }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Wrap an op result. Rejects non-finite values (naming the op), and records
/// parents plus backward only when grad mode is on and some parent needs it.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, const char* op,
                   std::function<void(Node<T>&)> backward);

/// Accumulate d(root)/d(leaf) into every reachable leaf that requires grad.
/// A non-scalar root needs an explicit seed of the same size.
template <class T>
void backward(const Var<T>& root);
template <class T>
void backward(const Var<T>& root, std::span<const T> seed);

struct GraphStats {
  std::size_t nodes = 0;
  std::size_t edges = 0;
};

/// Node/edge counts of the recorded graph reachable from root.
template <class T>
GraphStats graph_stats(const Var<T>& root);

/// Throws NumericError if any value is NaN/Inf.
template <class T>
void check_finite(std::span<const T> values, const char* where);

}  // namespace marnet
