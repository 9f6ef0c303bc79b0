#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "raypatch/errors.hpp"

namespace raypatch {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

// Every buffer starts on an Eigen packet boundary. With std::allocator the
// vectorized kernels peel a heap-address-dependent prefix, so identical runs
// could round differently.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct Storage {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;

  double* grad_data() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
  bool has_grad() const { return !grad.empty(); }
};

}  // namespace detail

// Dense row-major float64 tensor. Copies are shallow handles onto the same
// storage (parameters are shared between a module and the optimizer);
// clone() produces an independent deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage>()) {
    check_shape(shape);
    s_->value.assign(shape_numel(shape), 0.0);
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage>()) {
    check_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    s_->shape = std::move(shape);
    s_->value.assign(values.begin(), values.end());
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.s_->value.begin(), t.s_->value.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->value.size(); }

  std::span<const double> data() const { return s_->value; }
  std::span<double> mutable_data() { return s_->value; }
  double at(std::size_t i) const { return s_->value.at(i); }
  double& at(std::size_t i) { return s_->value.at(i); }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return s_->value[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return s_->has_grad(); }
  std::span<const double> grad() const { return s_->grad; }
  std::span<double> mutable_grad() { return {s_->grad_data(), s_->value.size()}; }
  void zero_grad() { s_->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<detail::Storage>();
    t.s_->shape = s_->shape;
    t.s_->value = s_->value;
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const std::shared_ptr<detail::Storage>& storage() const { return s_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor: rank-0 shapes are not supported, use [1]");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::Storage> s_;
};

// Tape of executed ops. Nodes are appended in execution order; backward()
// runs each node's rule once, in reverse order.
class Graph {
 public:
  using Rule = std::function<void()>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active() { return current(); }

  void record(const char* op, Rule rule) { nodes_.push_back({op, std::move(rule)}); }

  void backward(const Tensor& root) {
    if (consumed_) throw std::logic_error("graph: backward already ran on this tape");
    if (root.numel() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) throw std::logic_error("backward: root does not depend on any tracked tensor");
    consumed_ = true;
    root.storage()->grad_data()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->rule();
      ++visited_;
    }
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t visited() const { return visited_; }
  const char* op_name(std::size_t i) const { return nodes_.at(i).op; }

 private:
  friend class GraphScope;
  friend class NoGradScope;

  struct Node {
    const char* op;
    Rule rule;
  };

  static Graph*& current() {
    thread_local Graph* g = nullptr;
    return g;
  }

  std::vector<Node> nodes_;
  std::size_t visited_ = 0;
  bool consumed_ = false;
};

// Makes a graph the recording target for ops on this thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& g) : prev_(Graph::current()) { Graph::current() = &g; }
  ~GraphScope() { Graph::current() = prev_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* prev_;
};

class NoGradScope {
 public:
  NoGradScope() : prev_(Graph::current()) { Graph::current() = nullptr; }
  ~NoGradScope() { Graph::current() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph* prev_;
};

// Forward-pass arithmetic counters, per thread. `macs` covers matmul, conv2d
// and bilinear upsampling (4 per output element); elementwise ops are free.
struct OpCounters {
  std::uint64_t macs = 0;
  std::uint64_t attention_calls = 0;
  std::uint64_t attention_queries = 0;
  std::uint64_t attention_keys = 0;
  std::uint64_t attention_macs = 0;
};

inline OpCounters& counters() {
  thread_local OpCounters c;
  return c;
}

inline void reset_counters() { counters() = OpCounters{}; }

}  // namespace raypatch
