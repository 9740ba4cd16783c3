#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "racap/error.hpp"

namespace racap {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

namespace detail {

struct Node {
  Shape dims;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node's gradient and accumulates into the parents.
  std::function<void(std::span<const double>)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Dense row-major tensor of doubles with reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage and graph node.
/// Use clone() or detach() for an independent copy. Operations on tensors
/// that do not require gradients record nothing.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape dims, double fill = 0.0)
      : node_(std::make_shared<detail::Node>()) {
    for (auto d : dims) require_shape(d > 0, "tensor dims must be positive: " + shape_str(dims));
    node_->data.assign(shape_size(dims), fill);
    node_->dims = std::move(dims);
  }

  Tensor(Shape dims, std::vector<double> data)
      : node_(std::make_shared<detail::Node>()) {
    for (auto d : dims) require_shape(d > 0, "tensor dims must be positive: " + shape_str(dims));
    require_shape(data.size() == shape_size(dims),
                  "data length " + std::to_string(data.size()) +
                      " does not match dims " + shape_str(dims));
    node_->dims = std::move(dims);
    node_->data = std::move(data);
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  static Tensor randn(Shape dims, double stddev, Rng& rng) {
    Tensor t(std::move(dims));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.node_->data) v = dist(rng);
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& dims() const { return node_->dims; }
  std::size_t ndim() const { return node_->dims.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const {
    require_shape(ndim() == 2, "rows() on non-matrix " + shape_str(dims()));
    return node_->dims[0];
  }
  std::size_t cols() const {
    require_shape(ndim() == 2, "cols() on non-matrix " + shape_str(dims()));
    return node_->dims[1];
  }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double& operator[](std::size_t i) { return node_->data[i]; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double& operator()(std::size_t r, std::size_t c) {
    return node_->data[r * node_->dims[1] + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return node_->data[r * node_->dims[1] + c];
  }

  double item() const {
    require(size() == 1, "item() on tensor of size " + std::to_string(size()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    require(node_->is_leaf, "requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  std::span<const double> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  /// calls; intermediate gradients are recomputed each time.
  void backward() const;

  /// New leaf holding a copy of the data, without gradient tracking.
  Tensor detach() const { return Tensor(dims(), node_->data); }

  /// Deep copy preserving the requires_grad flag (leaf).
  Tensor clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  bool is_same(const Tensor& other) const { return node_ == other.node_; }

  /// Builds the result of a differentiable op. The gradient closure is kept
  /// only if some input requires gradients.
  static Tensor make_result(Shape dims, std::vector<double> data,
                            std::initializer_list<const Tensor*> inputs,
                            std::function<void(std::span<const double>)> bw) {
    Tensor out(std::move(dims), std::move(data));
    bool track = false;
    for (const Tensor* in : inputs) track = track || in->requires_grad();
    if (track) {
      out.node_->requires_grad = true;
      out.node_->is_leaf = false;
      for (const Tensor* in : inputs)
        if (in->requires_grad()) out.node_->parents.push_back(in->node_);
      out.node_->backward = std::move(bw);
    }
    return out;
  }

  static Tensor make_result(Shape dims, std::vector<double> data,
                            std::span<const Tensor> inputs,
                            std::function<void(std::span<const double>)> bw) {
    Tensor out(std::move(dims), std::move(data));
    bool track = false;
    for (const auto& in : inputs) track = track || in.requires_grad();
    if (track) {
      out.node_->requires_grad = true;
      out.node_->is_leaf = false;
      for (const auto& in : inputs)
        if (in.requires_grad()) out.node_->parents.push_back(in.node_);
      out.node_->backward = std::move(bw);
    }
    return out;
  }

  /// Raw node access for op implementations.
  const detail::NodePtr& node() const { return node_; }

 private:
  detail::NodePtr node_;
};

inline void Tensor::backward() const {
  require(size() == 1, "backward() needs a scalar loss, got " + shape_str(dims()));
  require(requires_grad(), "backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order)
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
  node_->ensure_grad();
  node_->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(n->grad);
  }
}

/// Accumulates `g` into the gradient of `t` when it participates in autodiff.
inline void accumulate_grad(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto& node = *t.node();
  node.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

/// Direct access to the gradient buffer of an op input, or nullptr when the
/// input does not need one.
inline double* grad_buffer(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  t.node()->ensure_grad();
  return t.node()->grad.data();
}

}  // namespace racap
