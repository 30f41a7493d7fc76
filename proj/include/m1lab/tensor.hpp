#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "m1lab/rng.hpp"

namespace m1lab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

// Dense row-major float64 tensor with reverse-mode differentiation.
//
// Tensor is a shared handle: copies alias the same storage. Every operation
// returns a fresh tensor; when graph recording is enabled and an input
// requires grad, the result carries a node pointing back at its inputs.
// Nodes are numbered from a global counter, so a node's inputs always have
// smaller numbers and sorting by number gives a topological order.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Only leaves may be written; intermediate results are immutable.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Seeds d(self)/d(self) = 1 and propagates to every reachable leaf that
  // requires grad. Leaf gradients accumulate until zero_grad().
  void backward() const;

  std::string_view op_name() const;
  // Node number, or 0 for leaves.
  std::uint64_t node_id() const;
  // Inputs recorded on this tensor's node (empty for leaves).
  std::vector<Tensor> node_inputs() const;

  Tensor detach() const;
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend Tensor make_op(std::string_view, Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(std::span<const double>, std::span<const std::span<double>>)>);
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Receives the output gradient and one span per input; the span is empty when
// that input does not need a gradient.
using BackwardFn = std::function<void(std::span<const double> out_grad, std::span<const std::span<double>> input_grads)>;

// Builds an operation result. The node and backward rule are attached only
// when recording is enabled and at least one input requires grad.
Tensor make_op(std::string_view name, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               BackwardFn backward);

// Tape nodes reachable from root, in recording order (topological).
std::vector<Tensor> graph_nodes(const Tensor& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace m1lab
