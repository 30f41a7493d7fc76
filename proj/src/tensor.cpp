#include "m1lab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#include "m1lab/error.hpp"

namespace m1lab {

namespace detail {

struct Node {
  std::uint64_t id = 0;
  std::string_view op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

}  // namespace detail

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};
thread_local bool t_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) fail(ErrorKind::kDimension, "tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (data.size() != shape_numel(shape)) {
    fail(ErrorKind::kDimension, "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) fail(ErrorKind::kState, "use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) fail(ErrorKind::kDimension, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return data().size(); }

std::span<const double> Tensor::data() const {
  if (!impl_) fail(ErrorKind::kState, "use of undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) fail(ErrorKind::kState, "use of undefined tensor");
  if (impl_->node) fail(ErrorKind::kState, "cannot mutate the result of '" + std::string(impl_->node->op) + "'");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::kDimension, "item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::is_leaf() const { return impl_ && !impl_->node; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) fail(ErrorKind::kState, "tensor has no gradient");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!impl_) fail(ErrorKind::kState, "use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
}

std::string_view Tensor::op_name() const {
  if (!impl_ || !impl_->node) return "leaf";
  return impl_->node->op;
}

std::uint64_t Tensor::node_id() const { return impl_ && impl_->node ? impl_->node->id : 0; }

std::vector<Tensor> Tensor::node_inputs() const {
  if (!impl_ || !impl_->node) return {};
  return impl_->node->inputs;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor make_op(std::string_view name, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               BackwardFn backward) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(data), false);
  if (!t_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<detail::Node>();
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  node->op = name;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->node = std::move(node);
  return out;
}

std::vector<Tensor> graph_nodes(const Tensor& root) {
  std::vector<Tensor> nodes;
  if (!root.defined() || root.is_leaf()) return nodes;
  std::unordered_set<std::uint64_t> seen;
  std::vector<Tensor> stack{root};
  seen.insert(root.node_id());
  while (!stack.empty()) {
    Tensor t = std::move(stack.back());
    stack.pop_back();
    for (const auto& in : t.node_inputs()) {
      if (in.is_leaf() || !in.requires_grad()) continue;
      if (seen.insert(in.node_id()).second) stack.push_back(in);
    }
    nodes.push_back(std::move(t));
  }
  std::sort(nodes.begin(), nodes.end(), [](const Tensor& a, const Tensor& b) { return a.node_id() < b.node_id(); });
  return nodes;
}

void Tensor::backward() const {
  if (!requires_grad()) fail(ErrorKind::kState, "backward() on a tensor that does not require grad");
  if (numel() != 1) fail(ErrorKind::kDimension, "backward() needs a scalar, got " + shape_str(shape()));
  auto nodes = graph_nodes(*this);
  for (auto& n : nodes) n.impl_->grad.assign(n.numel(), 0.0);
  if (is_leaf()) {
    impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;
    return;
  }
  impl_->grad[0] = 1.0;

  std::vector<std::span<double>> input_grads;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto& impl = *it->impl_;
    const auto& node = *impl.node;
    input_grads.clear();
    for (const auto& in : node.inputs) {
      if (!in.requires_grad()) {
        input_grads.emplace_back();
        continue;
      }
      auto& g = in.impl_->grad;
      if (g.empty()) g.assign(in.impl_->data.size(), 0.0);
      input_grads.emplace_back(g);
    }
    node.backward(impl.grad, input_grads);
  }
  // Intermediate gradients are not needed once propagated.
  for (auto& n : nodes) {
    if (!n.same_as(*this)) std::vector<double>().swap(n.impl_->grad);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace m1lab
