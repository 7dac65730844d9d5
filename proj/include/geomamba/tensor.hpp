#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace geomamba {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Raised when an op receives incompatible operand shapes. Carries the op name
/// and both offending shapes so callers can report them verbatim.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string op, const Shape& lhs, const Shape& rhs, const std::string& detail = {})
      : std::invalid_argument(op + ": shape mismatch " + shape_str(lhs) + " vs " + shape_str(rhs) +
                              (detail.empty() ? "" : " (" + detail + ")")),
        op_(std::move(op)),
        lhs_(lhs),
        rhs_(rhs) {}

  const std::string& op() const noexcept { return op_; }
  const Shape& lhs() const noexcept { return lhs_; }
  const Shape& rhs() const noexcept { return rhs_; }

 private:
  std::string op_;
  Shape lhs_;
  Shape rhs_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into the grads of self.inputs.
  std::function<void(Node& self)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline std::uint64_t next_seq() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Shared handle to a dense row-major f64 array that may take part in a
/// recorded computation graph. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != geomamba::numel(shape))
      throw ShapeError("tensor", shape, {values.size()}, "data length must equal product of shape");
    for (auto d : shape)
      if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension in " + shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    node->seq = detail::next_seq();
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = geomamba::numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = geomamba::numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  template <class Rng>
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(geomamba::numel(shape));
    for (auto& x : v) x = dist(rng);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  template <class Rng>
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(geomamba::numel(shape));
    for (auto& x : v) x = dist(rng);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// In-place access, intended for leaves (parameters, running statistics).
  std::span<double> mutable_data() { return node_->data; }
  double item() const {
    if (numel() != 1) throw ShapeError("item", shape(), {1}, "tensor is not a scalar");
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const noexcept { return !node_->backward; }
  const char* op_name() const noexcept { return node_->op; }

  bool has_grad() const noexcept { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of values; the result is a fresh leaf.
  Tensor detach_copy(bool requires_grad = false) const {
    return from(node_->shape, node_->data, requires_grad);
  }

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(const char*, Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(detail::Node&)>);
};

/// Creates an op output. When grad mode is on and any input requires grad the
/// output records its inputs and backward rule; otherwise it is a plain value.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  node->seq = detail::next_seq();
  bool track = false;
  if (grad_enabled())
    for (const auto& t : inputs) track = track || t.requires_grad();
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

/// Reverse-mode sweep: replays the recorded forward ops reachable from `loss`
/// in reverse creation order, each exactly once.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward", loss.shape(), {1}, "loss must be scalar");
  if (!loss.requires_grad()) return;
  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{loss.node().get()};
  std::unordered_set<const detail::Node*> seen{loss.node().get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto* n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace detail {
inline std::vector<double>* grad_of(const std::shared_ptr<Node>& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}
}  // namespace detail

}  // namespace geomamba
