#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "heightbins/errors.hpp"

namespace heightbins {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Row-major strides of a shape.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

/// One value in the recorded computation graph. `inputs` and `backward` are
/// only set for nodes produced while gradient recording is enabled.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to a dense row-major array of doubles in the computation graph.
/// Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (data.size() != numel_of(shape)) {
      throw ContractViolation("Tensor: data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  std::span<const double> data() const { return node_->data; }
  /// Mutable access for parameter updates and test setup; does not record.
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t node_id() const { return node_->id; }
  const char* op() const { return node_->op; }
  double item() const {
    if (numel() != 1) throw ContractViolation("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }
  double at(std::size_t i) const { return node_->data.at(i); }

  void zero_grad() { node_->grad.clear(); }
  std::vector<double>& grad_buffer() { return node_->ensure_grad(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return from(node_->shape, node_->data, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds a result node; records inputs and the reverse rule only when
/// recording is enabled and some input requires a gradient.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs, BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  n->id = detail::next_node_id();
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& t : inputs) n->inputs.push_back(t.node());
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          const std::vector<Tensor>& inputs, BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  n->id = detail::next_node_id();
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& t : inputs) n->inputs.push_back(t.node());
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

/// Ordered record of the operations reachable from a root, inputs first.
class Tape {
 public:
  struct Entry {
    std::uint64_t node_id;
    const char* op;
    std::vector<std::uint64_t> inputs;
  };

  static Tape record(const Tensor& root) {
    Tape tape;
    std::vector<Node*> stack{root.node().get()};
    std::unordered_set<const Node*> seen{root.node().get()};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      tape.nodes_.push_back(n);
      for (const auto& in : n->inputs) {
        if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
      }
    }
    // Node ids grow with creation order and inputs exist before their
    // consumers, so ascending id order is a topological order.
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const Node* a, const Node* b) { return a->id < b->id; });
    return tape;
  }

  std::vector<Entry> entries() const {
    std::vector<Entry> out;
    out.reserve(nodes_.size());
    for (const Node* n : nodes_) {
      Entry e{n->id, n->op, {}};
      for (const auto& in : n->inputs) e.inputs.push_back(in->id);
      out.push_back(std::move(e));
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

  void replay_reverse() const {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
    }
  }

 private:
  std::vector<Node*> nodes_;
};

/// Accumulates d(loss)/d(x) into every requires_grad ancestor of `loss`.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractViolation("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  const Tape tape = Tape::record(loss);
  loss.node()->ensure_grad()[0] += 1.0;
  tape.replay_reverse();
}

}  // namespace heightbins
