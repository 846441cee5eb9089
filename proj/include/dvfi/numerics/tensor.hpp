#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dvfi/error.hpp"

namespace dvfi::nn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename S>
using Vec = Eigen::Array<S, Eigen::Dynamic, 1>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename S>
struct Node {
  Shape shape;
  Vec<S> value;
  Vec<S> grad; // empty until something flows into it
  bool requires_grad = false;
  std::string op = "leaf";
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward_fn;

  template <typename Derived>
  void accumulate(const Eigen::ArrayBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = Vec<S>::Zero(value.size());
    grad += g;
  }

  void accumulate_at(Index i, S g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = Vec<S>::Zero(value.size());
    grad[i] += g;
  }
};

/// Handle to a node of a dynamically recorded computation graph.
///
/// Copies share the underlying node. Values are stored row-major in a flat
/// Eigen array; `shape` carries the logical dimensions.
template <typename S>
class Tensor {
public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, Vec<S> value, bool requires_grad = false) {
    if (nn::numel(shape) != value.size())
      throw ShapeError("tensor of shape " + to_string(shape) + " given " +
                       std::to_string(value.size()) + " values");
    for (Index d : shape)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + to_string(shape));
    auto node = std::make_shared<Node<S>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = nn::numel(shape);
    return from(std::move(shape), Vec<S>::Zero(n), requires_grad);
  }
  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    const Index n = nn::numel(shape);
    return from(std::move(shape), Vec<S>::Constant(n, v), requires_grad);
  }
  static Tensor scalar(S v, bool requires_grad = false) {
    return from({1}, Vec<S>::Constant(1, v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return node_->value.size(); }

  const Vec<S>& value() const { return node_->value; }
  /// Direct write access for optimizers; bypasses the graph.
  Vec<S>& mutable_value() { return node_->value; }
  S item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  S at(std::initializer_list<Index> idx) const {
    Index flat = 0;
    std::size_t k = 0;
    for (Index i : idx) flat = flat * node_->shape.at(k++) + i;
    return node_->value[flat];
  }

  bool has_grad() const { return node_->grad.size() > 0; }
  const Vec<S>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  const std::string& op() const { return node_->op; }
  const std::string& name() const { return node_->name; }
  void set_name(std::string n) { node_->name = std::move(n); }

  /// Same values, cut from the graph.
  Tensor detach() const { return from(shape(), value(), false); }

  const std::shared_ptr<Node<S>>& node() const { return node_; }

private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <typename S>
Tensor<S> make_op(std::string op, Shape shape, Vec<S> value,
                  std::vector<Tensor<S>> inputs,
                  std::function<void(const Node<S>&)> backward_fn) {
  if (!value.allFinite()) throw NumericError("non-finite value produced by " + op);
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  for (const auto& in : inputs) node->requires_grad |= in.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>(std::move(node));
}

// Post-order over parents, deterministic in parent order.
template <typename S>
std::vector<Node<S>*> topo_order(Node<S>* root) {
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

} // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are reset first.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.value().allFinite()) throw NumericError("backward() on non-finite loss");
  if (!loss.requires_grad()) return;
  const auto order = detail::topo_order(loss.node().get());
  for (Node<S>* n : order)
    if (!n->parents.empty()) n->grad.resize(0);
  loss.node()->grad = Vec<S>::Ones(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn && n->grad.size() > 0) n->backward_fn(*n);
  }
}

/// Named parameters in lexicographic order.
template <typename S>
class ParamStore {
public:
  using Map = std::map<std::string, Tensor<S>>;

  Tensor<S>& add(const std::string& name, Shape shape, Vec<S> value) {
    if (params_.count(name)) throw ValidationError("duplicate parameter '" + name + "'");
    auto t = Tensor<S>::from(std::move(shape), std::move(value), true);
    t.set_name(name);
    return params_.emplace(name, std::move(t)).first->second;
  }

  const Tensor<S>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<S>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

private:
  Map params_;
};

/// Op-name histogram and parameter names reachable from a root tensor.
struct GraphAudit {
  std::map<std::string, int> op_counts;
  std::set<std::string> param_names;

  int count(const std::string& op) const {
    auto it = op_counts.find(op);
    return it == op_counts.end() ? 0 : it->second;
  }
};

template <typename S>
GraphAudit audit_graph(const Tensor<S>& root) {
  GraphAudit audit;
  for (Node<S>* n : detail::topo_order(root.node().get())) {
    ++audit.op_counts[n->op];
    if (!n->name.empty()) audit.param_names.insert(n->name);
  }
  return audit;
}

} // namespace dvfi::nn
