#include "pni/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "pni/error.hpp"

namespace pni {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (pni::numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
  for (auto extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->op = "leaf";
  node_ = std::move(node);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = pni::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::from_op(std::string op, Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                       std::function<void(detail::Node&)> backward) {
  Tensor out(std::move(shape), std::move(data), false);
  out.node_->op = std::move(op);
  const bool needs = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->parents = std::move(parents);
    out.node_->backward = std::move(backward);
  }
  return out;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->parents.empty() && !node_->backward; }
const std::string& Tensor::op() const { return node_->op; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::grad_buffer() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() const {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw ContractError("in-place mutation of a tensor produced by '" + node_->op + "'");
  return node_->data;
}

Tensor Tensor::detach(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }

const std::vector<Tensor>& Tensor::parents() const { return node_->parents; }

Graph::Graph(const Tensor& root) : root_(root) {
  if (!root.defined()) throw ContractError("graph root is undefined");
  // Iterative post-order DFS over nodes that require grad.
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].node();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

std::vector<std::string> Graph::op_names() const {
  std::vector<std::string> names;
  names.reserve(order_.size());
  for (const auto* n : order_) names.push_back(n->op);
  return names;
}

void Graph::backward() {
  if (root_.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(root_.shape()));
  }
  if (!root_.requires_grad()) return;
  // Intermediate grads are per-pass; only leaves accumulate across passes.
  for (auto* n : order_) {
    if (n->backward || n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
  }
  root_.node()->grad[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

void backward(const Tensor& loss) {
  if (loss.defined() && loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  Graph(loss).backward();
}

}  // namespace pni
