#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pni {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string op;  // "leaf" for tensors not produced by an operation
  std::vector<Tensor> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;
};

}  // namespace detail

/// Dense row-major array of doubles with an optional reverse-mode history.
///
/// A Tensor is a cheap handle; copies share the same node. Data of a tensor
/// produced by an operation is immutable. Leaf tensors (parameters) may be
/// updated in place through mutable_data() between graph constructions.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Result of a primitive operation. Parents that do not require grad are
  /// kept anyway so backward functions can index them positionally; when no
  /// parent requires grad the history is dropped.
  static Tensor from_op(std::string op, Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents, std::function<void(detail::Node&)> backward);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  bool is_leaf() const;
  const std::string& op() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Gradient storage, zero-initialised on first access.
  std::span<double> grad_buffer() const;
  void zero_grad() const;

  std::span<double> mutable_data();
  /// Copy of the data as a new leaf without history.
  Tensor detach(bool requires_grad = false) const;

  const std::vector<Tensor>& parents() const;
  detail::Node* node() const noexcept { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Operations reachable from a root, in topological order (inputs first).
class Graph {
 public:
  explicit Graph(const Tensor& root);

  std::size_t size() const noexcept { return order_.size(); }
  std::vector<std::string> op_names() const;

  /// Seeds d(root)/d(root) = 1 and replays backward functions in reverse
  /// order. Gradients accumulate into existing buffers.
  void backward();

 private:
  Tensor root_;
  std::vector<detail::Node*> order_;
};

/// Populates grads of every requires_grad tensor reachable from `loss`.
/// Throws ContractError unless `loss` holds exactly one element.
void backward(const Tensor& loss);

}  // namespace pni
