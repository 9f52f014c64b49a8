#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace metroflow {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

// One record in the reverse-mode graph. `backward` reads this node's grad
// and accumulates local gradients into the parents' grad buffers.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

}  // namespace detail

// Dense n-dimensional array of doubles in row-major order, participating in
// a reverse-mode differentiation graph. A Tensor is a cheap handle: copying
// it copies the handle, not the storage. Operations build fresh nodes whose
// parents keep the inputs alive until the graph is released.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  // Low-level constructor for differentiable operations. `backward` receives
  // the finished node and must accumulate into parents[i]->grad for every
  // parent with requires_grad. The result requires grad iff any parent does.
  static Tensor make_op(Shape shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  bool requires_grad() const;
  bool is_leaf() const;

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();    // leaf tensors only
  const std::vector<double>& grad() const;  // StateError when absent
  bool has_grad() const;
  void zero_grad();

  double item() const;  // size-1 tensors only
  double at(const std::vector<std::size_t>& index) const;

  // Reverse-mode sweep from a scalar. Visits the graph in reverse
  // topological order exactly once and populates grad on every reachable
  // tensor with requires_grad; repeated calls accumulate until zero_grad.
  void backward() const;

  std::shared_ptr<detail::Node> impl() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

// Elementwise and structural operations.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor squeeze(const Tensor& x, std::size_t axis);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);

// T tensors of shape [B, d] stacked into [B, T, d].
Tensor stack_steps(const std::vector<Tensor>& steps);

// p must match x with the leading axis dropped; broadcasts over axis 0.
Tensor mul_broadcast(const Tensor& x, const Tensor& p);
Tensor add_broadcast(const Tensor& x, const Tensor& p);

}  // namespace metroflow
