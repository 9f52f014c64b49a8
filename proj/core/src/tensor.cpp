#include "metroflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <utility>

#include "metroflow/errors.hpp"

namespace metroflow {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) {
    n *= extent;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      out << 'x';
    }
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) {
    throw DimensionError("tensor shape must have at least one extent");
  }
  for (std::size_t extent : shape) {
    if (extent == 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_to_string(shape));
    }
  }
}

std::shared_ptr<detail::Node> new_leaf(Shape shape, std::vector<double> values,
                                       bool requires_grad) {
  validate_shape(shape);
  if (values.size() != numel(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  node->leaf = true;
  if (requires_grad) {
    node->grad.assign(node->values.size(), 0.0);
  }
  return node;
}

const detail::Node& deref(const Tensor& t, const char* what) {
  if (!t.defined()) {
    throw StateError(std::string(what) + ": tensor is not defined");
  }
  return *t.impl();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ: " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 0.0),
                         requires_grad));
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  std::size_t n = numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 1.0),
                         requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, value),
                         requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::make_op(Shape shape, std::vector<double> values,
                       std::vector<Tensor> parents,
                       std::function<void(detail::Node&)> backward) {
  validate_shape(shape);
  if (values.size() != numel(shape)) {
    throw DimensionError("op result value count does not match shape " +
                         shape_to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->leaf = false;
  node->parents.reserve(parents.size());
  for (const Tensor& parent : parents) {
    const detail::Node& p = deref(parent, "make_op");
    node->requires_grad = node->requires_grad || p.requires_grad;
    node->parents.push_back(parent.impl());
  }
  if (node->requires_grad) {
    node->grad.assign(node->values.size(), 0.0);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return deref(*this, "shape").shape; }

std::size_t Tensor::rank() const { return shape().size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return deref(*this, "size").values.size(); }

bool Tensor::requires_grad() const {
  return deref(*this, "requires_grad").requires_grad;
}

bool Tensor::is_leaf() const { return deref(*this, "is_leaf").leaf; }

const std::vector<double>& Tensor::values() const {
  return deref(*this, "values").values;
}

std::vector<double>& Tensor::mutable_values() {
  if (!defined()) {
    throw StateError("mutable_values: tensor is not defined");
  }
  if (!node_->leaf) {
    throw StateError("mutable_values: only leaf tensors may be mutated");
  }
  return node_->values;
}

const std::vector<double>& Tensor::grad() const {
  const detail::Node& node = deref(*this, "grad");
  if (!node.requires_grad) {
    throw StateError("grad: tensor does not require gradients");
  }
  return node.grad;
}

bool Tensor::has_grad() const {
  return defined() && node_->requires_grad && !node_->grad.empty();
}

void Tensor::zero_grad() {
  deref(*this, "zero_grad");
  if (node_->requires_grad) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
}

double Tensor::item() const {
  const detail::Node& node = deref(*this, "item");
  if (node.values.size() != 1) {
    throw DimensionError("item: tensor has " +
                         std::to_string(node.values.size()) + " elements");
  }
  return node.values[0];
}

double Tensor::at(const std::vector<std::size_t>& index) const {
  const detail::Node& node = deref(*this, "at");
  if (index.size() != node.shape.size()) {
    throw DimensionError("at: index rank " + std::to_string(index.size()) +
                         " does not match shape " +
                         shape_to_string(node.shape));
  }
  std::size_t flat = 0;
  std::size_t stride = 1;
  for (std::size_t axis = node.shape.size(); axis-- > 0;) {
    if (index[axis] >= node.shape[axis]) {
      throw DimensionError("at: index out of bounds for shape " +
                           shape_to_string(node.shape));
    }
    flat += index[axis] * stride;
    stride *= node.shape[axis];
  }
  return node.values[flat];
}

void Tensor::backward() const {
  const detail::Node& root_check = deref(*this, "backward");
  if (root_check.values.size() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " +
                         shape_to_string(root_check.shape));
  }
  if (!root_check.requires_grad) {
    return;  // constant loss: nothing depends on parameters
  }

  // Depth-first post-order over the requires_grad subgraph.
  enum class Mark : unsigned char { kOpen, kDone };
  std::unordered_map<detail::Node*, Mark> marks;
  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{node_.get()};
  while (!stack.empty()) {
    detail::Node* node = stack.back();
    auto [it, inserted] = marks.try_emplace(node, Mark::kOpen);
    if (inserted) {
      for (const auto& parent : node->parents) {
        if (parent->requires_grad && marks.find(parent.get()) == marks.end()) {
          stack.push_back(parent.get());
        }
      }
    } else {
      stack.pop_back();
      if (it->second == Mark::kOpen) {
        it->second = Mark::kDone;
        order.push_back(node);
      }
    }
  }

  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward) {
      node->backward(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::size_t n = a.size();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = av[i] + bv[i];
  }
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [](detail::Node& self) {
                           for (int side = 0; side < 2; ++side) {
                             detail::Node& p = *self.parents[side];
                             if (!p.requires_grad) continue;
                             for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               p.grad[i] += self.grad[i];
                             }
                           }
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::size_t n = a.size();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = av[i] - bv[i];
  }
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [](detail::Node& self) {
                           detail::Node& pa = *self.parents[0];
                           detail::Node& pb = *self.parents[1];
                           if (pa.requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               pa.grad[i] += self.grad[i];
                             }
                           }
                           if (pb.requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               pb.grad[i] -= self.grad[i];
                             }
                           }
                         });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  std::size_t n = a.size();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = av[i] * bv[i];
  }
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [](detail::Node& self) {
                           detail::Node& pa = *self.parents[0];
                           detail::Node& pb = *self.parents[1];
                           if (pa.requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               pa.grad[i] += self.grad[i] * pb.values[i];
                             }
                           }
                           if (pb.requires_grad) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i) {
                               pb.grad[i] += self.grad[i] * pa.values[i];
                             }
                           }
                         });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  std::size_t n = x.size();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = xv[i] * factor;
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [factor](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             p.grad[i] += self.grad[i] * factor;
                           }
                         });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::size_t n = x.size();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = xv[i] + value;
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             p.grad[i] += self.grad[i];
                           }
                         });
}

Tensor relu(const Tensor& x) {
  std::size_t n = x.size();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             if (p.values[i] > 0.0) {
                               p.grad[i] += self.grad[i];
                             }
                           }
                         });
}

Tensor sigmoid(const Tensor& x) {
  std::size_t n = x.size();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             double y = self.values[i];
                             p.grad[i] += self.grad[i] * y * (1.0 - y);
                           }
                         });
}

Tensor tanh(const Tensor& x) {
  std::size_t n = x.size();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::tanh(xv[i]);
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             double y = self.values[i];
                             p.grad[i] += self.grad[i] * (1.0 - y * y);
                           }
                         });
}

Tensor sum(const Tensor& x) {
  const auto& xv = x.values();
  double total = 0.0;
  for (double v : xv) {
    total += v;
  }
  return Tensor::make_op({1}, {total}, {x}, [](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double g = self.grad[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      p.grad[i] += g;
    }
  });
}

Tensor mean(const Tensor& x) {
  std::size_t n = x.size();
  const auto& xv = x.values();
  double total = 0.0;
  for (double v : xv) {
    total += v;
  }
  double inv_n = 1.0 / static_cast<double>(n);
  return Tensor::make_op({1}, {total * inv_n}, {x},
                         [inv_n](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           double g = self.grad[0] * inv_n;
                           for (std::size_t i = 0; i < p.grad.size(); ++i) {
                             p.grad[i] += g;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 tensors, got " +
                         shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw DimensionError("matmul: inner extents differ: " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      double aik = av[i * k + kk];
      const double* brow = bv.data() + kk * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
  return Tensor::make_op(
      {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        const auto& g = self.grad;
        if (pa.requires_grad) {
          // dA = G * B^T
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              const double* grow = g.data() + i * n;
              const double* brow = pb.values.data() + kk * n;
              for (std::size_t j = 0; j < n; ++j) {
                acc += grow[j] * brow[j];
              }
              pa.grad[i * k + kk] += acc;
            }
          }
        }
        if (pb.requires_grad) {
          // dB = A^T * G
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = g.data() + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
              double aik = pa.values[i * k + kk];
              double* bgrow = pb.grad.data() + kk * n;
              for (std::size_t j = 0; j < n; ++j) {
                bgrow[j] += aik * grow[j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural operations
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  validate_shape(shape);
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " +
                         shape_to_string(x.shape()) + " as " +
                         shape_to_string(shape));
  }
  return Tensor::make_op(std::move(shape), x.values(), {x},
                         [](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             p.grad[i] += self.grad[i];
                           }
                         });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = x.shape();
  if (axes.size() != in_shape.size()) {
    throw DimensionError("permute: axis list size " +
                         std::to_string(axes.size()) +
                         " does not match rank of " +
                         shape_to_string(in_shape));
  }
  std::vector<bool> seen(axes.size(), false);
  for (std::size_t axis : axes) {
    if (axis >= axes.size() || seen[axis]) {
      throw DimensionError("permute: invalid axis permutation");
    }
    seen[axis] = true;
  }
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    out_shape[i] = in_shape[axes[i]];
  }
  auto in_strides = row_major_strides(in_shape);
  auto out_strides = row_major_strides(out_shape);
  std::size_t n = x.size();
  std::size_t rank = axes.size();

  // source index for each destination index
  std::vector<std::size_t> src_of(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t dst = 0; dst < n; ++dst) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      src += idx[d] * in_strides[axes[d]];
    }
    src_of[dst] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  const auto& xv = x.values();
  std::vector<double> out(n);
  for (std::size_t dst = 0; dst < n; ++dst) {
    out[dst] = xv[src_of[dst]];
  }
  return Tensor::make_op(std::move(out_shape), std::move(out), {x},
                         [src_of = std::move(src_of)](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t dst = 0; dst < self.grad.size();
                                ++dst) {
                             p.grad[src_of[dst]] += self.grad[dst];
                           }
                         });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  const Shape& in_shape = x.shape();
  if (axis >= in_shape.size()) {
    throw DimensionError("slice: axis " + std::to_string(axis) +
                         " out of range for " + shape_to_string(in_shape));
  }
  if (length == 0 || start + length > in_shape[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) +
                         ") out of bounds for " + shape_to_string(in_shape));
  }
  Shape out_shape = in_shape;
  out_shape[axis] = length;

  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < in_shape.size(); ++d) {
    inner *= in_shape[d];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) {
    outer *= in_shape[d];
  }
  std::size_t in_axis = in_shape[axis];

  const auto& xv = x.values();
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = xv.data() + (o * in_axis + start) * inner;
    double* dst = out.data() + o * length * inner;
    std::copy(src, src + length * inner, dst);
  }
  return Tensor::make_op(
      std::move(out_shape), std::move(out), {x},
      [outer, inner, length, in_axis, start](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t o = 0; o < outer; ++o) {
          double* dst = p.grad.data() + (o * in_axis + start) * inner;
          const double* src = self.grad.data() + o * length * inner;
          for (std::size_t i = 0; i < length * inner; ++i) {
            dst[i] += src[i];
          }
        }
      });
}

Tensor squeeze(const Tensor& x, std::size_t axis) {
  const Shape& in_shape = x.shape();
  if (axis >= in_shape.size() || in_shape[axis] != 1) {
    throw DimensionError("squeeze: axis " + std::to_string(axis) +
                         " is not a unit extent of " +
                         shape_to_string(in_shape));
  }
  if (in_shape.size() == 1) {
    return reshape(x, {1});
  }
  Shape out_shape;
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    if (d != axis) out_shape.push_back(in_shape[d]);
  }
  return reshape(x, std::move(out_shape));
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || axis >= sa.size()) {
    throw DimensionError("concat: incompatible ranks " + shape_to_string(sa) +
                         " and " + shape_to_string(sb));
  }
  for (std::size_t d = 0; d < sa.size(); ++d) {
    if (d != axis && sa[d] != sb[d]) {
      throw DimensionError("concat: shapes differ off-axis: " +
                           shape_to_string(sa) + " vs " + shape_to_string(sb));
    }
  }
  Shape out_shape = sa;
  out_shape[axis] = sa[axis] + sb[axis];

  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < sa.size(); ++d) {
    inner *= sa[d];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) {
    outer *= sa[d];
  }
  std::size_t len_a = sa[axis] * inner;
  std::size_t len_b = sb[axis] * inner;

  const auto& avv = a.values();
  const auto& bvv = b.values();
  std::vector<double> out(outer * (len_a + len_b));
  for (std::size_t o = 0; o < outer; ++o) {
    double* dst = out.data() + o * (len_a + len_b);
    std::copy(avv.data() + o * len_a, avv.data() + (o + 1) * len_a, dst);
    std::copy(bvv.data() + o * len_b, bvv.data() + (o + 1) * len_b,
              dst + len_a);
  }
  return Tensor::make_op(
      std::move(out_shape), std::move(out), {a, b},
      [outer, len_a, len_b](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + o * (len_a + len_b);
          if (pa.requires_grad) {
            double* dst = pa.grad.data() + o * len_a;
            for (std::size_t i = 0; i < len_a; ++i) dst[i] += src[i];
          }
          if (pb.requires_grad) {
            double* dst = pb.grad.data() + o * len_b;
            for (std::size_t i = 0; i < len_b; ++i) dst[i] += src[len_a + i];
          }
        }
      });
}

Tensor stack_steps(const std::vector<Tensor>& steps) {
  if (steps.empty()) {
    throw DimensionError("stack_steps: need at least one step");
  }
  const Shape& s0 = steps[0].shape();
  if (s0.size() != 2) {
    throw DimensionError("stack_steps: steps must be rank-2 [batch, features]");
  }
  for (const Tensor& t : steps) {
    if (t.shape() != s0) {
      throw DimensionError("stack_steps: step shapes differ");
    }
  }
  std::size_t batch = s0[0];
  std::size_t features = s0[1];
  std::size_t n_steps = steps.size();
  std::vector<double> out(batch * n_steps * features);
  for (std::size_t t = 0; t < n_steps; ++t) {
    const auto& sv = steps[t].values();
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy(sv.data() + b * features, sv.data() + (b + 1) * features,
                out.data() + (b * n_steps + t) * features);
    }
  }
  std::vector<Tensor> parents(steps.begin(), steps.end());
  return Tensor::make_op(
      {batch, n_steps, features}, std::move(out), std::move(parents),
      [batch, n_steps, features](detail::Node& self) {
        for (std::size_t t = 0; t < n_steps; ++t) {
          detail::Node& p = *self.parents[t];
          if (!p.requires_grad) continue;
          for (std::size_t b = 0; b < batch; ++b) {
            const double* src =
                self.grad.data() + (b * n_steps + t) * features;
            double* dst = p.grad.data() + b * features;
            for (std::size_t f = 0; f < features; ++f) {
              dst[f] += src[f];
            }
          }
        }
      });
}

namespace {

void check_broadcast_shapes(const Tensor& x, const Tensor& p,
                            const char* op) {
  const Shape& xs = x.shape();
  const Shape& ps = p.shape();
  if (xs.size() != ps.size() + 1 ||
      !std::equal(ps.begin(), ps.end(), xs.begin() + 1)) {
    throw DimensionError(std::string(op) +
                         ": parameter shape " + shape_to_string(ps) +
                         " must equal " + shape_to_string(xs) +
                         " without its leading axis");
  }
}

}  // namespace

Tensor mul_broadcast(const Tensor& x, const Tensor& p) {
  check_broadcast_shapes(x, p, "mul_broadcast");
  std::size_t batch = x.dim(0);
  std::size_t block = p.size();
  const auto& xv = x.values();
  const auto& pv = p.values();
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xrow = xv.data() + b * block;
    double* orow = out.data() + b * block;
    for (std::size_t i = 0; i < block; ++i) {
      orow[i] = xrow[i] * pv[i];
    }
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x, p},
      [batch, block](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pp = *self.parents[1];
        for (std::size_t b = 0; b < batch; ++b) {
          const double* grow = self.grad.data() + b * block;
          if (px.requires_grad) {
            double* xg = px.grad.data() + b * block;
            for (std::size_t i = 0; i < block; ++i) {
              xg[i] += grow[i] * pp.values[i];
            }
          }
          if (pp.requires_grad) {
            const double* xrow = px.values.data() + b * block;
            for (std::size_t i = 0; i < block; ++i) {
              pp.grad[i] += grow[i] * xrow[i];
            }
          }
        }
      });
}

Tensor add_broadcast(const Tensor& x, const Tensor& p) {
  check_broadcast_shapes(x, p, "add_broadcast");
  std::size_t batch = x.dim(0);
  std::size_t block = p.size();
  const auto& xv = x.values();
  const auto& pv = p.values();
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xrow = xv.data() + b * block;
    double* orow = out.data() + b * block;
    for (std::size_t i = 0; i < block; ++i) {
      orow[i] = xrow[i] + pv[i];
    }
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x, p},
      [batch, block](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pp = *self.parents[1];
        for (std::size_t b = 0; b < batch; ++b) {
          const double* grow = self.grad.data() + b * block;
          if (px.requires_grad) {
            double* xg = px.grad.data() + b * block;
            for (std::size_t i = 0; i < block; ++i) {
              xg[i] += grow[i];
            }
          }
          if (pp.requires_grad) {
            for (std::size_t i = 0; i < block; ++i) {
              pp.grad[i] += grow[i];
            }
          }
        }
      });
}

}  // namespace metroflow
