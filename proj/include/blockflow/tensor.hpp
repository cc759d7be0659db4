#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations whose inputs
// require gradients record a backward closure on the result node; calling
// backward() on a scalar loss topologically orders the recorded graph (the
// Tape) and replays it in reverse. Leaf gradients accumulate across calls,
// intermediate gradients are recomputed each time.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockflow/errors.hpp"

namespace blockflow {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf that receives gradients.
  static Tensor parameter(const Shape& shape, std::vector<double> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Extent of axis i; negative i counts from the back.
  std::size_t dim(int i) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Only valid on tensors with no recorded history (leaves and constants).
  std::span<double> mutable_values();
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  bool has_grad() const;
  bool requires_grad() const;
  bool is_leaf() const;
  std::uint64_t id() const;

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  void zero_grad();
  // Same values, no history, no gradient requirement.
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

// Topologically ordered view of the graph feeding a scalar loss.
class Tape {
 public:
  static Tape record(const Tensor& loss);
  // Nodes in forward order; every node precedes all of its consumers.
  const std::vector<detail::Node*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }
  void backward();

 private:
  Tensor loss_;
  std::vector<detail::Node*> order_;
};

void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_lastdim(const Tensor& a);   // keeps a trailing extent of 1
Tensor mean_lastdim(const Tensor& a);  // keeps a trailing extent of 1

// ---- shape manipulation ----
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose_last2(const Tensor& a);
Tensor slice_lastdim(const Tensor& a, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// rows of a rank-2 table selected by index; result [indices.size(), cols]
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

// ---- linear algebra and normalization ----
// a [..., m, k] x b [..., k, n]; batch extents broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_lastdim(const Tensor& x);

struct LayerNormStats {
  Tensor normalized;
  Tensor mean;  // [..., 1], no history
  Tensor var;   // [..., 1], no history
};
inline constexpr double kLayerNormEps = 1e-5;
LayerNormStats layernorm_stats(const Tensor& h, double eps = kLayerNormEps);
Tensor layernorm(const Tensor& h, double eps = kLayerNormEps);

}  // namespace blockflow
