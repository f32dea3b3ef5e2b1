// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with tape-free reverse-mode autodiff.
//
// Every op output that depends on a requires_grad input records a Node
// holding its inputs and a backward closure. backward() walks the nodes
// reachable from a scalar loss in reverse topological order, then marks
// them consumed. Storage is row-major, contiguous, and never aliased.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ltt {

using Shape = std::vector<std::size_t>;

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public TensorError {
 public:
  using TensorError::TensorError;
};

class NonFiniteError : public TensorError {
 public:
  using TensorError::TensorError;
};

class GraphError : public TensorError {
 public:
  using TensorError::TensorError;
};

class DegenerateInputError : public TensorError {
 public:
  using TensorError::TensorError;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorImpl;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the inputs that require grad.
  std::function<void(const TensorImpl& out)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  std::shared_ptr<Node> grad_fn;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Thread-local switch for graph recording. Evaluation code runs under
/// NoGradGuard so frozen forwards never build nodes.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Only valid on leaves; used by optimizers and initializers.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  /// Copy of the values with no history and requires_grad=false.
  Tensor detach() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Runs reverse-mode accumulation from a scalar loss. The graph is consumed:
/// a second call on the same loss (or any tensor sharing its nodes) throws.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Primitives. Binary ops broadcast only their second operand, and only when
// it is a scalar or its shape is a suffix of the first operand's shape.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Exact erf form: x * 0.5 * (1 + erf(x / sqrt(2))).
Tensor gelu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_axis(const Tensor& a, std::size_t axis);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Rows along the last axis scaled to unit Euclidean norm.
Tensor l2_normalize(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., k] · w[k, n] (+ bias[n]) over all leading dimensions.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});
/// Batched product a[B, m, k] · b[B, k, n], or a · bᵀ with b[B, n, k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor transpose(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// x[1, ...] tiled n times along axis 0.
Tensor repeat_batch(const Tensor& x, std::size_t n);
/// Drops `axis` by taking slice `index`.
Tensor select(const Tensor& x, std::size_t axis, std::size_t index);

/// Rows of table[V, D] gathered by id, shaped [ids.size(), D].
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// Mean over axis 1 of x[B, T, D] restricted to positions where mask != 0.
Tensor masked_mean(const Tensor& x, std::span<const double> mask);
Tensor diagonal(const Tensor& x);
/// out[i] = x[i, targets[i]] for x[N, C].
Tensor pick(const Tensor& x, std::span<const int> targets);

}  // namespace ltt
