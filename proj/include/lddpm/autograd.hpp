#pragma once

// Reverse-mode automatic differentiation over Tensor.
//
// A Var is a shared handle to a graph node. Operations on Vars whose inputs
// require gradients record a backward closure; everything else is evaluated
// eagerly without building a graph, so inference on frozen weights costs no
// extra memory.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "lddpm/rng.hpp"
#include "lddpm/tensor.hpp"

namespace lddpm::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  /// Direct access for optimizers and initializers; never call inside a recorded graph.
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  const Shape& shape() const { return node_->value.shape(); }
  int dim(int axis) const { return node_->value.dim(axis); }
  float item() const { return node_->value.item(); }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var detach(const Var& v);
/// Builds an op result; the graph edge is dropped when no parent needs gradients.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
/// `root` must hold a single element unless `seed` is given.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

// Elementwise with numpy-style broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);
/// Gradient passes only where lo < a < hi.
Var clamp(const Var& a, float lo, float hi);

Var sum(const Var& a);
Var mean(const Var& a);
/// Reduction over `axes`; reduced dims are kept with size 1 when `keepdim`.
Var sum(const Var& a, std::vector<int> axes, bool keepdim);
Var mean(const Var& a, std::vector<int> axes, bool keepdim);

Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, std::vector<int> perm);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, int start, int length);

/// Batched matrix product. `b` may be rank 2 (shared across the batch of `a`).
Var matmul(const Var& a, const Var& b);
/// y = x W^T + b over the last axis of x. `bias` may be undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);
/// NCHW convolution; weight is [Cout, Cin, kh, kw]; `bias` may be undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, float eps = 1e-5f);
/// Softmax over the last axis.
Var softmax(const Var& a);
Var upsample_nearest(const Var& x, int factor);
Var avg_pool(const Var& x, int k);
/// Inverted dropout. Identity when p == 0.
Var dropout(const Var& x, float p, Rng& rng);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, float s) { return scale(a, s); }
inline Var operator*(float s, const Var& a) { return scale(a, s); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace lddpm::ag
