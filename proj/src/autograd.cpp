#include "lddpm/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace lddpm::ag {

void Node::accumulate(const Tensor& g) {
  if (g.shape() != value.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " + shape_str(value.shape()));
  }
  if (grad.empty()) {
    grad = g;
    return;
  }
  float* dst = grad.data();
  const float* src = g.data();
  const std::int64_t n = g.size();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var detach(const Var& v) { return Var(v.value(), false); }

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  const bool needs = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node());
  out.node_->backward = std::move(backward);
  return out;
}

void backward(const Var& root) {
  if (root.value().size() != 1) throw ShapeError("backward() needs a scalar root; got " + shape_str(root.shape()));
  backward(root, Tensor(root.shape(), 1.0f));
}

void backward(const Var& root, const Tensor& seed) {
  if (!root.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    n->grad = Tensor();  // interior gradients are not retained
  }
}

namespace {

inline bool wants(const Node& self, std::size_t k) { return self.parents[k]->requires_grad; }

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const Tensor ab = broadcast_to(a, out_shape);
  const Tensor bb = broadcast_to(b, out_shape);
  Tensor out(out_shape);
  const float* pa = ab.data();
  const float* pb = bb.data();
  float* po = out.data();
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  return out;
}

// Unary op whose derivative is expressed via (x, y, g).
template <class Fwd, class Bwd>
Var unary(const Var& a, Fwd fwd, Bwd dfdx) {
  return make_result(map_unary(a.value(), fwd), {a}, [dfdx](Node& self) {
    const Tensor& x = self.parents[0]->value;
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    Tensor dx(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) dx[i] = g[i] * dfdx(x[i], y[i]);
    self.parents[0]->accumulate(dx);
  });
}

inline float stable_softplus(float x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline float stable_sigmoid(float x) {
  if (x >= 0) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return make_result(map_binary(a.value(), b.value(), [](float x, float y) { return x + y; }), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(sum_to(self.grad, self.parents[0]->value.shape()));
    if (wants(self, 1)) self.parents[1]->accumulate(sum_to(self.grad, self.parents[1]->value.shape()));
  });
}

Var sub(const Var& a, const Var& b) {
  return make_result(map_binary(a.value(), b.value(), [](float x, float y) { return x - y; }), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(sum_to(self.grad, self.parents[0]->value.shape()));
    if (wants(self, 1)) {
      Tensor g = sum_to(self.grad, self.parents[1]->value.shape());
      for (auto& v : g.values()) v = -v;
      self.parents[1]->accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  return make_result(map_binary(a.value(), b.value(), [](float x, float y) { return x * y; }), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (wants(self, 0)) {
      self.parents[0]->accumulate(sum_to(map_binary(self.grad, bv, [](float g, float y) { return g * y; }), av.shape()));
    }
    if (wants(self, 1)) {
      self.parents[1]->accumulate(sum_to(map_binary(self.grad, av, [](float g, float x) { return g * x; }), bv.shape()));
    }
  });
}

Var div(const Var& a, const Var& b) {
  return make_result(map_binary(a.value(), b.value(), [](float x, float y) { return x / y; }), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (wants(self, 0)) {
      self.parents[0]->accumulate(sum_to(map_binary(self.grad, bv, [](float g, float y) { return g / y; }), av.shape()));
    }
    if (wants(self, 1)) {
      // d(a/b)/db = -y / b
      const Tensor gy = map_binary(self.grad, self.value, [](float g, float y) { return -g * y; });
      self.parents[1]->accumulate(sum_to(map_binary(gy, bv, [](float g, float y) { return g / y; }), bv.shape()));
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0f); }

Var scale(const Var& a, float s) {
  return make_result(map_unary(a.value(), [s](float x) { return x * s; }), {a}, [s](Node& self) {
    self.parents[0]->accumulate(map_unary(self.grad, [s](float g) { return g * s; }));
  });
}

Var add_scalar(const Var& a, float s) {
  return make_result(map_unary(a.value(), [s](float x) { return x + s; }), {a},
                     [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var exp(const Var& a) {
  return unary(a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Var sqrt(const Var& a) {
  return unary(a, [](float x) { return std::sqrt(x); }, [](float, float y) { return 0.5f / y; });
}

Var square(const Var& a) {
  return unary(a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Var abs(const Var& a) {
  return unary(
      a, [](float x) { return std::abs(x); },
      [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

Var tanh(const Var& a) {
  return unary(a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(a, stable_sigmoid, [](float, float y) { return y * (1.0f - y); });
}

Var silu(const Var& a) {
  return unary(
      a, [](float x) { return x * stable_sigmoid(x); },
      [](float x, float) {
        const float s = stable_sigmoid(x);
        return s * (1.0f + x * (1.0f - s));
      });
}

Var relu(const Var& a) {
  return unary(a, [](float x) { return x > 0.0f ? x : 0.0f; }, [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Var softplus(const Var& a) {
  return unary(a, stable_softplus, [](float x, float) { return stable_sigmoid(x); });
}

Var clamp(const Var& a, float lo, float hi) {
  return unary(
      a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x > lo && x < hi) ? 1.0f : 0.0f; });
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (float v : a.value().values()) acc += v;
  return make_result(Tensor::scalar(static_cast<float>(acc)), {a}, [](Node& self) {
    self.parents[0]->accumulate(Tensor(self.parents[0]->value.shape(), self.grad.item()));
  });
}

Var mean(const Var& a) {
  const auto n = static_cast<float>(a.value().size());
  return scale(sum(a), 1.0f / n);
}

Var sum(const Var& a, std::vector<int> axes, bool keepdim) {
  const Shape& in = a.shape();
  Shape kept = in;
  for (int& ax : axes) {
    ax = normalize_axis(ax, a.value().rank());
    kept[static_cast<std::size_t>(ax)] = 1;
  }
  Shape out_shape;
  if (keepdim) {
    out_shape = kept;
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (std::find(axes.begin(), axes.end(), static_cast<int>(i)) == axes.end()) out_shape.push_back(in[i]);
    }
    if (out_shape.empty()) out_shape = {1};
  }
  Tensor reduced = sum_to(a.value(), kept).reshaped(out_shape);
  return make_result(std::move(reduced), {a}, [kept](Node& self) {
    self.parents[0]->accumulate(broadcast_to(self.grad.reshaped(kept), self.parents[0]->value.shape()));
  });
}

Var mean(const Var& a, std::vector<int> axes, bool keepdim) {
  std::int64_t count = 1;
  for (int ax : axes) count *= a.dim(ax);
  return scale(sum(a, std::move(axes), keepdim), 1.0f / static_cast<float>(count));
}

Var reshape(const Var& a, Shape shape) {
  return make_result(a.value().reshaped(std::move(shape)), {a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.reshaped(self.parents[0]->value.shape()));
  });
}

namespace {

Tensor permute_tensor(const Tensor& t, const std::vector<int>& perm) {
  const int r = t.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r));
  std::int64_t acc = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_strides[static_cast<std::size_t>(i)] = acc;
    acc *= t.shape()[static_cast<std::size_t>(i)];
  }
  std::vector<std::int64_t> st(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = t.shape()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    st[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  Tensor out(out_shape);
  if (out.size() == 0) return out;
  std::vector<int> idx(static_cast<std::size_t>(r), 0);
  const float* src = t.data();
  float* dst = out.data();
  const std::int64_t n = out.size();
  const int inner = out_shape[static_cast<std::size_t>(r - 1)];
  const std::int64_t inner_st = st[static_cast<std::size_t>(r - 1)];
  std::int64_t off = 0;
  for (std::int64_t o = 0; o < n; o += inner) {
    for (int j = 0; j < inner; ++j) dst[o + j] = src[off + j * inner_st];
    for (int d = r - 2; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      off += st[du];
      if (idx[du] < out_shape[du]) break;
      off -= st[du] * out_shape[du];
      idx[du] = 0;
    }
  }
  return out;
}

}  // namespace

Var permute(const Var& a, std::vector<int> perm) {
  std::vector<int> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return make_result(permute_tensor(a.value(), perm), {a},
                     [inverse](Node& self) { self.parents[0]->accumulate(permute_tensor(self.grad, inverse)); });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const int r = parts[0].value().rank();
  axis = normalize_axis(axis, r);
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && s[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(out_shape));
      }
    }
    total += s[static_cast<std::size_t>(axis)];
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  Tensor out(out_shape);
  std::vector<int> lens;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const int len = p.dim(axis);
    lens.push_back(len);
    const float* src = p.value().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * len * inner, src + (o + 1) * len * inner, out.data() + (o * total + offset) * inner);
    }
    offset += len;
  }
  return make_result(std::move(out), parts, [lens, outer, inner, total](Node& self) {
    std::int64_t off = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      const int len = lens[k];
      if (self.parents[k]->requires_grad) {
        Tensor g(self.parents[k]->value.shape());
        for (std::int64_t o = 0; o < outer; ++o) {
          const float* src = self.grad.data() + (o * total + off) * inner;
          std::copy(src, src + len * inner, g.data() + o * len * inner);
        }
        self.parents[k]->accumulate(g);
      }
      off += len;
    }
  });
}

Var slice(const Var& a, int axis, int start, int length) {
  const int r = a.value().rank();
  axis = normalize_axis(axis, r);
  const int full = a.dim(axis);
  if (start < 0 || length < 0 || start + length > full) throw ShapeError("slice out of range");
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  Tensor out(out_shape);
  const float* src = a.value().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(src + (o * full + start) * inner, src + (o * full + start + length) * inner,
              out.data() + o * length * inner);
  }
  return make_result(std::move(out), {a}, [outer, inner, full, start, length](Node& self) {
    Tensor g(self.parents[0]->value.shape(), 0.0f);
    for (std::int64_t o = 0; o < outer; ++o) {
      const float* s = self.grad.data() + o * length * inner;
      std::copy(s, s + length * inner, g.data() + (o * full + start) * inner);
    }
    self.parents[0]->accumulate(g);
  });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2) throw ShapeError("matmul needs rank >= 2");
  const int m = av.dim(-2);
  const int k = av.dim(-1);
  const int n = bv.dim(-1);
  if (bv.dim(-2) != k) throw ShapeError("matmul inner mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::int64_t batch = av.size() / (static_cast<std::int64_t>(m) * k);
  const bool shared = bv.rank() == 2;
  if (!shared) {
    Shape la(av.shape().begin(), av.shape().end() - 2);
    Shape lb(bv.shape().begin(), bv.shape().end() - 2);
    if (la != lb) throw ShapeError("matmul batch mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out(out_shape);
  const std::int64_t sa = static_cast<std::int64_t>(m) * k;
  const std::int64_t sb = shared ? 0 : static_cast<std::int64_t>(k) * n;
  const std::int64_t sc = static_cast<std::int64_t>(m) * n;
  if (shared) {
    gemm(false, false, static_cast<int>(batch * m), n, k, 1.0f, av.data(), k, bv.data(), n, 0.0f, out.data(), n);
  } else {
    for (std::int64_t i = 0; i < batch; ++i) {
      gemm(false, false, m, n, k, 1.0f, av.data() + i * sa, k, bv.data() + i * sb, n, 0.0f, out.data() + i * sc, n);
    }
  }
  return make_result(std::move(out), {a, b}, [=](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& B = self.parents[1]->value;
    const Tensor& G = self.grad;
    if (wants(self, 0)) {
      Tensor ga(A.shape());
      if (shared) {
        gemm(false, true, static_cast<int>(batch * m), k, n, 1.0f, G.data(), n, B.data(), n, 0.0f, ga.data(), k);
      } else {
        for (std::int64_t i = 0; i < batch; ++i) {
          gemm(false, true, m, k, n, 1.0f, G.data() + i * sc, n, B.data() + i * sb, n, 0.0f, ga.data() + i * sa, k);
        }
      }
      self.parents[0]->accumulate(ga);
    }
    if (wants(self, 1)) {
      Tensor gb(B.shape(), 0.0f);
      if (shared) {
        gemm(true, false, k, n, static_cast<int>(batch * m), 1.0f, A.data(), k, G.data(), n, 0.0f, gb.data(), n);
      } else {
        for (std::int64_t i = 0; i < batch; ++i) {
          gemm(true, false, k, n, m, 1.0f, A.data() + i * sa, k, G.data() + i * sc, n, 0.0f, gb.data() + i * sb, n);
        }
      }
      self.parents[1]->accumulate(gb);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (wv.rank() != 2) throw ShapeError("linear weight must be [out, in]");
  const int out_f = wv.dim(0);
  const int in_f = wv.dim(1);
  if (xv.dim(-1) != in_f) throw ShapeError("linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  const auto rows = static_cast<int>(xv.size() / in_f);
  Shape out_shape = xv.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  gemm(false, true, rows, out_f, in_f, 1.0f, xv.data(), in_f, wv.data(), in_f, 0.0f, out.data(), out_f);
  const bool has_bias = bias.defined();
  if (has_bias) {
    const float* b = bias.value().data();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < out_f; ++j) out[static_cast<std::int64_t>(r) * out_f + j] += b[j];
  }
  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_result(std::move(out), parents, [=](Node& self) {
    const Tensor& X = self.parents[0]->value;
    const Tensor& W = self.parents[1]->value;
    const Tensor& G = self.grad;
    if (wants(self, 0)) {
      Tensor gx(X.shape());
      gemm(false, false, rows, in_f, out_f, 1.0f, G.data(), out_f, W.data(), in_f, 0.0f, gx.data(), in_f);
      self.parents[0]->accumulate(gx);
    }
    if (wants(self, 1)) {
      Tensor gw(W.shape());
      gemm(true, false, out_f, in_f, rows, 1.0f, G.data(), out_f, X.data(), in_f, 0.0f, gw.data(), in_f);
      self.parents[1]->accumulate(gw);
    }
    if (has_bias && wants(self, 2)) {
      Tensor gb({out_f}, 0.0f);
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < out_f; ++j) gb[j] += G[static_cast<std::int64_t>(r) * out_f + j];
      self.parents[2]->accumulate(gb);
    }
  });
}

namespace {

struct ConvGeom {
  int n, c, h, w, kh, kw, stride, pad, ho, wo;
  std::int64_t p() const { return static_cast<std::int64_t>(ho) * wo; }
  std::int64_t rows() const { return static_cast<std::int64_t>(c) * kh * kw; }
};

// Column matrix [C kh kw, ho wo] of one sample.
void im2col(const float* x, const ConvGeom& g, float* col) {
  const std::int64_t P = g.p();
  for (int c = 0; c < g.c; ++c) {
    const float* src = x + static_cast<std::int64_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        float* d = col + ((static_cast<std::int64_t>(c) * g.kh + ki) * g.kw + kj) * P;
        // Output columns whose input column falls inside the image.
        const int lo = std::clamp((g.pad - kj + g.stride - 1) / g.stride, 0, g.wo);
        const int hi = std::clamp((g.w - 1 + g.pad - kj) / g.stride + 1, lo, g.wo);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          float* row = d + static_cast<std::int64_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(row, row + g.wo, 0.0f);
            continue;
          }
          const float* srow = src + static_cast<std::int64_t>(iy) * g.w - g.pad + kj;
          std::fill(row, row + lo, 0.0f);
          if (g.stride == 1) {
            std::copy(srow + lo, srow + hi, row + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox] = srow[ox * g.stride];
          }
          std::fill(row + hi, row + g.wo, 0.0f);
        }
      }
    }
  }
}

void col2im(const float* col, const ConvGeom& g, float* x) {
  const std::int64_t P = g.p();
  for (int c = 0; c < g.c; ++c) {
    float* dst = x + static_cast<std::int64_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const float* s = col + ((static_cast<std::int64_t>(c) * g.kh + ki) * g.kw + kj) * P;
        const int lo = std::clamp((g.pad - kj + g.stride - 1) / g.stride, 0, g.wo);
        const int hi = std::clamp((g.w - 1 + g.pad - kj) / g.stride + 1, lo, g.wo);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          float* drow = dst + static_cast<std::int64_t>(iy) * g.w - g.pad + kj;
          const float* srow = s + static_cast<std::int64_t>(oy) * g.wo;
          for (int ox = lo; ox < hi; ++ox) drow[ox * g.stride] += srow[ox];
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d expects NCHW input and OIHW weight");
  if (xv.dim(1) != wv.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  }
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), stride, padding, 0, 0};
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d output would be empty");
  const int cout = wv.dim(0);
  const std::int64_t P = g.p();
  const auto K = static_cast<int>(g.rows());

  // A 1x1, stride-1, unpadded conv reads each sample directly as its column matrix.
  const bool direct = g.kh == 1 && g.kw == 1 && stride == 1 && padding == 0;
  const std::int64_t in_sz = static_cast<std::int64_t>(g.c) * g.h * g.w;
  std::vector<float> col(direct ? 0 : static_cast<std::size_t>(g.rows() * P));
  Tensor out({g.n, cout, g.ho, g.wo});
  const bool has_bias = bias.defined();
  for (int n = 0; n < g.n; ++n) {
    const float* cn = xv.data() + n * in_sz;
    if (!direct) {
      im2col(cn, g, col.data());
      cn = col.data();
    }
    float* yn = out.data() + static_cast<std::int64_t>(n) * cout * P;
    gemm(false, false, cout, static_cast<int>(P), K, 1.0f, wv.data(), K, cn, static_cast<int>(P), 0.0f, yn,
         static_cast<int>(P));
    if (has_bias) {
      for (int co = 0; co < cout; ++co) {
        const float b = bias.value()[co];
        float* dst = yn + co * P;
        for (std::int64_t p = 0; p < P; ++p) dst[p] += b;
      }
    }
  }
  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_result(std::move(out), parents, [g, cout, has_bias, direct](Node& self) {
    const Tensor& X = self.parents[0]->value;
    const Tensor& W = self.parents[1]->value;
    const std::int64_t P = g.p();
    const auto K = static_cast<int>(g.rows());
    const std::int64_t in_sz = static_cast<std::int64_t>(g.c) * g.h * g.w;
    const bool gw_on = wants(self, 1), gx_on = wants(self, 0);
    std::vector<float> col(direct ? 0 : static_cast<std::size_t>(g.rows() * P));
    std::vector<float> gcol(direct ? 0 : static_cast<std::size_t>(g.rows() * P));
    Tensor gw(W.shape(), 0.0f);
    Tensor gx;
    if (gx_on) gx = Tensor(X.shape(), 0.0f);
    for (int n = 0; n < g.n; ++n) {
      const float* gy = self.grad.data() + static_cast<std::int64_t>(n) * cout * P;
      if (gw_on) {
        const float* cn = X.data() + n * in_sz;
        if (!direct) {
          im2col(cn, g, col.data());
          cn = col.data();
        }
        gemm(false, true, cout, K, static_cast<int>(P), 1.0f, gy, static_cast<int>(P), cn, static_cast<int>(P), 1.0f,
             gw.data(), K);
      }
      if (gx_on) {
        float* gxn = gx.data() + n * in_sz;
        if (direct) {
          gemm(true, false, K, static_cast<int>(P), cout, 1.0f, W.data(), K, gy, static_cast<int>(P), 0.0f, gxn,
               static_cast<int>(P));
        } else {
          gemm(true, false, K, static_cast<int>(P), cout, 1.0f, W.data(), K, gy, static_cast<int>(P), 0.0f,
               gcol.data(), static_cast<int>(P));
          col2im(gcol.data(), g, gxn);
        }
      }
    }
    if (gw_on) self.parents[1]->accumulate(gw);
    if (has_bias && wants(self, 2)) {
      Tensor gb({cout}, 0.0f);
      for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int n = 0; n < g.n; ++n) {
          const float* s = self.grad.data() + (static_cast<std::int64_t>(n) * cout + co) * P;
          for (std::int64_t i = 0; i < P; ++i) acc += s[i];
        }
        gb[co] = static_cast<float>(acc);
      }
      self.parents[2]->accumulate(gb);
    }
    if (gx_on) self.parents[0]->accumulate(gx);
  });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, float eps) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("group_norm expects [N, C, ...]");
  const int N = xv.dim(0);
  const int C = xv.dim(1);
  if (groups <= 0 || C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const std::int64_t S = xv.size() / (static_cast<std::int64_t>(N) * C);
  const int cg = C / groups;
  const std::int64_t m = cg * S;
  Tensor xhat(xv.shape());
  std::vector<float> rstd(static_cast<std::size_t>(N * groups));
  Tensor out(xv.shape());
  const float* gm = gamma.value().data();
  const float* bt = beta.value().data();
  for (int n = 0; n < N; ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * C + gi * cg) * S;
      double s = 0.0;
      for (std::int64_t i = 0; i < m; ++i) s += xv[base + i];
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (std::int64_t i = 0; i < m; ++i) {
        const double d = xv[base + i] - mu;
        v += d * d;
      }
      const double r = 1.0 / std::sqrt(v / static_cast<double>(m) + eps);
      rstd[static_cast<std::size_t>(n * groups + gi)] = static_cast<float>(r);
      for (int c = 0; c < cg; ++c) {
        const int ch = gi * cg + c;
        for (std::int64_t s2 = 0; s2 < S; ++s2) {
          const std::int64_t idx = base + c * S + s2;
          const auto xh = static_cast<float>((xv[idx] - mu) * r);
          xhat[idx] = xh;
          out[idx] = xh * gm[ch] + bt[ch];
        }
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), rstd = std::move(rstd), N, C, S, groups, cg, m](Node& self) {
                       const Tensor& G = self.grad;
                       const float* gm = self.parents[1]->value.data();
                       if (wants(self, 1) || wants(self, 2)) {
                         Tensor gg({C}, 0.0f);
                         Tensor gb({C}, 0.0f);
                         for (int n = 0; n < N; ++n) {
                           for (int c = 0; c < C; ++c) {
                             const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * S;
                             double a = 0.0;
                             double b = 0.0;
                             for (std::int64_t s = 0; s < S; ++s) {
                               a += static_cast<double>(G[base + s]) * xhat[base + s];
                               b += G[base + s];
                             }
                             gg[c] += static_cast<float>(a);
                             gb[c] += static_cast<float>(b);
                           }
                         }
                         if (wants(self, 1)) self.parents[1]->accumulate(gg);
                         if (wants(self, 2)) self.parents[2]->accumulate(gb);
                       }
                       if (wants(self, 0)) {
                         Tensor gx(G.shape());
                         for (int n = 0; n < N; ++n) {
                           for (int gi = 0; gi < groups; ++gi) {
                             const std::int64_t base = (static_cast<std::int64_t>(n) * C + gi * cg) * S;
                             double m1 = 0.0;
                             double m2 = 0.0;
                             for (int c = 0; c < cg; ++c) {
                               const float gch = gm[gi * cg + c];
                               for (std::int64_t s = 0; s < S; ++s) {
                                 const std::int64_t idx = base + c * S + s;
                                 const double dxh = static_cast<double>(G[idx]) * gch;
                                 m1 += dxh;
                                 m2 += dxh * xhat[idx];
                               }
                             }
                             m1 /= static_cast<double>(m);
                             m2 /= static_cast<double>(m);
                             const float r = rstd[static_cast<std::size_t>(n * groups + gi)];
                             for (int c = 0; c < cg; ++c) {
                               const float gch = gm[gi * cg + c];
                               for (std::int64_t s = 0; s < S; ++s) {
                                 const std::int64_t idx = base + c * S + s;
                                 const double dxh = static_cast<double>(G[idx]) * gch;
                                 gx[idx] = static_cast<float>(r * (dxh - m1 - xhat[idx] * m2));
                               }
                             }
                           }
                         }
                         self.parents[0]->accumulate(gx);
                       }
                     });
}

Var softmax(const Var& a) {
  const Tensor& av = a.value();
  const int cols = av.dim(-1);
  const std::int64_t rows = av.size() / cols;
  Tensor out(av.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* src = av.data() + r * cols;
    float* dst = out.data() + r * cols;
    float mx = src[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      dst[j] = std::exp(src[j] - mx);
      s += dst[j];
    }
    const auto inv = static_cast<float>(1.0 / s);
    for (int j = 0; j < cols; ++j) dst[j] *= inv;
  }
  return make_result(std::move(out), {a}, [rows, cols](Node& self) {
    Tensor gx(self.value.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* y = self.value.data() + r * cols;
      const float* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += static_cast<double>(g[j]) * y[j];
      for (int j = 0; j < cols; ++j) gx[r * cols + j] = y[j] * (g[j] - static_cast<float>(dot));
    }
    self.parents[0]->accumulate(gx);
  });
}

Var upsample_nearest(const Var& x, int f) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("upsample expects NCHW");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor out({N, C, H * f, W * f});
  const std::int64_t planes = static_cast<std::int64_t>(N) * C;
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const float* src = xv.data() + pl * H * W;
    float* dst = out.data() + pl * H * W * f * f;
    for (int y = 0; y < H * f; ++y)
      for (int xx = 0; xx < W * f; ++xx) dst[y * W * f + xx] = src[(y / f) * W + xx / f];
  }
  return make_result(std::move(out), {x}, [planes, H, W, f](Node& self) {
    Tensor gx(self.parents[0]->value.shape(), 0.0f);
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      const float* g = self.grad.data() + pl * H * W * f * f;
      float* dst = gx.data() + pl * H * W;
      for (int y = 0; y < H * f; ++y)
        for (int xx = 0; xx < W * f; ++xx) dst[(y / f) * W + xx / f] += g[y * W * f + xx];
    }
    self.parents[0]->accumulate(gx);
  });
}

Var avg_pool(const Var& x, int k) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("avg_pool expects NCHW");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H % k != 0 || W % k != 0) throw ShapeError("avg_pool: size not divisible by kernel");
  const int ho = H / k, wo = W / k;
  Tensor out({N, C, ho, wo}, 0.0f);
  const std::int64_t planes = static_cast<std::int64_t>(N) * C;
  const float inv = 1.0f / static_cast<float>(k * k);
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const float* src = xv.data() + pl * H * W;
    float* dst = out.data() + pl * ho * wo;
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) dst[(y / k) * wo + xx / k] += src[y * W + xx] * inv;
  }
  return make_result(std::move(out), {x}, [planes, H, W, k, ho, wo, inv](Node& self) {
    Tensor gx(self.parents[0]->value.shape());
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      const float* g = self.grad.data() + pl * ho * wo;
      float* dst = gx.data() + pl * H * W;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) dst[y * W + xx] = g[(y / k) * wo + xx / k] * inv;
    }
    self.parents[0]->accumulate(gx);
  });
}

Var dropout(const Var& x, float p, Rng& rng) {
  if (p <= 0.0f) return x;
  if (p >= 1.0f) throw std::invalid_argument("dropout rate must be < 1");
  Tensor mask(x.shape());
  const float keep = 1.0f / (1.0f - p);
  for (auto& v : mask.values()) v = rng.uniform() < p ? 0.0f : keep;
  return mul(x, constant(std::move(mask)));
}

}  // namespace lddpm::ag
