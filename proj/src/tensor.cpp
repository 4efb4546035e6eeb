#include "lddpm/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lddpm {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }
}

int Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

float Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  Tensor out;
  if (shape_numel(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

namespace {

// Strides of `s` aligned to `out`, zero on broadcast dimensions.
std::vector<std::int64_t> aligned_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::int64_t> st(r, 0);
  std::int64_t acc = 1;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t i = s.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    st[o] = s[i] == 1 ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

// Walks every index of `out` and reports the aligned offset of `src` for each
// contiguous inner run. Adjacent dims are merged whenever both layouts agree.
template <class F>
void for_each_run(const Shape& out, const std::vector<std::int64_t>& src_strides, F&& f) {
  Shape dims;
  std::vector<std::int64_t> st;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == 1) continue;
    if (!dims.empty() && st.back() == src_strides[i] * out[i]) {
      dims.back() *= out[i];
      st.back() = src_strides[i];
      continue;
    }
    dims.push_back(out[i]);
    st.push_back(src_strides[i]);
  }
  if (dims.empty()) {
    f(std::int64_t{0}, std::int64_t{0}, std::int64_t{1}, std::int64_t{0});
    return;
  }
  const std::size_t r = dims.size();
  const std::int64_t inner = dims[r - 1];
  const std::int64_t inner_stride = st[r - 1];
  std::vector<int> idx(r, 0);
  std::int64_t out_off = 0;
  std::int64_t src_off = 0;
  while (true) {
    f(out_off, src_off, inner, inner_stride);
    out_off += inner;
    if (r == 1) break;
    std::size_t d = r - 2;
    while (true) {
      ++idx[d];
      src_off += st[d];
      if (idx[d] < dims[d]) break;
      src_off -= st[d] * dims[d];
      idx[d] = 0;
      if (d == 0) return;
      --d;
    }
  }
}

}  // namespace

Tensor sum_to(const Tensor& t, const Shape& target) {
  if (t.shape() == target) return t;
  const Shape full = broadcast_shape(t.shape(), target);
  if (full != t.shape()) throw ShapeError("sum_to: " + shape_str(target) + " is not a broadcast of " + shape_str(t.shape()));
  Tensor out(target, 0.0f);
  const auto st = aligned_strides(target, t.shape());
  const float* src = t.data();
  float* dst = out.data();
  for_each_run(t.shape(), st, [&](std::int64_t o, std::int64_t s, std::int64_t n, std::int64_t stride) {
    if (stride == 0) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < n; ++j) acc += src[o + j];
      dst[s] += static_cast<float>(acc);
    } else {
      for (std::int64_t j = 0; j < n; ++j) dst[s + j] += src[o + j];
    }
  });
  return out;
}

Tensor broadcast_to(const Tensor& t, const Shape& target) {
  if (t.shape() == target) return t;
  if (broadcast_shape(t.shape(), target) != target) {
    throw ShapeError("cannot broadcast " + shape_str(t.shape()) + " to " + shape_str(target));
  }
  Tensor out(target);
  const auto st = aligned_strides(t.shape(), target);
  const float* src = t.data();
  float* dst = out.data();
  for_each_run(target, st, [&](std::int64_t o, std::int64_t s, std::int64_t n, std::int64_t stride) {
    if (stride == 0) {
      std::fill(dst + o, dst + o + n, src[s]);
    } else {
      std::copy(src + s, src + s + n, dst + o);
    }
  });
  return out;
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
          int ldb, float beta, float* c, int ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) c[static_cast<std::int64_t>(i) * ldc + j] *= beta;
    return;
  }
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha,
              a, lda, b, ldb, beta, c, ldc);
}

namespace {

// In-place LU with partial pivoting; returns false if a pivot vanishes.
bool lu_decompose(std::vector<double>& a, int n, std::vector<int>& perm, int& sign) {
  perm.resize(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  sign = 1;
  for (int col = 0; col < n; ++col) {
    int piv = col;
    double best = std::abs(a[static_cast<std::size_t>(col * n + col)]);
    for (int r = col + 1; r < n; ++r) {
      const double v = std::abs(a[static_cast<std::size_t>(r * n + col)]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (best == 0.0 || !std::isfinite(best)) return false;
    if (piv != col) {
      for (int j = 0; j < n; ++j) std::swap(a[static_cast<std::size_t>(piv * n + j)], a[static_cast<std::size_t>(col * n + j)]);
      std::swap(perm[static_cast<std::size_t>(piv)], perm[static_cast<std::size_t>(col)]);
      sign = -sign;
    }
    const double d = a[static_cast<std::size_t>(col * n + col)];
    for (int r = col + 1; r < n; ++r) {
      double& f = a[static_cast<std::size_t>(r * n + col)];
      f /= d;
      for (int j = col + 1; j < n; ++j) a[static_cast<std::size_t>(r * n + j)] -= f * a[static_cast<std::size_t>(col * n + j)];
    }
  }
  return true;
}

}  // namespace

std::vector<double> invert_matrix(std::span<const double> m, int n) {
  std::vector<double> lu(m.begin(), m.end());
  std::vector<int> perm;
  int sign = 1;
  if (!lu_decompose(lu, n, perm, sign)) throw std::domain_error("matrix is singular");
  std::vector<double> inv(static_cast<std::size_t>(n * n), 0.0);
  std::vector<double> col(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    for (int r = 0; r < n; ++r) col[static_cast<std::size_t>(r)] = perm[static_cast<std::size_t>(r)] == c ? 1.0 : 0.0;
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < r; ++j) col[static_cast<std::size_t>(r)] -= lu[static_cast<std::size_t>(r * n + j)] * col[static_cast<std::size_t>(j)];
    for (int r = n - 1; r >= 0; --r) {
      for (int j = r + 1; j < n; ++j) col[static_cast<std::size_t>(r)] -= lu[static_cast<std::size_t>(r * n + j)] * col[static_cast<std::size_t>(j)];
      col[static_cast<std::size_t>(r)] /= lu[static_cast<std::size_t>(r * n + r)];
    }
    for (int r = 0; r < n; ++r) inv[static_cast<std::size_t>(r * n + c)] = col[static_cast<std::size_t>(r)];
  }
  return inv;
}

double log_abs_det(std::span<const double> m, int n, int* sign_out) {
  std::vector<double> lu(m.begin(), m.end());
  std::vector<int> perm;
  int sign = 1;
  if (!lu_decompose(lu, n, perm, sign)) {
    if (sign_out) *sign_out = 0;
    return -std::numeric_limits<double>::infinity();
  }
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = lu[static_cast<std::size_t>(i * n + i)];
    if (d < 0) sign = -sign;
    acc += std::log(std::abs(d));
  }
  if (sign_out) *sign_out = sign;
  return acc;
}

}  // namespace lddpm
