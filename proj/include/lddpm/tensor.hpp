#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lddpm {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when tensor shapes disagree with an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major float32 array. Owns its storage; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  /// Negative axes count from the back.
  int dim(int axis) const;
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  float item() const;
  Tensor reshaped(Shape shape) const;
  void fill(float v);

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Broadcasting helpers shared by the autograd kernels.
Shape broadcast_shape(const Shape& a, const Shape& b);
/// Sums `t` down to `target` (numpy broadcasting rules in reverse).
Tensor sum_to(const Tensor& t, const Shape& target);
/// Expands `t` to `target` by repeating broadcast dimensions.
Tensor broadcast_to(const Tensor& t, const Shape& target);

/// Row-major single-precision GEMM: C = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);

/// Solves for the inverse of a small dense square matrix (double precision internally).
/// Throws std::domain_error when the matrix is numerically singular.
std::vector<double> invert_matrix(std::span<const double> m, int n);
/// log|det M| and sign via partial-pivot LU.
double log_abs_det(std::span<const double> m, int n, int* sign = nullptr);

}  // namespace lddpm
