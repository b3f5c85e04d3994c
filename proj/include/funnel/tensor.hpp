#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace funnel {

/// Element type of a tensor. Values are always held in double; an f32 tensor
/// has every element rounded to the nearest binary32 value whenever an
/// operation produces it.
enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Dense row-major array. Invariants: every extent >= 1, rank in [1, 4],
/// product(shape) == data.size().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::f64);

  static Tensor scalar(double value, DType dtype = DType::f64);
  static Tensor filled(Shape shape, double value, DType dtype = DType::f64);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       DType dtype = DType::f64);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  DType dtype() const { return dtype_; }

  /// Rows/cols of a rank-2 tensor. A rank-1 tensor is treated as one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;

  /// Rounds storage to the tensor's dtype (no-op for f64).
  void round_to_dtype();
  Tensor cast(DType dtype) const;

  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  DType dtype_ = DType::f64;
};

std::size_t shape_numel(const Shape& shape);
void validate_shape(const Shape& shape);

/// Max |a - b| over all elements; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Plain (untraced) kernels shared by the autodiff ops.
namespace kernels {
// c[m,n] += a[m,k] * b[k,n]
void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                std::size_t m, std::size_t k, std::size_t n);
// c[m,n] += a[m,k] * b[n,k]^T
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n);
// c[k,n] += a[m,k]^T * b[m,n]
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n);
}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace funnel
