#include "funnel/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace funnel {

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw std::invalid_argument("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw DimensionError("tensor rank must be in [1, 4], got shape " + shape_to_string(shape));
  }
  for (auto e : shape) {
    if (e == 0) throw DimensionError("zero extent in shape " + shape_to_string(shape));
  }
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  validate_shape(shape_);
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, DType dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  validate_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
  }
  round_to_dtype();
}

Tensor Tensor::scalar(double value, DType dtype) { return Tensor({1}, {value}, dtype); }

Tensor Tensor::filled(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  std::fill(t.data_.begin(), t.data_.end(), value);
  t.round_to_dtype();
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, DType dtype) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data), dtype);
}

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_to_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return shape_[0];
  if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_to_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_to_string(shape_));
  return data_[0];
}

void Tensor::round_to_dtype() {
  if (dtype_ != DType::f32) return;
  for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
}

Tensor Tensor::cast(DType dtype) const {
  Tensor out = *this;
  out.dtype_ = dtype;
  out.round_to_dtype();
  return out;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace kernels {

void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    const double* brow = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const DType dt = (a.dtype() == DType::f32 || b.dtype() == DType::f32) ? DType::f32 : DType::f64;
  Tensor c({a.dim(0), b.dim(1)}, dt);
  kernels::matmul_acc(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  c.round_to_dtype();
  return c;
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor t({c, r}, a.dtype());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

}  // namespace funnel
