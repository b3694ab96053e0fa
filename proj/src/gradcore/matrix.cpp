#include "cbx/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "cbx/error.hpp"

namespace cbx {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::row(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

double Matrix::item() const {
  if (!is_scalar()) throw ShapeError("item() on " + shape_string() + " matrix");
  return data_[0];
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Matrix::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

namespace {

// c[i][j] = sum_p a[i][p] * b[p][j], accumulated in registers over increasing p.
void gemm(const double* __restrict pa, const double* __restrict pb, double* __restrict pc,
          std::size_t n, std::size_t k, std::size_t m) {
  constexpr std::size_t kBlock = 8;
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = pa + i * k;
    double* crow = pc + i * m;
    std::size_t j0 = 0;
    for (; j0 + kBlock <= m; j0 += kBlock) {
      double acc[kBlock] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = arow[p];
        const double* bp = pb + p * m + j0;
        for (std::size_t t = 0; t < kBlock; ++t) acc[t] += aip * bp[t];
      }
      for (std::size_t t = 0; t < kBlock; ++t) crow[j0 + t] = acc[t];
    }
    for (std::size_t j = j0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * pb[p * m + j];
      crow[j] = s;
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul " + a.shape_string() + " by " + b.shape_string());
  }
  Matrix c(a.rows(), b.cols());
  gemm(a.values().data(), b.values().data(), c.values().data(), a.rows(), a.cols(), b.cols());
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt " + a.shape_string() + " by transpose of " + b.shape_string());
  }
  return matmul(a, transpose(b));
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn transpose of " + a.shape_string() + " by " + b.shape_string());
  }
  return matmul(transpose(a), b);
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

void axpy(double alpha, const Matrix& x, Matrix& out) {
  if (!x.same_shape(out)) throw ShapeError("axpy " + x.shape_string() + " into " + out.shape_string());
  auto xs = x.values();
  auto os = out.values();
  for (std::size_t i = 0; i < xs.size(); ++i) os[i] += alpha * xs[i];
}

double dot(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("dot " + a.shape_string() + " with " + b.shape_string());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace cbx
