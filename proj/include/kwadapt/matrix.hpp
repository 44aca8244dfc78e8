// SPDX-License-Identifier: Apache-2.0
/**
 * @file   matrix.hpp
 * @brief  Dense row-major double matrix and the library's error types.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kwadapt {

/// Shapes of operands do not agree.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Slice or block index outside the matrix.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// Caller broke an operation's precondition (non-scalar loss, un-reset grads...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid scheme, plan, task or training configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string &what, std::size_t at_step)
      : std::runtime_error(what), step(at_step) {}
  std::size_t step;
};

/// Malformed or inconsistent checkpoint / document on disk.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Matrix {
public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0)
      throw DimensionError("Matrix: rows and cols must be positive, got " +
                           std::to_string(rows) + "x" + std::to_string(cols));
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0)
      throw DimensionError("Matrix: rows and cols must be positive");
    if (data_.size() != rows * cols)
      throw DimensionError("Matrix: " + std::to_string(data_.size()) +
                           " entries for shape " + std::to_string(rows) + "x" +
                           std::to_string(cols));
  }

  /// Row-wise literal, e.g. Matrix{{1, 2}, {3, 4}}.
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    if (rows_ == 0 || cols_ == 0)
      throw DimensionError("Matrix: empty literal");
    data_.reserve(rows_ * cols_);
    for (const auto &r : rows) {
      if (r.size() != cols_)
        throw DimensionError("Matrix: ragged literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      m(i, i) = 1.0;
    return m;
  }

  static Matrix gaussian(std::size_t rows, std::size_t cols, double stddev,
                         std::mt19937_64 &rng) {
    Matrix m(rows, cols);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto &v : m.data_)
      v = dist(rng);
    return m;
  }

  static Matrix uniform(std::size_t rows, std::size_t cols, double lo,
                        double hi, std::mt19937_64 &rng) {
    Matrix m(rows, cols);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto &v : m.data_)
      v = dist(rng);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double &operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  double at(std::size_t r, std::size_t c) const {
    if (r >= rows_ || c >= cols_)
      throw IndexError("Matrix::at: (" + std::to_string(r) + ", " +
                       std::to_string(c) + ") outside " + shape_str());
    return data_[r * cols_ + c];
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool same_shape(const Matrix &o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  /// Bitwise equality of shape and entries.
  friend bool operator==(const Matrix &a, const Matrix &b) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline void require_same_shape(const Matrix &a, const Matrix &b,
                               const char *op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         a.shape_str() + " vs " + b.shape_str());
}

} // namespace detail

// Plain value kernels. The autodiff layer is built on these.

inline Matrix matmul(const Matrix &a, const Matrix &b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + a.shape_str() + " * " + b.shape_str());
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double *orow = &out(i, 0);
    for (std::size_t t = 0; t < k; ++t) {
      const double s = a(i, t);
      const double *brow = b.data().data() + t * m;
      for (std::size_t j = 0; j < m; ++j)
        orow[j] += s * brow[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix &a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      out(j, i) = a(i, j);
  return out;
}

inline Matrix operator+(const Matrix &a, const Matrix &b) {
  detail::require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] += bd[i];
  return out;
}

inline Matrix operator-(const Matrix &a, const Matrix &b) {
  detail::require_same_shape(a, b, "sub");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] -= bd[i];
  return out;
}

inline Matrix operator*(double s, const Matrix &a) {
  Matrix out = a;
  for (auto &v : out.data())
    v *= s;
  return out;
}

inline Matrix &operator+=(Matrix &a, const Matrix &b) {
  detail::require_same_shape(a, b, "add");
  auto o = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] += bd[i];
  return a;
}

inline Matrix slice_cols(const Matrix &a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.cols())
    throw IndexError("slice_cols: [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of range for " +
                     a.shape_str());
  Matrix out(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j)
      out(i, j - begin) = a(i, j);
  return out;
}

inline Matrix slice_rows(const Matrix &a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.rows())
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of range for " +
                     a.shape_str());
  Matrix out(end - begin, a.cols());
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      out(i - begin, j) = a(i, j);
  return out;
}

inline Matrix concat_cols(std::span<const Matrix> parts) {
  if (parts.empty())
    throw DimensionError("concat_cols: no parts");
  std::size_t cols = 0;
  for (const auto &p : parts) {
    if (p.rows() != parts[0].rows())
      throw DimensionError("concat_cols: row mismatch " +
                           parts[0].shape_str() + " vs " + p.shape_str());
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  std::size_t off = 0;
  for (const auto &p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j)
        out(i, off + j) = p(i, j);
    off += p.cols();
  }
  return out;
}

inline Matrix concat_rows(std::span<const Matrix> parts) {
  if (parts.empty())
    throw DimensionError("concat_rows: no parts");
  std::size_t rows = 0;
  for (const auto &p : parts) {
    if (p.cols() != parts[0].cols())
      throw DimensionError("concat_rows: col mismatch " +
                           parts[0].shape_str() + " vs " + p.shape_str());
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * parts[0].cols());
  for (const auto &p : parts)
    data.insert(data.end(), p.data().begin(), p.data().end());
  return Matrix(rows, parts[0].cols(), std::move(data));
}

/// Repeats a 1xd row n times: the `1 b^T` broadcast.
inline Matrix broadcast_row(const Matrix &row, std::size_t n) {
  if (row.rows() != 1)
    throw DimensionError("broadcast_row: expected 1xd, got " +
                         row.shape_str());
  Matrix out(n, row.cols());
  for (std::size_t i = 0; i < n; ++i)
    std::copy(row.data().begin(), row.data().end(), &out(i, 0));
  return out;
}

inline double max_abs_diff(const Matrix &a, const Matrix &b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

inline double max_abs(const Matrix &a) {
  double m = 0.0;
  for (double v : a.data())
    m = std::max(m, std::abs(v));
  return m;
}

inline bool all_finite(const Matrix &a) {
  return std::all_of(a.data().begin(), a.data().end(),
                     [](double v) { return std::isfinite(v); });
}

inline double frobenius_norm(const Matrix &a) {
  double s = 0.0;
  for (double v : a.data())
    s += v * v;
  return std::sqrt(s);
}

/// Scaled max error: max_i |a_i - b_i| / max(max|a|, max|b|).
/// Both matrices zero counts as agreement.
inline double relative_error(const Matrix &a, const Matrix &b) {
  const double diff = max_abs_diff(a, b);
  const double scale = std::max(max_abs(a), max_abs(b));
  if (scale == 0.0)
    return 0.0;
  return diff / scale;
}

} // namespace kwadapt
