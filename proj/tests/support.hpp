// SPDX-License-Identifier: Apache-2.0
// Independent oracles shared by the unit tests. Nothing here calls into the
// library's numeric kernels.
#pragma once

#include "kwadapt/matrix.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <vector>

namespace kwtest {

using kwadapt::Matrix;

inline Matrix naive_matmul(const Matrix &a, const Matrix &b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < a.cols(); ++t)
        s += a(i, t) * b(t, j);
      out(i, j) = s;
    }
  return out;
}

inline Matrix naive_softmax_rows(const Matrix &a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j)
      z += std::exp(a(i, j));
    for (std::size_t j = 0; j < a.cols(); ++j)
      out(i, j) = std::exp(a(i, j)) / z;
  }
  return out;
}

inline Matrix random(std::size_t r, std::size_t c, std::uint64_t seed,
                     double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      m(i, j) = n(rng);
  return m;
}

inline double max_diff(const Matrix &a, const Matrix &b) {
  double w = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      w = std::max(w, std::abs(a(i, j) - b(i, j)));
  return w;
}

inline bool bit_equal(const Matrix &a, const Matrix &b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    return false;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (std::bit_cast<std::uint64_t>(a(i, j)) !=
          std::bit_cast<std::uint64_t>(b(i, j)))
        return false;
  return true;
}

} // namespace kwtest
