// SPDX-License-Identifier: Apache-2.0
/**
 * @file   rank.hpp
 * @brief  Singular values and numerical rank of a Matrix (Eigen SVD).
 */
#pragma once

#include "matrix.hpp"

#include <Eigen/Householder>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace kwadapt {

/// Default relative cut-off: sigma_i counts when sigma_i > 1e-8 * sigma_max.
inline constexpr double kRankThreshold = 1e-8;

inline Eigen::MatrixXd to_eigen(const Matrix &m) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>(m.data().data(),
                                                          m.rows(), m.cols());
}

namespace detail {

/// Column-pivoted Householder QR that stops once every remaining column norm
/// is <= cut. Returns the leading k x n upper-trapezoidal block of R.
inline Eigen::MatrixXd truncated_pivoted_r(Eigen::MatrixXd a, double cut_factor) {
  const Eigen::Index m = a.rows(), n = a.cols(), kmax = std::min(m, n);
  const double cut = cut_factor * a.colwise().norm().maxCoeff();
  Eigen::VectorXd work(n);
  Eigen::Index k = 0;
  for (; k < kmax; ++k) {
    Eigen::Index j = 0;
    const double best =
        a.block(k, k, m - k, n - k).colwise().norm().maxCoeff(&j);
    if (!(best > cut))
      break;
    a.col(k).swap(a.col(k + j));
    double tau = 0.0, beta = 0.0;
    a.col(k).tail(m - k).makeHouseholderInPlace(tau, beta);
    if (k + 1 < n)
      a.block(k, k + 1, m - k, n - k - 1)
          .applyHouseholderOnTheLeft(a.col(k).tail(m - k - 1), tau, work.data());
    a(k, k) = beta;
  }
  return a.topRows(k).template triangularView<Eigen::Upper>();
}

} // namespace detail

/// Descending singular values.
///
/// Large inputs are first reduced by a truncated pivoted QR (the gesvdq
/// scheme). The discarded trailing block has norm below
/// sqrt(n) * n * eps * max column norm, far under any rank threshold used
/// here, so low-rank updates cost O(d^2 k) instead of O(d^3).
inline std::vector<double> singular_values(const Matrix &m) {
  if (!all_finite(m))
    throw ContractError("singular_values: non-finite entries");
  const std::size_t kmin = std::min(m.rows(), m.cols());
  std::vector<double> out(kmin, 0.0);
  auto take = [&](const Eigen::VectorXd &s) {
    for (Eigen::Index i = 0; i < s.size(); ++i)
      out[static_cast<std::size_t>(i)] = s(i);
  };
  if (kmin < 64) {
    take(Eigen::BDCSVD<Eigen::MatrixXd>(to_eigen(m)).singularValues());
    return out;
  }
  const double factor = static_cast<double>(std::max(m.rows(), m.cols())) *
                        std::numeric_limits<double>::epsilon();
  const Eigen::MatrixXd r = detail::truncated_pivoted_r(to_eigen(m), factor);
  if (r.rows() > 0)
    take(Eigen::BDCSVD<Eigen::MatrixXd>(r).singularValues());
  return out;
}

inline std::size_t numerical_rank(const std::vector<double> &sv,
                                  double rel_threshold) {
  if (sv.empty() || sv.front() == 0.0)
    return 0;
  const double cut = rel_threshold * sv.front();
  std::size_t r = 0;
  for (double s : sv)
    if (s > cut)
      ++r;
  return r;
}

inline std::size_t numerical_rank(const Matrix &m,
                                  double rel_threshold = kRankThreshold) {
  return numerical_rank(singular_values(m), rel_threshold);
}

/// Orthonormal basis (d x rank) of the column space of m.
inline std::optional<Matrix> column_basis(const Matrix &m,
                                          double rel_threshold = kRankThreshold) {
  if (!all_finite(m))
    throw ContractError("column_basis: non-finite entries");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(to_eigen(m), Eigen::ComputeThinU);
  const auto &s = svd.singularValues();
  std::vector<double> sv(s.data(), s.data() + s.size());
  const std::size_t r = numerical_rank(sv, rel_threshold);
  if (r == 0)
    return std::nullopt;
  Matrix basis(m.rows(), r);
  const auto &u = svd.matrixU();
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < r; ++j)
      basis(i, j) = u(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return basis;
}

/// True when every column of `block` lies in span(basis):
/// rank([basis | block]) == rank(basis).
inline bool span_contains(const Matrix &basis, const Matrix &block,
                          double rel_threshold = kRankThreshold) {
  const std::array<Matrix, 2> parts{basis, block};
  return numerical_rank(concat_cols(std::span<const Matrix>(parts)),
                        rel_threshold) == numerical_rank(basis, rel_threshold);
}

} // namespace kwadapt
