// SPDX-License-Identifier: Apache-2.0
#include "kwadapt/autodiff.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace kwadapt;
using kwtest::naive_matmul;

TEST(Matrix, ConstructionRejectsZeroDims) {
  EXPECT_THROW(Matrix(0, 3), DimensionError);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Matrix, IndexOutOfRange) {
  Matrix m(2, 2);
  EXPECT_THROW(m.at(2, 0), IndexError);
}

TEST(Matrix, SliceBoundsChecked) {
  Matrix m(2, 4);
  EXPECT_THROW(slice_cols(m, 3, 5), IndexError);
  EXPECT_THROW(slice_cols(m, 2, 2), IndexError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Matrix m{{1.5, -2.0}, {0.25, 7.0}};
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandArithmetic) {
  Matrix a{{1, 2}, {3, 4}};
  Matrix b{{0}, {1}};
  EXPECT_EQ(matmul(a, b), (Matrix{{2}, {4}}));
}

TEST(Matmul, ShapeMismatchRaises) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), DimensionError);
}

TEST(Matmul, MatchesNaiveOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = kwtest::random(5, 7, s), b = kwtest::random(7, 3, s + 100);
    EXPECT_LT(kwtest::max_diff(matmul(a, b), naive_matmul(a, b)), 1e-13);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  const auto a0 = kwtest::random(3, 4, 1), b0 = kwtest::random(4, 2, 2);
  auto a = variable(a0), b = constant(b0);
  backward(sum_all(matmul(a, b)));
  auto f = [&](const Matrix &x) {
    const Matrix y = naive_matmul(x, b0);
    double s = 0;
    for (double v : y.data())
      s += v;
    return s;
  };
  EXPECT_LT(relative_error(*a->grad, finite_diff_grad(f, a0, 1e-5)), 1e-6);
}

TEST(Softmax, SymmetricRowIsUniform) {
  const auto s = softmax_rows(Matrix{{0.0, 0.0}});
  EXPECT_EQ(s(0, 0), 0.5);
  EXPECT_EQ(s(0, 1), 0.5);
}

TEST(Softmax, ShiftInvariant) {
  Matrix a{{0.3, 1.7, -2.0}};
  Matrix b{{100.3, 101.7, 98.0}};
  EXPECT_LT(kwtest::max_diff(softmax_rows(a), softmax_rows(b)), 1e-15);
}

TEST(Softmax, LargeInputsStayFinite) {
  EXPECT_TRUE(all_finite(softmax_rows(Matrix{{1000.0, 999.0, -1000.0}})));
}

TEST(Softmax, RowsSumToOneAndGradientMatches) {
  const auto x0 = kwtest::random(4, 6, 3);
  const auto w = kwtest::random(4, 6, 4);
  const auto s = softmax_rows(x0);
  for (std::size_t i = 0; i < 4; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 6; ++j)
      row += s(i, j);
    EXPECT_NEAR(row, 1.0, 1e-15);
  }
  EXPECT_LT(kwtest::max_diff(s, kwtest::naive_softmax_rows(x0)), 1e-15);
  auto x = variable(x0);
  backward(mse(softmax_rows(x), constant(w)));
  auto f = [&](const Matrix &m) {
    const auto y = kwtest::naive_softmax_rows(m);
    double acc = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
      acc += (y.data()[i] - w.data()[i]) * (y.data()[i] - w.data()[i]);
    return acc / static_cast<double>(y.size());
  };
  EXPECT_LT(relative_error(*x->grad, finite_diff_grad(f, x0, 1e-5)), 1e-6);
}

TEST(Structural, SliceConcatInverse) {
  const auto m = kwtest::random(3, 5, 9);
  for (std::size_t k = 1; k < 5; ++k) {
    const std::array<Matrix, 2> parts{slice_cols(m, 0, k), slice_cols(m, k, 5)};
    EXPECT_EQ(concat_cols(std::span<const Matrix>(parts)), m);
  }
}

TEST(Structural, MseOfIdenticalIsZero) {
  auto m = constant(kwtest::random(3, 3, 5));
  EXPECT_EQ(mse(m, m)->value(0, 0), 0.0);
}

TEST(Structural, TwoLayerCompositionGradient) {
  const auto x = kwtest::random(5, 4, 10);
  const auto t = kwtest::random(5, 3, 11);
  const auto w1 = kwtest::random(4, 6, 12), w2 = kwtest::random(6, 3, 13);
  auto run = [&](const Var &a, const Var &b) {
    auto h = softmax_rows(matmul(constant(x), a));
    auto parts = std::vector<Var>{slice_cols(h, 0, 3), slice_cols(h, 3, 6)};
    auto hc = concat_cols(parts);
    auto y = add(matmul(transpose(transpose(hc)), b),
                 broadcast_row(slice_rows(constant(t), 0, 1), 5));
    return mse(exp_elem(scale(y, 0.1)), constant(t));
  };
  auto v1 = variable(w1), v2 = variable(w2);
  backward(run(v1, v2));
  auto f1 = [&](const Matrix &m) { return run(constant(m), constant(w2))->value(0, 0); };
  auto f2 = [&](const Matrix &m) { return run(constant(w1), constant(m))->value(0, 0); };
  EXPECT_LT(relative_error(*v1->grad, finite_diff_grad(f1, w1, 1e-5)), 1e-6);
  EXPECT_LT(relative_error(*v2->grad, finite_diff_grad(f2, w2, 1e-5)), 1e-6);
}

TEST(Backward, LinearSumGivesOnes) {
  auto x = variable(Matrix(2, 2, 3.0));
  backward(sum_all(x));
  EXPECT_EQ(*x->grad, Matrix(2, 2, 1.0));
}

TEST(Backward, FanOutAccumulates) {
  auto x = variable(Matrix(2, 2, 3.0));
  backward(sum_all(add(x, x)));
  EXPECT_EQ(*x->grad, Matrix(2, 2, 2.0));
}

TEST(Backward, FanOutIsExactMultipleOfSingleBranch) {
  const auto x0 = kwtest::random(3, 3, 21);
  auto single = variable(x0);
  backward(sum_all(exp_elem(single)));
  auto triple = variable(x0);
  auto e = [&] { return exp_elem(triple); };
  backward(sum_all(add(add(e(), e()), e())));
  for (std::size_t i = 0; i < x0.size(); ++i)
    EXPECT_EQ(triple->grad->data()[i], 3.0 * single->grad->data()[i]);
}

TEST(Backward, NonScalarLossRejected) {
  auto x = variable(Matrix(2, 2, 1.0));
  EXPECT_THROW(backward(x), ContractError);
}

TEST(Backward, StaleGradientsRejectedUntilReset) {
  auto x = variable(Matrix(2, 2, 1.0));
  auto loss = sum_all(x);
  backward(loss);
  EXPECT_THROW(backward(sum_all(x)), ContractError);
  zero_grad(loss);
  EXPECT_NO_THROW(backward(sum_all(x)));
}

TEST(Backward, ConstantsReceiveNoGradient) {
  auto c = constant(Matrix(2, 2, 1.0));
  auto v = variable(Matrix(2, 2, 1.0));
  backward(sum_all(matmul(c, v)));
  EXPECT_FALSE(c->grad.has_value());
  EXPECT_TRUE(v->grad.has_value());
}

TEST(Backward, RepeatedEvaluationIsBitIdentical) {
  const auto x0 = kwtest::random(4, 4, 31);
  auto go = [&] {
    auto x = variable(x0);
    auto l = mse(softmax_rows(matmul(x, transpose(x))), constant(x0));
    backward(l);
    return std::pair{l->value, *x->grad};
  };
  const auto [l1, g1] = go();
  const auto [l2, g2] = go();
  EXPECT_TRUE(kwtest::bit_equal(l1, l2));
  EXPECT_TRUE(kwtest::bit_equal(g1, g2));
}

TEST(FiniteDiff, Quadratic) {
  auto f = [](const Matrix &m) { return m(0, 0) * m(0, 0) + m(0, 1) * m(0, 1); };
  const auto g = finite_diff_grad(f, Matrix{{1.0, 2.0}}, 1e-5);
  EXPECT_NEAR(g(0, 0), 2.0, 1e-8);
  EXPECT_NEAR(g(0, 1), 4.0, 1e-8);
}

TEST(FiniteDiff, ConstantGivesZero) {
  auto f = [](const Matrix &) { return 3.0; };
  EXPECT_EQ(finite_diff_grad(f, Matrix(2, 3, 1.0), 1e-5), Matrix(2, 3));
}

TEST(FiniteDiff, NonPositiveStepRejected) {
  auto f = [](const Matrix &) { return 0.0; };
  EXPECT_THROW(finite_diff_grad(f, Matrix(1, 1), 0.0), ContractError);
}
