// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autodiff.hpp
 * @brief  Minimal reverse-mode automatic differentiation over Matrix.
 *
 * A graph is a DAG of shared Node objects. Leaves are created with
 * variable() (trainable) or constant() (frozen). Every operation records
 * its parents and a rule that pushes the node's gradient to them.
 *
 * Gradients accumulate into Node::grad. backward() refuses to run when any
 * node reachable from the loss still holds a gradient from an earlier pass;
 * call zero_grad() first.
 */
#pragma once

#include "matrix.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace kwadapt {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<Var> parents;
  std::optional<Matrix> grad;
  /// Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node &)> backward_rule;

  const Matrix &grad_or_zero() {
    if (!grad)
      grad = Matrix(value.rows(), value.cols());
    return *grad;
  }
};

inline Var variable(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = "variable";
  return n;
}

inline Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "constant";
  return n;
}

namespace detail {

inline void accumulate(Node &target, const Matrix &contribution) {
  if (!target.requires_grad)
    return;
  if (target.grad)
    *target.grad += contribution;
  else
    target.grad = contribution;
}

inline Var make_op(std::string_view op, Matrix value, std::vector<Var> parents,
                   std::function<void(Node &)> rule) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  n->requires_grad =
      std::any_of(parents.begin(), parents.end(),
                  [](const Var &p) { return p->requires_grad; });
  n->parents = std::move(parents);
  if (n->requires_grad)
    n->backward_rule = std::move(rule);
  return n;
}

/// Parents-before-children order of every node reachable from root.
inline std::vector<Node *> topo_order(Node *root) {
  std::vector<Node *> order;
  std::unordered_set<Node *> done;
  std::vector<std::pair<Node *, std::size_t>> stack{{root, 0}};
  std::unordered_set<Node *> on_stack{root};
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->parents.size()) {
      Node *p = node->parents[next++].get();
      if (done.count(p))
        continue;
      if (on_stack.count(p))
        throw ContractError("backward: cycle in graph");
      on_stack.insert(p);
      stack.emplace_back(p, 0);
    } else {
      done.insert(node);
      on_stack.erase(node);
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

} // namespace detail

// ---------------------------------------------------------------- operations

inline Var matmul(const Var &a, const Var &b) {
  return detail::make_op(
      "matmul", matmul(a->value, b->value), {a, b}, [](Node &self) {
        Node &pa = *self.parents[0];
        Node &pb = *self.parents[1];
        if (pa.requires_grad)
          detail::accumulate(pa, matmul(*self.grad, transpose(pb.value)));
        if (pb.requires_grad)
          detail::accumulate(pb, matmul(transpose(pa.value), *self.grad));
      });
}

inline Var add(const Var &a, const Var &b) {
  return detail::make_op("add", a->value + b->value, {a, b}, [](Node &self) {
    detail::accumulate(*self.parents[0], *self.grad);
    detail::accumulate(*self.parents[1], *self.grad);
  });
}

inline Var scale(const Var &a, double s) {
  return detail::make_op("scale", s * a->value, {a}, [s](Node &self) {
    detail::accumulate(*self.parents[0], s * *self.grad);
  });
}

inline Var transpose(const Var &a) {
  return detail::make_op("transpose", transpose(a->value), {a},
                         [](Node &self) {
                           detail::accumulate(*self.parents[0],
                                              transpose(*self.grad));
                         });
}

inline Var slice_cols(const Var &a, std::size_t begin, std::size_t end) {
  return detail::make_op(
      "slice_cols", slice_cols(a->value, begin, end), {a},
      [begin](Node &self) {
        Node &p = *self.parents[0];
        Matrix g(p.value.rows(), p.value.cols());
        const Matrix &sg = *self.grad;
        for (std::size_t i = 0; i < sg.rows(); ++i)
          for (std::size_t j = 0; j < sg.cols(); ++j)
            g(i, begin + j) = sg(i, j);
        detail::accumulate(p, g);
      });
}

inline Var slice_rows(const Var &a, std::size_t begin, std::size_t end) {
  return detail::make_op(
      "slice_rows", slice_rows(a->value, begin, end), {a},
      [begin](Node &self) {
        Node &p = *self.parents[0];
        Matrix g(p.value.rows(), p.value.cols());
        const Matrix &sg = *self.grad;
        for (std::size_t i = 0; i < sg.rows(); ++i)
          for (std::size_t j = 0; j < sg.cols(); ++j)
            g(begin + i, j) = sg(i, j);
        detail::accumulate(p, g);
      });
}

inline Var concat_cols(const std::vector<Var> &parts) {
  std::vector<Matrix> values;
  values.reserve(parts.size());
  for (const auto &p : parts)
    values.push_back(p->value);
  return detail::make_op(
      "concat_cols", concat_cols(std::span<const Matrix>(values)), parts,
      [](Node &self) {
        std::size_t off = 0;
        for (auto &p : self.parents) {
          const std::size_t w = p->value.cols();
          if (p->requires_grad)
            detail::accumulate(*p, slice_cols(*self.grad, off, off + w));
          off += w;
        }
      });
}

inline Var concat_rows(const std::vector<Var> &parts) {
  std::vector<Matrix> values;
  values.reserve(parts.size());
  for (const auto &p : parts)
    values.push_back(p->value);
  return detail::make_op(
      "concat_rows", concat_rows(std::span<const Matrix>(values)), parts,
      [](Node &self) {
        std::size_t off = 0;
        for (auto &p : self.parents) {
          const std::size_t h = p->value.rows();
          if (p->requires_grad)
            detail::accumulate(*p, slice_rows(*self.grad, off, off + h));
          off += h;
        }
      });
}

/// n copies of a 1xd row stacked vertically (the `1 b^T` term).
inline Var broadcast_row(const Var &row, std::size_t n) {
  return detail::make_op("broadcast_row", broadcast_row(row->value, n), {row},
                         [](Node &self) {
                           const Matrix &g = *self.grad;
                           Matrix acc(1, g.cols());
                           for (std::size_t i = 0; i < g.rows(); ++i)
                             for (std::size_t j = 0; j < g.cols(); ++j)
                               acc(0, j) += g(i, j);
                           detail::accumulate(*self.parents[0], acc);
                         });
}

inline Var exp_elem(const Var &a) {
  Matrix v = a->value;
  for (auto &x : v.data())
    x = std::exp(x);
  return detail::make_op("exp_elem", std::move(v), {a}, [](Node &self) {
    Matrix g = *self.grad;
    auto gd = g.data();
    auto vd = self.value.data();
    for (std::size_t i = 0; i < gd.size(); ++i)
      gd[i] *= vd[i];
    detail::accumulate(*self.parents[0], g);
  });
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix &a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j)
      mx = std::max(mx, a(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(i, j) = std::exp(a(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j)
      out(i, j) /= sum;
  }
  return out;
}

inline Var softmax_rows(const Var &a) {
  return detail::make_op(
      "softmax_rows", softmax_rows(a->value), {a}, [](Node &self) {
        // dx_ij = y_ij * (g_ij - sum_k g_ik y_ik)
        const Matrix &y = self.value;
        const Matrix &g = *self.grad;
        Matrix dx(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j)
            dot += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            dx(i, j) = y(i, j) * (g(i, j) - dot);
        }
        detail::accumulate(*self.parents[0], dx);
      });
}

inline Var sum_all(const Var &a) {
  double s = 0.0;
  for (double v : a->value.data())
    s += v;
  return detail::make_op("sum_all", Matrix(1, 1, s), {a}, [](Node &self) {
    const Node &p = *self.parents[0];
    detail::accumulate(*self.parents[0],
                       Matrix(p.value.rows(), p.value.cols(), (*self.grad)(0, 0)));
  });
}

/// Mean of squared differences over all entries.
inline Var mse(const Var &a, const Var &b) {
  detail::require_same_shape(a->value, b->value, "mse");
  const Matrix diff = a->value - b->value;
  double s = 0.0;
  for (double v : diff.data())
    s += v * v;
  const double count = static_cast<double>(diff.size());
  return detail::make_op(
      "mse", Matrix(1, 1, s / count), {a, b}, [diff, count](Node &self) {
        const double g = (*self.grad)(0, 0) * 2.0 / count;
        if (self.parents[0]->requires_grad)
          detail::accumulate(*self.parents[0], g * diff);
        if (self.parents[1]->requires_grad)
          detail::accumulate(*self.parents[1], (-g) * diff);
      });
}

// ------------------------------------------------------------------ backward

/// Clears gradients on every node reachable from root.
inline void zero_grad(const Var &root) {
  for (Node *n : detail::topo_order(root.get()))
    n->grad.reset();
}

inline void zero_grad(std::span<const Var> params) {
  for (const auto &p : params)
    p->grad.reset();
}

/// Reverse-mode sweep from a 1x1 loss. Afterwards every requires-grad node
/// reachable from loss holds dloss/dnode in grad.
inline void backward(const Var &loss) {
  if (loss->value.rows() != 1 || loss->value.cols() != 1)
    throw ContractError("backward: loss must be 1x1, got " +
                        loss->value.shape_str());
  const auto order = detail::topo_order(loss.get());
  for (Node *n : order)
    if (n->grad)
      throw ContractError(
          "backward: gradients from a previous pass were not reset (node '" +
          std::string(n->op) + "'); call zero_grad first");
  if (!loss->requires_grad)
    return;
  loss->grad = Matrix(1, 1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node *n = *it;
    if (n->requires_grad && n->backward_rule && n->grad)
      n->backward_rule(*n);
  }
}

/// Central-difference gradient estimate of a scalar function.
template <typename F>
Matrix finite_diff_grad(F &&f, const Matrix &at, double step) {
  if (!(step > 0.0))
    throw ContractError("finite_diff_grad: step must be positive");
  Matrix grad(at.rows(), at.cols());
  Matrix x = at;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + step;
    const double fp = f(static_cast<const Matrix &>(x));
    x.data()[i] = orig - step;
    const double fm = f(static_cast<const Matrix &>(x));
    x.data()[i] = orig;
    grad.data()[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

} // namespace kwadapt
