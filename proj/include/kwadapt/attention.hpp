// SPDX-License-Identifier: Apache-2.0
/**
 * @file   attention.hpp
 * @brief  Multi-head self-attention, its kernel-estimator form, and the
 *         head-sum form of the output projection.
 *
 * Head h owns columns [h*p, (h+1)*p) of W_q, W_k, W_v and rows
 * [h*p, (h+1)*p) of W_o. No causal mask is applied.
 */
#pragma once

#include "autodiff.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <utility>

namespace kwadapt {

struct ModelDims {
  std::size_t n_layers = 1;
  std::size_t n_heads = 1;
  std::size_t head_dim = 1;
  std::uint64_t base_param_total = 1;

  std::size_t model_dim() const noexcept { return n_heads * head_dim; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || head_dim == 0)
      throw ConfigError("dims: n_layers, n_heads and head_dim must be positive");
    if (base_param_total == 0)
      throw ConfigError("dims: base_param_total must be positive");
  }

  /// GPT-2 small: 12 layers, 12 heads of width 64.
  static ModelDims gpt2_small() { return {12, 12, 64, 124'439'808ULL}; }

  /// Desk-scale model. The base total counts the attention weights that
  /// actually exist in the toy model: L * (4 d^2 + 4 d).
  static ModelDims toy() { return attention_only(2, 4, 8); }

  static ModelDims attention_only(std::size_t layers, std::size_t heads,
                                  std::size_t head_dim) {
    const std::uint64_t d = heads * head_dim;
    return {layers, heads, head_dim, layers * (4 * d * d + 4 * d)};
  }

  friend bool operator==(const ModelDims &, const ModelDims &) = default;
};

enum class Target : std::uint8_t { Q = 0, K = 1, V = 2, O = 3 };

inline constexpr std::array<Target, 4> kAllTargets{Target::Q, Target::K,
                                                   Target::V, Target::O};

inline const char *to_string(Target t) {
  switch (t) {
  case Target::Q: return "Q";
  case Target::K: return "K";
  case Target::V: return "V";
  case Target::O: return "O";
  }
  return "?";
}

inline Target parse_target(const std::string &s) {
  if (s == "Q" || s == "q") return Target::Q;
  if (s == "K" || s == "k") return Target::K;
  if (s == "V" || s == "v") return Target::V;
  if (s == "O" || s == "o") return Target::O;
  throw ConfigError("unknown target '" + s + "' (expected Q, K, V or O)");
}

/// Frozen weights of one attention sub-layer.
struct AttentionWeights {
  Matrix w_q, w_k, w_v, w_o;
  Matrix b_q, b_k, b_v, b_o;

  const Matrix &weight(Target t) const {
    switch (t) {
    case Target::Q: return w_q;
    case Target::K: return w_k;
    case Target::V: return w_v;
    case Target::O: return w_o;
    }
    throw ContractError("weight: bad target");
  }
  Matrix &weight(Target t) {
    return const_cast<Matrix &>(std::as_const(*this).weight(t));
  }
  const Matrix &bias(Target t) const {
    switch (t) {
    case Target::Q: return b_q;
    case Target::K: return b_k;
    case Target::V: return b_v;
    case Target::O: return b_o;
    }
    throw ContractError("bias: bad target");
  }
  Matrix &bias(Target t) {
    return const_cast<Matrix &>(std::as_const(*this).bias(t));
  }

  void validate(const ModelDims &dims) const {
    const std::size_t d = dims.model_dim();
    for (Target t : kAllTargets) {
      const Matrix &w = weight(t);
      const Matrix &b = bias(t);
      if (w.rows() != d || w.cols() != d)
        throw DimensionError(std::string("AttentionWeights: W_") +
                             to_string(t) + " is " + w.shape_str() +
                             ", expected " + std::to_string(d) + "x" +
                             std::to_string(d));
      if (b.rows() != 1 || b.cols() != d)
        throw DimensionError(std::string("AttentionWeights: b_") +
                             to_string(t) + " is " + b.shape_str() +
                             ", expected 1x" + std::to_string(d));
    }
  }

  /// Gaussian(0, 1/sqrt(d)) weights and biases.
  static AttentionWeights random(const ModelDims &dims, std::mt19937_64 &rng) {
    const std::size_t d = dims.model_dim();
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    AttentionWeights w;
    w.w_q = Matrix::gaussian(d, d, s, rng);
    w.w_k = Matrix::gaussian(d, d, s, rng);
    w.w_v = Matrix::gaussian(d, d, s, rng);
    w.w_o = Matrix::gaussian(d, d, s, rng);
    w.b_q = Matrix::gaussian(1, d, s, rng);
    w.b_k = Matrix::gaussian(1, d, s, rng);
    w.b_v = Matrix::gaussian(1, d, s, rng);
    w.b_o = Matrix::gaussian(1, d, s, rng);
    return w;
  }

  friend bool operator==(const AttentionWeights &,
                         const AttentionWeights &) = default;
};

/// Graph handles for one layer's weights; either frozen constants or
/// variables (for gradient checks) or adapted sums.
struct AttentionVars {
  Var w_q, w_k, w_v, w_o;
  Var b_q, b_k, b_v, b_o;

  static AttentionVars from(const AttentionWeights &w, bool requires_grad) {
    auto mk = [&](const Matrix &m) {
      return requires_grad ? variable(m) : constant(m);
    };
    return {mk(w.w_q), mk(w.w_k), mk(w.w_v), mk(w.w_o),
            mk(w.b_q), mk(w.b_k), mk(w.b_v), mk(w.b_o)};
  }
};

/// x W + 1 b^T.
inline Var affine(const Var &x, const Var &w, const Var &b) {
  return add(matmul(x, w), broadcast_row(b, x->value.rows()));
}

struct QKV {
  Var q, k, v;
};

inline QKV project_qkv(const Var &x, const AttentionVars &w) {
  const std::size_t d = w.w_q->value.rows();
  if (x->value.cols() != d)
    throw DimensionError("project_qkv: input " + x->value.shape_str() +
                         " does not match model dim " + std::to_string(d));
  return {affine(x, w.w_q, w.b_q), affine(x, w.w_k, w.b_k),
          affine(x, w.w_v, w.b_v)};
}

/// softmax(Qh Kh^T / sqrt(p)) Vh.
inline Var attention_head(const Var &qh, const Var &kh, const Var &vh,
                          std::size_t p) {
  if (qh->value.cols() != p || kh->value.cols() != p || vh->value.cols() != p)
    throw DimensionError("attention_head: head width " + std::to_string(p) +
                         " vs Q " + qh->value.shape_str() + ", K " +
                         kh->value.shape_str() + ", V " +
                         vh->value.shape_str());
  if (kh->value.rows() != vh->value.rows())
    throw DimensionError("attention_head: K " + kh->value.shape_str() +
                         " and V " + vh->value.shape_str() +
                         " disagree on key count");
  const double inv = 1.0 / std::sqrt(static_cast<double>(p));
  auto scores = scale(matmul(qh, transpose(kh)), inv);
  return matmul(softmax_rows(scores), vh);
}

inline Matrix attention_head(const Matrix &qh, const Matrix &kh,
                             const Matrix &vh, std::size_t p) {
  return attention_head(constant(qh), constant(kh), constant(vh), p)->value;
}

/// Per-head outputs L^(h) V^(h) from projected Q, K, V.
inline std::vector<Var> head_outputs(const QKV &qkv, const ModelDims &dims) {
  const std::size_t p = dims.head_dim;
  std::vector<Var> heads;
  heads.reserve(dims.n_heads);
  for (std::size_t h = 0; h < dims.n_heads; ++h)
    heads.push_back(attention_head(slice_cols(qkv.q, h * p, (h + 1) * p),
                                   slice_cols(qkv.k, h * p, (h + 1) * p),
                                   slice_cols(qkv.v, h * p, (h + 1) * p), p));
  return heads;
}

/// Concatenated heads times W_o plus broadcast b_o.
inline Var attention_from_qkv(const QKV &qkv, const AttentionVars &w,
                              const ModelDims &dims) {
  auto concat = concat_cols(head_outputs(qkv, dims));
  return affine(concat, w.w_o, w.b_o);
}

inline Var attention_layer(const Var &x, const AttentionVars &w,
                           const ModelDims &dims) {
  return attention_from_qkv(project_qkv(x, w), w, dims);
}

inline Matrix attention_layer(const Matrix &x, const AttentionWeights &w,
                              const ModelDims &dims) {
  w.validate(dims);
  return attention_layer(constant(x), AttentionVars::from(w, false), dims)
      ->value;
}

/// sum_h L^(h) V^(h) W_o^(h), no output bias.
inline Var rewritten_attention(const Var &x, const AttentionVars &w,
                               const ModelDims &dims) {
  const std::size_t p = dims.head_dim;
  auto heads = head_outputs(project_qkv(x, w), dims);
  Var acc;
  for (std::size_t h = 0; h < dims.n_heads; ++h) {
    auto term = matmul(heads[h], slice_rows(w.w_o, h * p, (h + 1) * p));
    acc = acc ? add(acc, term) : term;
  }
  return acc;
}

inline Matrix rewritten_attention(const Matrix &x, const AttentionWeights &w,
                                  const ModelDims &dims) {
  w.validate(dims);
  return rewritten_attention(constant(x), AttentionVars::from(w, false), dims)
      ->value;
}

/// D^{-1} kappa(Q, K) C split into its parts.
struct KernelEstimatorView {
  Matrix kernel_matrix; ///< n x N, exp(<q_i, k_j> / sqrt(p))
  Matrix normalizer;    ///< n x 1 row sums of kernel_matrix
  Matrix coefficients;  ///< supplied by the caller; empty until set

  /// D^{-1} kappa C.
  Matrix apply(const Matrix &c) const {
    if (c.rows() != kernel_matrix.cols())
      throw DimensionError("KernelEstimatorView::apply: kernel " +
                           kernel_matrix.shape_str() + " vs coefficients " +
                           c.shape_str());
    Matrix out = matmul(kernel_matrix, c);
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j)
        out(i, j) /= normalizer(i, 0);
    return out;
  }

  Matrix apply() const {
    if (coefficients.empty())
      throw ContractError("KernelEstimatorView: coefficients not set");
    return apply(coefficients);
  }

  /// Row-normalized weights l_j(q_i).
  Matrix weights() const {
    Matrix w = kernel_matrix;
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j)
        w(i, j) /= normalizer(i, 0);
    return w;
  }
};

/// Builds kappa(Qh, Kh) with kappa(x, y) = exp(<x, y> / sqrt(p)) directly,
/// without max subtraction.
inline KernelEstimatorView kernel_view(const Matrix &qh, const Matrix &kh,
                                       std::size_t p) {
  if (qh.cols() != p || kh.cols() != p)
    throw DimensionError("kernel_view: head width " + std::to_string(p) +
                         " vs Q " + qh.shape_str() + ", K " + kh.shape_str());
  const double inv = 1.0 / std::sqrt(static_cast<double>(p));
  KernelEstimatorView view;
  view.kernel_matrix = Matrix(qh.rows(), kh.rows());
  view.normalizer = Matrix(qh.rows(), 1);
  for (std::size_t i = 0; i < qh.rows(); ++i) {
    double row_sum = 0.0;
    for (std::size_t j = 0; j < kh.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t t = 0; t < p; ++t)
        dot += qh(i, t) * kh(j, t);
      const double kij = std::exp(dot * inv);
      view.kernel_matrix(i, j) = kij;
      row_sum += kij;
    }
    view.normalizer(i, 0) = row_sum;
  }
  return view;
}

} // namespace kwadapt
