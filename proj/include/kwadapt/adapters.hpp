// SPDX-License-Identifier: Apache-2.0
/**
 * @file   adapters.hpp
 * @brief  LoRA and the kernel-wise adaptation schemes as weight updates.
 *
 * Every scheme produces a d x d update whose head-h column block is a sum
 * of low-rank products:
 *
 *   LoRA            B A^(h)                 (B shared by all heads)
 *   KernelWise      B^(h) A^(h)             (head-specific B)
 *   KernelWiseLite  W_k^(h) B^(h) A^(h)     (frozen key block as basis, B^(h) p x r)
 *   KernelMix       [B | B^(h)] [A^(h)_shared ; A^(h)]
 *   KernelMixLite   B A^(h)_shared + W_k^(h) B^(h) A^(h)
 *
 * For the O target the construction is done for W_o^T and transposed, so
 * head blocks become row blocks of W_o.
 */
#pragma once

#include "attention.hpp"

#include <optional>
#include <string>
#include <vector>

namespace kwadapt {

enum class SchemeKind : std::uint8_t {
  LoRA,
  KernelWise,
  KernelWiseLite,
  KernelMix,
  KernelMixLite
};

inline constexpr std::array<SchemeKind, 5> kAllSchemeKinds{
    SchemeKind::LoRA, SchemeKind::KernelWise, SchemeKind::KernelWiseLite,
    SchemeKind::KernelMix, SchemeKind::KernelMixLite};

inline const char *to_string(SchemeKind k) {
  switch (k) {
  case SchemeKind::LoRA: return "LoRA";
  case SchemeKind::KernelWise: return "KernelWise";
  case SchemeKind::KernelWiseLite: return "KernelWiseLite";
  case SchemeKind::KernelMix: return "KernelMix";
  case SchemeKind::KernelMixLite: return "KernelMixLite";
  }
  return "?";
}

inline SchemeKind parse_scheme_kind(const std::string &s) {
  for (SchemeKind k : kAllSchemeKinds)
    if (s == to_string(k))
      return k;
  throw ConfigError("unknown scheme kind '" + s +
                    "' (expected LoRA, KernelWise, KernelWiseLite, KernelMix "
                    "or KernelMixLite)");
}

inline bool uses_shared(SchemeKind k) {
  return k == SchemeKind::LoRA || k == SchemeKind::KernelMix ||
         k == SchemeKind::KernelMixLite;
}
inline bool uses_head(SchemeKind k) { return k != SchemeKind::LoRA; }
inline bool is_lite(SchemeKind k) {
  return k == SchemeKind::KernelWiseLite || k == SchemeKind::KernelMixLite;
}

struct AdapterScheme {
  SchemeKind kind = SchemeKind::LoRA;
  std::size_t rank_shared = 0;
  std::size_t rank_head = 0;
  bool include_bias = true;

  static AdapterScheme lora(std::size_t r, bool bias = true) {
    return {SchemeKind::LoRA, r, 0, bias};
  }
  static AdapterScheme kernel_wise(std::size_t r, bool bias = true) {
    return {SchemeKind::KernelWise, 0, r, bias};
  }
  static AdapterScheme kernel_wise_lite(std::size_t r, bool bias = true) {
    return {SchemeKind::KernelWiseLite, 0, r, bias};
  }
  static AdapterScheme kernel_mix(std::size_t shared, std::size_t head,
                                  bool bias = true) {
    return {SchemeKind::KernelMix, shared, head, bias};
  }
  static AdapterScheme kernel_mix_lite(std::size_t shared, std::size_t head,
                                       bool bias = true) {
    return {SchemeKind::KernelMixLite, shared, head, bias};
  }

  /// Checks the rank pattern of the kind; with dims also the lite capacity.
  void validate(const ModelDims *dims = nullptr) const {
    const std::string k = to_string(kind);
    if (uses_shared(kind) && rank_shared == 0)
      throw ConfigError(k + ": rank_shared must be >= 1");
    if (!uses_shared(kind) && rank_shared != 0)
      throw ConfigError(k + ": rank_shared must be 0");
    if (uses_head(kind) && rank_head == 0)
      throw ConfigError(k + ": rank_head must be >= 1");
    if (!uses_head(kind) && rank_head != 0)
      throw ConfigError(k + ": rank_head must be 0");
    if (dims && is_lite(kind) && rank_head > dims->head_dim)
      throw ConfigError(k + ": rank_head " + std::to_string(rank_head) +
                        " exceeds head capacity p = " +
                        std::to_string(dims->head_dim));
  }

  friend bool operator==(const AdapterScheme &,
                         const AdapterScheme &) = default;
};

/// Exact trainable-parameter count for one adapted d x d matrix.
inline std::uint64_t count_params(const AdapterScheme &s,
                                  const ModelDims &dims) {
  const std::uint64_t d = dims.model_dim();
  const std::uint64_t nh = dims.n_heads;
  const std::uint64_t p = dims.head_dim;
  const std::uint64_t rs = s.rank_shared;
  const std::uint64_t rh = s.rank_head;
  std::uint64_t n = 0;
  switch (s.kind) {
  case SchemeKind::LoRA: n = 2 * d * rs; break;
  case SchemeKind::KernelWise: n = nh * (d * rh + rh * p); break;
  case SchemeKind::KernelWiseLite: n = nh * (p * rh + rh * p); break;
  case SchemeKind::KernelMix: n = d * rs + nh * (rs * p + d * rh + rh * p); break;
  case SchemeKind::KernelMixLite: n = d * rs + nh * (rs * p + 2 * p * rh); break;
  }
  return s.include_bias ? n + d : n;
}

/// Trainable factors of one adapted matrix. Factors are graph leaves so the
/// same state feeds both value-level composition and autodiff.
struct AdapterState {
  AdapterScheme scheme;
  Target target = Target::Q;
  std::uint64_t seed = 0;
  Var shared_B;                    ///< d x r_shared
  std::vector<Var> shared_A_heads; ///< N_h of r_shared x p
  std::vector<Var> head_B;         ///< N_h of d x r_head (p x r_head if lite)
  std::vector<Var> head_A;         ///< N_h of r_head x p
  Var bias_delta;                  ///< 1 x d

  /// Deep copy; the copy's factors are independent leaves.
  AdapterState clone() const {
    AdapterState c;
    c.scheme = scheme;
    c.target = target;
    c.seed = seed;
    auto cp = [](const Var &v) { return v ? variable(v->value) : Var{}; };
    c.shared_B = cp(shared_B);
    for (const auto &v : shared_A_heads) c.shared_A_heads.push_back(cp(v));
    for (const auto &v : head_B) c.head_B.push_back(cp(v));
    for (const auto &v : head_A) c.head_A.push_back(cp(v));
    c.bias_delta = cp(bias_delta);
    return c;
  }
};

/// Factor leaves in declaration order: shared_B, shared_A[h]..., head_B[h]...,
/// head_A[h]..., bias_delta.
inline std::vector<Var> trainable_params(const AdapterState &s) {
  std::vector<Var> out;
  if (s.shared_B) out.push_back(s.shared_B);
  out.insert(out.end(), s.shared_A_heads.begin(), s.shared_A_heads.end());
  out.insert(out.end(), s.head_B.begin(), s.head_B.end());
  out.insert(out.end(), s.head_A.begin(), s.head_A.end());
  if (s.bias_delta) out.push_back(s.bias_delta);
  return out;
}

/// Names parallel to trainable_params().
inline std::vector<std::string> trainable_param_names(const AdapterState &s) {
  std::vector<std::string> out;
  if (s.shared_B) out.emplace_back("shared_B");
  for (std::size_t h = 0; h < s.shared_A_heads.size(); ++h)
    out.push_back("shared_A[" + std::to_string(h) + "]");
  for (std::size_t h = 0; h < s.head_B.size(); ++h)
    out.push_back("head_B[" + std::to_string(h) + "]");
  for (std::size_t h = 0; h < s.head_A.size(); ++h)
    out.push_back("head_A[" + std::to_string(h) + "]");
  if (s.bias_delta) out.emplace_back("bias_delta");
  return out;
}

/// (rows, cols) of every factor, in trainable_params() order.
inline std::vector<std::pair<std::size_t, std::size_t>>
expected_factor_shapes(const AdapterScheme &s, const ModelDims &dims) {
  const std::size_t d = dims.model_dim(), p = dims.head_dim, nh = dims.n_heads;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (uses_shared(s.kind)) {
    out.emplace_back(d, s.rank_shared);
    for (std::size_t h = 0; h < nh; ++h) out.emplace_back(s.rank_shared, p);
  }
  if (uses_head(s.kind)) {
    const std::size_t brows = is_lite(s.kind) ? p : d;
    for (std::size_t h = 0; h < nh; ++h) out.emplace_back(brows, s.rank_head);
    for (std::size_t h = 0; h < nh; ++h) out.emplace_back(s.rank_head, p);
  }
  if (s.include_bias) out.emplace_back(1, d);
  return out;
}

/// Names parallel to expected_factor_shapes().
inline std::vector<std::string> expected_factor_names(const AdapterScheme &s,
                                                      const ModelDims &dims) {
  std::vector<std::string> out;
  auto indexed = [&](const char *base) {
    for (std::size_t h = 0; h < dims.n_heads; ++h)
      out.push_back(std::string(base) + "[" + std::to_string(h) + "]");
  };
  if (uses_shared(s.kind)) {
    out.emplace_back("shared_B");
    indexed("shared_A");
  }
  if (uses_head(s.kind)) {
    indexed("head_B");
    indexed("head_A");
  }
  if (s.include_bias) out.emplace_back("bias_delta");
  return out;
}

/// Builds a state from factor values in trainable_params() order, checking
/// every shape against the scheme.
inline AdapterState assemble_adapter(const AdapterScheme &scheme, Target target,
                                     const ModelDims &dims, std::uint64_t seed,
                                     std::vector<Matrix> factors) {
  scheme.validate(&dims);
  const auto shapes = expected_factor_shapes(scheme, dims);
  if (factors.size() != shapes.size())
    throw DimensionError("assemble_adapter: " + std::to_string(factors.size()) +
                         " factors, scheme needs " +
                         std::to_string(shapes.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (factors[i].rows() != shapes[i].first ||
        factors[i].cols() != shapes[i].second)
      throw DimensionError("assemble_adapter: factor " +
                           expected_factor_names(scheme, dims)[i] + " is " +
                           factors[i].shape_str() + ", expected " +
                           std::to_string(shapes[i].first) + "x" +
                           std::to_string(shapes[i].second));
  AdapterState s;
  s.scheme = scheme;
  s.target = target;
  s.seed = seed;
  std::size_t i = 0;
  const std::size_t nh = dims.n_heads;
  if (uses_shared(scheme.kind)) {
    s.shared_B = variable(std::move(factors[i++]));
    for (std::size_t h = 0; h < nh; ++h)
      s.shared_A_heads.push_back(variable(std::move(factors[i++])));
  }
  if (uses_head(scheme.kind)) {
    for (std::size_t h = 0; h < nh; ++h)
      s.head_B.push_back(variable(std::move(factors[i++])));
    for (std::size_t h = 0; h < nh; ++h)
      s.head_A.push_back(variable(std::move(factors[i++])));
  }
  if (scheme.include_bias)
    s.bias_delta = variable(std::move(factors[i++]));
  return s;
}

/// B-side zero, A-side Gaussian with std 1/sqrt(rank), bias delta zero.
inline AdapterState init_adapter(const AdapterScheme &scheme, Target target,
                                 const ModelDims &dims, std::uint64_t seed) {
  scheme.validate(&dims);
  std::mt19937_64 rng(seed);
  const std::size_t d = dims.model_dim(), p = dims.head_dim, nh = dims.n_heads;
  std::vector<Matrix> f;
  if (uses_shared(scheme.kind)) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(scheme.rank_shared));
    f.emplace_back(d, scheme.rank_shared);
    for (std::size_t h = 0; h < nh; ++h)
      f.push_back(Matrix::gaussian(scheme.rank_shared, p, sd, rng));
  }
  if (uses_head(scheme.kind)) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(scheme.rank_head));
    const std::size_t brows = is_lite(scheme.kind) ? p : d;
    for (std::size_t h = 0; h < nh; ++h)
      f.emplace_back(brows, scheme.rank_head);
    for (std::size_t h = 0; h < nh; ++h)
      f.push_back(Matrix::gaussian(scheme.rank_head, p, sd, rng));
  }
  if (scheme.include_bias)
    f.emplace_back(1, d);
  return assemble_adapter(scheme, target, dims, seed, std::move(f));
}

/// Overwrites every factor, B-side included, with Gaussian entries. Used to
/// probe the structure of non-trivial updates.
inline void randomize_factors(AdapterState &s, std::uint64_t seed,
                              double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  for (const auto &v : trainable_params(s))
    v->value = Matrix::gaussian(v->value.rows(), v->value.cols(), stddev, rng);
}

namespace detail {

inline Var key_block(const Matrix *frozen_wk, std::size_t h, std::size_t p,
                     SchemeKind kind) {
  if (!frozen_wk)
    throw ContractError(std::string(to_string(kind)) +
                        " needs the frozen W_k as head basis");
  return constant(slice_cols(*frozen_wk, h * p, (h + 1) * p));
}

} // namespace detail

/// Head-h update block (d x p, column orientation) as a graph node.
inline Var head_delta_block(const AdapterState &s, const Matrix *frozen_wk,
                            std::size_t h, const ModelDims &dims) {
  const std::size_t p = dims.head_dim;
  switch (s.scheme.kind) {
  case SchemeKind::LoRA:
    return matmul(s.shared_B, s.shared_A_heads[h]);
  case SchemeKind::KernelWise:
    return matmul(s.head_B[h], s.head_A[h]);
  case SchemeKind::KernelWiseLite:
    return matmul(matmul(detail::key_block(frozen_wk, h, p, s.scheme.kind),
                         s.head_B[h]),
                  s.head_A[h]);
  case SchemeKind::KernelMix:
    return matmul(concat_cols({s.shared_B, s.head_B[h]}),
                  concat_rows({s.shared_A_heads[h], s.head_A[h]}));
  case SchemeKind::KernelMixLite:
    return add(matmul(s.shared_B, s.shared_A_heads[h]),
               matmul(matmul(detail::key_block(frozen_wk, h, p,
                                               s.scheme.kind),
                             s.head_B[h]),
                      s.head_A[h]));
  }
  throw ContractError("head_delta_block: bad scheme");
}

inline void check_state(const AdapterState &s, const ModelDims &dims) {
  const auto shapes = expected_factor_shapes(s.scheme, dims);
  const auto params = trainable_params(s);
  if (params.size() != shapes.size())
    throw DimensionError("AdapterState: factor set does not match " +
                         std::string(to_string(s.scheme.kind)));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (params[i]->value.rows() != shapes[i].first ||
        params[i]->value.cols() != shapes[i].second)
      throw DimensionError("AdapterState: factor " +
                           trainable_param_names(s)[i] + " is " +
                           params[i]->value.shape_str() + ", expected " +
                           std::to_string(shapes[i].first) + "x" +
                           std::to_string(shapes[i].second));
}

/// Full d x d update as a differentiable node.
inline Var compose_delta_var(const AdapterState &s, const Matrix *frozen_wk,
                             const ModelDims &dims) {
  check_state(s, dims);
  std::vector<Var> blocks;
  blocks.reserve(dims.n_heads);
  for (std::size_t h = 0; h < dims.n_heads; ++h)
    blocks.push_back(head_delta_block(s, frozen_wk, h, dims));
  auto delta = concat_cols(blocks);
  return s.target == Target::O ? transpose(delta) : delta;
}

inline Matrix compose_delta(const AdapterState &s, const AttentionWeights &w,
                            const ModelDims &dims) {
  return compose_delta_var(s, &w.w_k, dims)->value;
}

/// Without frozen weights; lite schemes raise ContractError.
inline Matrix compose_delta(const AdapterState &s, const ModelDims &dims) {
  return compose_delta_var(s, nullptr, dims)->value;
}

/// w_base + delta. w_base is taken by const reference and never written.
inline Matrix adapted_weight(const Matrix &w_base, const AdapterState &s,
                             const AttentionWeights &w,
                             const ModelDims &dims) {
  return w_base + compose_delta(s, w, dims);
}

inline Matrix adapted_bias(const Matrix &b_base, const AdapterState &s) {
  return s.bias_delta ? b_base + s.bias_delta->value : b_base;
}

/// x W_base + x dW evaluated through the factors, never forming dW.
/// Column targets push x through each head's chain (x B) A; the O target
/// pushes each head's input block through the transposed chain.
inline Matrix factored_forward(const Matrix &x, const Matrix &w_base,
                               const AdapterState &s, const AttentionWeights &w,
                               const ModelDims &dims) {
  check_state(s, dims);
  const std::size_t p = dims.head_dim;
  Matrix out = matmul(x, w_base);

  // Chains of factors whose product is the head-h column block.
  auto chains = [&](std::size_t h) {
    std::vector<std::vector<Matrix>> c;
    const auto kind = s.scheme.kind;
    if (uses_shared(kind))
      c.push_back({s.shared_B->value, s.shared_A_heads[h]->value});
    if (uses_head(kind)) {
      if (is_lite(kind))
        c.push_back({slice_cols(w.w_k, h * p, (h + 1) * p),
                     s.head_B[h]->value, s.head_A[h]->value});
      else
        c.push_back({s.head_B[h]->value, s.head_A[h]->value});
    }
    return c;
  };

  for (std::size_t h = 0; h < dims.n_heads; ++h) {
    for (const auto &chain : chains(h)) {
      if (s.target != Target::O) {
        Matrix t = x;
        for (const auto &f : chain)
          t = matmul(t, f);
        for (std::size_t i = 0; i < t.rows(); ++i)
          for (std::size_t j = 0; j < p; ++j)
            out(i, h * p + j) += t(i, j);
      } else {
        // x_h (B A)^T = x_h A^T B^T, applied right to left.
        Matrix t = slice_cols(x, h * p, (h + 1) * p);
        for (auto it = chain.rbegin(); it != chain.rend(); ++it)
          t = matmul(t, transpose(*it));
        out += t;
      }
    }
  }
  return out;
}

/// Key-reuse forward for lite schemes on a column target:
/// x W_base + sum_h (K^(h) - 1 b_k^(h)T) B^(h) A^(h)  [+ (x B) A^(h) for mix-lite].
/// The key bias is removed from the reused K so the result matches the
/// merged weight exactly.
inline Var lite_fast_forward(const Var &x, const Var &k_precomputed,
                             const AdapterState &s, const Var &w_base,
                             const Matrix &b_k, const ModelDims &dims) {
  if (!is_lite(s.scheme.kind))
    throw ContractError("lite_fast_forward: scheme " +
                        std::string(to_string(s.scheme.kind)) +
                        " has no key basis");
  if (s.target == Target::O)
    throw ContractError("lite_fast_forward: O target has no key-reuse form");
  check_state(s, dims);
  const std::size_t n = x->value.rows(), p = dims.head_dim;
  if (!k_precomputed->value.same_shape(x->value) ||
      k_precomputed->value.cols() != dims.model_dim())
    throw DimensionError("lite_fast_forward: K " +
                         k_precomputed->value.shape_str() + " vs x " +
                         x->value.shape_str());
  auto k_nobias = add(k_precomputed, constant((-1.0) * broadcast_row(b_k, n)));
  std::vector<Var> blocks;
  blocks.reserve(dims.n_heads);
  for (std::size_t h = 0; h < dims.n_heads; ++h)
    blocks.push_back(matmul(
        matmul(slice_cols(k_nobias, h * p, (h + 1) * p), s.head_B[h]),
        s.head_A[h]));
  auto out = add(matmul(x, w_base), concat_cols(blocks));
  if (s.scheme.kind == SchemeKind::KernelMixLite)
    out = add(out, matmul(matmul(x, s.shared_B), concat_cols(s.shared_A_heads)));
  return out;
}

/// Variant whose reused K already has the bias stripped (K = x W_k).
inline Var lite_fast_forward_nobias(const Var &x, const Var &k_nobias,
                                    const AdapterState &s, const Var &w_base,
                                    const ModelDims &dims) {
  return lite_fast_forward(x, k_nobias, s, w_base,
                           Matrix(1, dims.model_dim()), dims);
}

inline Matrix lite_fast_forward(const Matrix &x, const Matrix &k_precomputed,
                                const AdapterState &s, const Matrix &w_base,
                                const Matrix &b_k, const ModelDims &dims) {
  return lite_fast_forward(constant(x), constant(k_precomputed), s,
                           constant(w_base), b_k, dims)
      ->value;
}

} // namespace kwadapt
