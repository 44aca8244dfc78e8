// SPDX-License-Identifier: Apache-2.0
/**
 * @file   analysis.hpp
 * @brief  Numerical checks of the attention/adapter structure: rank
 *         diagnostics, dual-path equivalences and gradient audits.
 *
 * Verification routines report failures instead of throwing, and keep the
 * first failing case so it can be replayed.
 */
#pragma once

#include "harness.hpp"

namespace kwadapt {

struct RankReport {
  std::vector<std::size_t> per_head_rank;
  std::size_t full_rank = 0;
  /// Rank of the concatenated orthonormal bases of all head blocks.
  std::size_t shared_space_dim = 0;
  double threshold = kRankThreshold;
};

/// Ranks of the column blocks of a d x d update (rows for O updates should
/// be passed transposed).
inline RankReport rank_analysis(const Matrix &delta, const ModelDims &dims,
                                double threshold = kRankThreshold) {
  const std::size_t d = dims.model_dim(), p = dims.head_dim;
  if (delta.rows() != d || delta.cols() != d)
    throw DimensionError("rank_analysis: delta " + delta.shape_str() +
                         " vs model dim " + std::to_string(d));
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ContractError("rank_analysis: threshold must be in (0, 1)");
  if (!all_finite(delta))
    throw ContractError("rank_analysis: non-finite entries");
  RankReport r;
  r.threshold = threshold;
  r.full_rank = numerical_rank(delta, threshold);
  std::vector<Matrix> bases;
  for (std::size_t h = 0; h < dims.n_heads; ++h) {
    const Matrix block = slice_cols(delta, h * p, (h + 1) * p);
    auto basis = column_basis(block, threshold);
    r.per_head_rank.push_back(basis ? basis->cols() : 0);
    if (basis)
      bases.push_back(std::move(*basis));
  }
  r.shared_space_dim =
      bases.empty()
          ? 0
          : numerical_rank(concat_cols(std::span<const Matrix>(bases)),
                           threshold);
  return r;
}

struct VerifyReport {
  std::string suite;
  bool passed = true;
  std::size_t trials = 0;
  std::size_t checks = 0;
  double worst = 0.0; ///< worst observed diff / error for the suite metric
  double tolerance = 0.0;
  json failing_case; ///< first failing case, null when passed
  json details = json::object();

  void record(double value, const std::function<json()> &describe) {
    ++checks;
    worst = std::max(worst, value);
    if (!(value < tolerance)) {
      if (passed)
        failing_case = describe();
      passed = false;
    }
  }
  void require(bool ok, const std::function<json()> &describe) {
    ++checks;
    if (!ok) {
      if (passed)
        failing_case = describe();
      passed = false;
    }
  }
};

inline json matrix_to_json(const Matrix &m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data().begin(), m.data().end())}};
}

struct KernelTrialShape {
  std::size_t n = 0; ///< 0 draws a size in [1, 8] per trial
  std::size_t keys = 0;
};

/// Softmax attention vs D^{-1} kappa(Q, K) V for random heads.
inline VerifyReport verify_kernel_equivalence(const ModelDims &dims,
                                              std::size_t trials,
                                              std::uint64_t seed,
                                              KernelTrialShape shape = {}) {
  VerifyReport rep;
  rep.suite = "kernel";
  rep.tolerance = 1e-12;
  if (trials == 0)
    throw ContractError("verify_kernel_equivalence: trials must be >= 1");
  const std::size_t p = dims.head_dim;
  std::mt19937_64 rng(derive_seed(seed, 0x4E57));
  std::uniform_int_distribution<std::size_t> len(1, 8);
  double worst_row_sum = 0.0;
  for (std::size_t t = 0; t < trials; ++t, ++rep.trials) {
    const std::size_t n = shape.n ? shape.n : len(rng);
    const std::size_t keys = shape.keys ? shape.keys : len(rng);
    for (std::size_t h = 0; h < dims.n_heads; ++h) {
      Matrix q = Matrix::gaussian(n, p, 1.0, rng);
      Matrix k = Matrix::gaussian(keys, p, 1.0, rng);
      Matrix v = Matrix::gaussian(keys, p, 1.0, rng);
      const Matrix softmax_path = attention_head(q, k, v, p);
      const auto view = kernel_view(q, k, p);
      const Matrix kernel_path = view.apply(v);
      rep.record(max_abs_diff(softmax_path, kernel_path), [&] {
        return json{{"trial", t}, {"head", h}, {"n", n}, {"N", keys},
                    {"p", p}, {"Q", matrix_to_json(q)},
                    {"K", matrix_to_json(k)}, {"V", matrix_to_json(v)}};
      });
      const Matrix w = view.weights();
      for (std::size_t i = 0; i < w.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < w.cols(); ++j)
          s += w(i, j);
        worst_row_sum = std::max(worst_row_sum, std::abs(s - 1.0));
      }
    }
  }
  rep.details["worst_row_sum_error"] = worst_row_sum;
  rep.require(worst_row_sum < 1e-12, [&] {
    return json{{"reason", "kernel weights not row-stochastic"},
                {"worst_row_sum_error", worst_row_sum}};
  });
  rep.details["n_heads"] = dims.n_heads;
  rep.details["head_dim"] = p;
  return rep;
}

/// Concatenate-then-project vs sum over heads of L^(h) V^(h) W_o^(h).
inline VerifyReport verify_rewrite_equivalence(const ModelDims &dims,
                                               std::size_t trials,
                                               std::uint64_t seed) {
  VerifyReport rep;
  rep.suite = "rewrite";
  rep.tolerance = 1e-12;
  if (trials == 0)
    throw ContractError("verify_rewrite_equivalence: trials must be >= 1");
  std::mt19937_64 rng(derive_seed(seed, 0x5E3B));
  std::uniform_int_distribution<std::size_t> len(1, 6);
  const std::size_t d = dims.model_dim();
  for (std::size_t t = 0; t < trials; ++t, ++rep.trials) {
    const auto w = AttentionWeights::random(dims, rng);
    const std::size_t n = len(rng);
    const Matrix x = Matrix::gaussian(n, d, 1.0, rng);
    const Matrix concat_form = attention_layer(x, w, dims);
    const Matrix sum_form = rewritten_attention(x, w, dims);
    rep.record(max_abs_diff(concat_form - broadcast_row(w.b_o, n), sum_form),
               [&] {
                 return json{{"trial", t}, {"n", n}, {"seed", seed},
                             {"n_heads", dims.n_heads},
                             {"head_dim", dims.head_dim}};
               });
  }
  return rep;
}

inline AdapterScheme random_scheme(SchemeKind kind, const ModelDims &dims,
                                   std::mt19937_64 &rng) {
  std::uniform_int_distribution<std::size_t> shared(1, 3);
  std::uniform_int_distribution<std::size_t> head(
      1, std::min<std::size_t>(3, dims.head_dim));
  AdapterScheme s{kind, 0, 0, true};
  if (uses_shared(kind))
    s.rank_shared = shared(rng);
  if (uses_head(kind))
    s.rank_head = head(rng);
  return s;
}

/// Merged weight vs factored forward for every scheme and target, plus the
/// key-reuse path for lite schemes on column targets.
inline VerifyReport verify_merge_equivalence(const ModelDims &dims,
                                             std::size_t trials,
                                             std::uint64_t seed) {
  VerifyReport rep;
  rep.suite = "merge";
  rep.tolerance = 1e-9;
  std::mt19937_64 rng(derive_seed(seed, 0x3E26));
  const std::size_t d = dims.model_dim(), n = 5;
  double worst_fast = 0.0, worst_factored = 0.0;
  for (std::size_t t = 0; t < trials; ++t, ++rep.trials) {
    const auto w = AttentionWeights::random(dims, rng);
    const Matrix x = Matrix::gaussian(n, d, 1.0, rng);
    const Matrix k = matmul(x, w.w_k) + broadcast_row(w.b_k, n);
    for (SchemeKind kind : kAllSchemeKinds) {
      for (Target target : kAllTargets) {
        auto st = init_adapter(random_scheme(kind, dims, rng), target, dims,
                               rng());
        randomize_factors(st, rng(), 0.5);
        const Matrix &wb = w.weight(target);
        const Matrix merged = matmul(x, adapted_weight(wb, st, w, dims));
        const double df = max_abs_diff(merged, factored_forward(x, wb, st, w, dims));
        worst_factored = std::max(worst_factored, df);
        auto describe = [&](const char *path) {
          return json{{"trial", t}, {"scheme", to_string(kind)},
                      {"target", to_string(target)}, {"path", path},
                      {"seed", seed}};
        };
        rep.record(df, [&] { return describe("factored"); });
        if (is_lite(kind) && target != Target::O) {
          const double dfast =
              max_abs_diff(merged, lite_fast_forward(x, k, st, wb, w.b_k, dims));
          worst_fast = std::max(worst_fast, dfast);
          rep.record(dfast, [&] { return describe("key-reuse"); });
        }
      }
    }
  }
  rep.details["worst_factored_diff"] = worst_factored;
  rep.details["worst_key_reuse_diff"] = worst_fast;
  return rep;
}

/// Column-space structure of random updates: LoRA blocks share span(B) and
/// ΔW has rank r; rank-1 KernelWise reaches rank min(N_h, d); lite blocks
/// stay inside span(W_k^(h)).
inline VerifyReport verify_rank_structure(const ModelDims &dims,
                                          std::size_t trials,
                                          std::uint64_t seed,
                                          double threshold = kRankThreshold) {
  VerifyReport rep;
  rep.suite = "rank";
  std::mt19937_64 rng(derive_seed(seed, 0x7A11));
  const std::size_t d = dims.model_dim(), p = dims.head_dim;
  const std::array<std::size_t, 3> lora_ranks{1, 2, 4};
  for (std::size_t t = 0; t < trials; ++t, ++rep.trials) {
    AttentionWeights w;
    w.w_k = Matrix::gaussian(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);

    const std::size_t r = std::min(lora_ranks[t % 3], d);
    auto lora = init_adapter(AdapterScheme::lora(r), Target::Q, dims, rng());
    randomize_factors(lora, rng());
    const Matrix dl = compose_delta(lora, dims);
    const auto lrep = rank_analysis(dl, dims, threshold);
    rep.require(lrep.full_rank == r, [&] {
      return json{{"trial", t}, {"check", "lora-full-rank"}, {"expected", r},
                  {"found", lrep.full_rank}};
    });
    for (std::size_t h = 0; h < dims.n_heads; ++h)
      rep.require(span_contains(lora.shared_B->value,
                                slice_cols(dl, h * p, (h + 1) * p), threshold),
                  [&] {
                    return json{{"trial", t}, {"check", "lora-shared-span"},
                                {"head", h}};
                  });

    auto kw = init_adapter(AdapterScheme::kernel_wise(1), Target::Q, dims, rng());
    randomize_factors(kw, rng());
    const std::size_t kw_rank = numerical_rank(compose_delta(kw, dims), threshold);
    const std::size_t kw_expected = std::min(dims.n_heads, d);
    rep.require(kw_rank == kw_expected, [&] {
      return json{{"trial", t}, {"check", "kernel-wise-full-rank"},
                  {"expected", kw_expected}, {"found", kw_rank}};
    });

    const std::size_t lite_r = 1 + t % std::min<std::size_t>(2, p);
    auto lite = init_adapter(AdapterScheme::kernel_wise_lite(lite_r), Target::V,
                             dims, rng());
    randomize_factors(lite, rng());
    const Matrix dlite = compose_delta(lite, w, dims);
    for (std::size_t h = 0; h < dims.n_heads; ++h)
      rep.require(span_contains(slice_cols(w.w_k, h * p, (h + 1) * p),
                                slice_cols(dlite, h * p, (h + 1) * p),
                                threshold),
                  [&] {
                    return json{{"trial", t}, {"check", "lite-key-span"},
                                {"head", h}};
                  });
  }
  rep.details["threshold"] = threshold;
  return rep;
}

struct AuditResult {
  double worst_rel_error = 0.0;
  std::string worst_param; ///< empty when nothing was audited
  std::size_t params_checked = 0;
  std::size_t entries_checked = 0;
};

/// Autodiff gradients of the batch loss vs central differences for every
/// trainable factor. Error per factor is max|ad - fd| / max(|ad|, |fd|, floor).
inline constexpr double kGradScaleFloor = 1e-3;

inline AuditResult grad_audit(const AdaptedModel &model, const Dataset &batch,
                              double step = 1e-5) {
  if (batch.size() == 0)
    throw ContractError("grad_audit: empty batch");
  AuditResult res;
  const auto params = model.params();
  const auto names = model.param_names();
  if (params.empty())
    return res;
  std::vector<std::size_t> all(batch.size());
  for (std::size_t i = 0; i < all.size(); ++i)
    all[i] = i;

  zero_grad(std::span<const Var>(params));
  {
    const ForwardGraph fwd(model);
    backward(batch_loss(fwd, batch, all));
  }
  // Blocks whose true gradient vanishes (the key bias under row softmax) are
  // scaled against the model-wide gradient magnitude instead of themselves.
  double global = 0.0;
  for (const Var &p : params)
    if (p->grad)
      global = std::max(global, max_abs(*p->grad));
  const double floor = kGradScaleFloor * global;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Var &p = params[i];
    const Matrix analytic = p->grad ? *p->grad
                                    : Matrix(p->value.rows(), p->value.cols());
    const Matrix saved = p->value;
    auto f = [&](const Matrix &at) {
      p->value = at;
      const ForwardGraph fwd(model);
      const double v = batch_loss(fwd, batch, all)->value(0, 0);
      p->value = saved;
      return v;
    };
    const Matrix numeric = finite_diff_grad(f, saved, step);
    const double scale =
        std::max({max_abs(analytic), max_abs(numeric), floor});
    const double err = scale == 0.0 ? 0.0 : max_abs_diff(analytic, numeric) / scale;
    ++res.params_checked;
    res.entries_checked += saved.size();
    if (err >= res.worst_rel_error) {
      res.worst_rel_error = err;
      res.worst_param = names[i];
    }
  }
  zero_grad(std::span<const Var>(params));
  return res;
}

/// Every scheme on Q, V and O of a toy model with random factors, audited
/// one scheme at a time and once with different schemes on each target.
inline VerifyReport verify_gradients(const ModelDims &dims, std::uint64_t seed,
                                     std::size_t seq_len = 4,
                                     bool include_fast_path = true) {
  VerifyReport rep;
  rep.suite = "grad";
  rep.tolerance = 1e-6;
  auto base = std::make_shared<BaseModel>(
      BaseModel::random(dims, derive_seed(seed, 0x6AD1)));
  std::mt19937_64 rng(derive_seed(seed, 0x6AD2));
  Dataset batch;
  for (int i = 0; i < 2; ++i) {
    batch.inputs.push_back(Matrix::gaussian(seq_len, dims.model_dim(), 1.0, rng));
    batch.outputs.push_back(Matrix::gaussian(seq_len, dims.model_dim(), 1.0, rng));
  }

  std::vector<std::pair<std::string, std::array<std::optional<SchemeKind>, 4>>>
      configs;
  for (SchemeKind k : kAllSchemeKinds)
    configs.push_back({to_string(k), {k, std::nullopt, k, k}});
  configs.push_back({"mixed", {SchemeKind::KernelMix, SchemeKind::LoRA,
                               SchemeKind::KernelMixLite, SchemeKind::KernelWise}});
  configs.push_back({"mixed-lite", {SchemeKind::KernelWiseLite, std::nullopt,
                                    SchemeKind::KernelMixLite,
                                    SchemeKind::KernelWiseLite}});

  json per_config = json::object();
  for (const auto &[label, kinds] : configs) {
    for (bool fast : {false, true}) {
      if (fast && !include_fast_path)
        continue;
      AdaptedModel m = unadapted(base);
      m.lite_fast_path = fast;
      bool any_lite = false;
      for (std::size_t l = 0; l < dims.n_layers; ++l)
        for (Target t : kAllTargets)
          if (const auto &k = kinds[static_cast<std::size_t>(t)]) {
            any_lite = any_lite || is_lite(*k);
            auto st = init_adapter(random_scheme(*k, dims, rng), t, dims, rng());
            randomize_factors(st, rng(), 0.3);
            m.adapter(l, t) = std::move(st);
          }
      if (fast && !any_lite)
        continue;
      const auto res = grad_audit(m, batch);
      const std::string key = label + (fast ? "+key-reuse" : "");
      per_config[key] = {{"worst_rel_error", res.worst_rel_error},
                         {"worst_param", res.worst_param},
                         {"entries", res.entries_checked}};
      ++rep.trials;
      rep.record(res.worst_rel_error, [&] {
        return json{{"config", key}, {"worst_param", res.worst_param},
                    {"worst_rel_error", res.worst_rel_error}, {"seed", seed}};
      });
    }
  }
  rep.details["configs"] = per_config;
  return rep;
}

inline json verify_report_to_json(const VerifyReport &r) {
  return {{"suite", r.suite},       {"passed", r.passed},
          {"trials", r.trials},     {"checks", r.checks},
          {"worst", r.worst},       {"tolerance", r.tolerance},
          {"failing_case", r.failing_case}, {"details", r.details}};
}

inline json rank_report_to_json(const RankReport &r) {
  return {{"per_head_rank", r.per_head_rank},
          {"full_rank", r.full_rank},
          {"shared_space_dim", r.shared_space_dim},
          {"threshold", r.threshold}};
}

} // namespace kwadapt
