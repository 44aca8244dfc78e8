// SPDX-License-Identifier: Apache-2.0
/**
 * @file   harness.hpp
 * @brief  Toy adaptation tasks: a frozen random attention stack, a teacher
 *         that differs from it by a structured weight perturbation, and
 *         adapter-only AdamW training against the teacher's outputs.
 */
#pragma once

#include "planner.hpp"
#include "rank.hpp"

#include <algorithm>
#include <cstring>
#include <memory>
#include <numeric>

namespace kwadapt {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (base seed, purpose, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(purpose)) + index);
}

/// FNV-1a over shapes and raw entry bytes.
class Digest {
public:
  void add(const Matrix &m) {
    add_u64(m.rows());
    add_u64(m.cols());
    add_bytes(m.data().data(), m.size() * sizeof(double));
  }
  std::uint64_t value() const noexcept { return h_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(h_));
    return buf;
  }

private:
  void add_u64(std::uint64_t v) { add_bytes(&v, sizeof v); }
  void add_bytes(const void *p, std::size_t n) {
    const auto *b = static_cast<const unsigned char *>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001B3ULL;
    }
  }
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

/// Stack of attention sub-layers with residual connections.
struct BaseModel {
  ModelDims dims;
  std::vector<AttentionWeights> layers;

  static BaseModel random(const ModelDims &dims, std::uint64_t seed) {
    dims.validate();
    BaseModel m{dims, {}};
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < dims.n_layers; ++l)
      m.layers.push_back(AttentionWeights::random(dims, rng));
    return m;
  }

  std::string checksum() const {
    Digest d;
    for (const auto &w : layers)
      for (Target t : kAllTargets) {
        d.add(w.weight(t));
        d.add(w.bias(t));
      }
    return d.hex();
  }
};

inline bool same_architecture(const ModelDims &a, const ModelDims &b) {
  return a.n_layers == b.n_layers && a.n_heads == b.n_heads &&
         a.head_dim == b.head_dim;
}

/// A frozen base plus adapter states per (layer, target).
struct AdaptedModel {
  std::shared_ptr<const BaseModel> base;
  std::vector<std::array<std::optional<AdapterState>, 4>> adapters;
  /// Route lite schemes on Q/K/V through the key-reuse forward.
  bool lite_fast_path = false;

  const std::optional<AdapterState> &adapter(std::size_t layer, Target t) const {
    return adapters[layer][static_cast<std::size_t>(t)];
  }
  std::optional<AdapterState> &adapter(std::size_t layer, Target t) {
    return adapters[layer][static_cast<std::size_t>(t)];
  }

  std::vector<Var> params() const {
    std::vector<Var> out;
    for (const auto &layer : adapters)
      for (const auto &a : layer)
        if (a) {
          auto p = trainable_params(*a);
          out.insert(out.end(), p.begin(), p.end());
        }
    return out;
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < adapters.size(); ++l)
      for (const auto &a : adapters[l])
        if (a)
          for (const auto &n : trainable_param_names(*a))
            out.push_back("layer" + std::to_string(l) + "." +
                          to_string(a->target) + "." + n);
    return out;
  }

  std::uint64_t param_count() const {
    std::uint64_t n = 0;
    for (const auto &p : params())
      n += p->value.size();
    return n;
  }

  /// Full update of one adapted matrix.
  Matrix delta(std::size_t layer, Target t) const {
    const auto &a = adapter(layer, t);
    if (!a)
      return Matrix(base->dims.model_dim(), base->dims.model_dim());
    return compose_delta(*a, base->layers[layer], base->dims);
  }
};

inline AdaptedModel unadapted(std::shared_ptr<const BaseModel> base) {
  AdaptedModel m;
  m.adapters.resize(base->dims.n_layers);
  m.base = std::move(base);
  return m;
}

/// Fresh adapters for every (layer, target) the plan assigns.
inline AdaptedModel attach_plan(std::shared_ptr<const BaseModel> base,
                                const BudgetPlan &plan, std::uint64_t seed) {
  plan.validate();
  if (!same_architecture(base->dims, plan.dims))
    throw ConfigError("plan '" + plan.name +
                      "' dims do not match the model (layers/heads/head_dim)");
  AdaptedModel m = unadapted(std::move(base));
  for (std::size_t l = 0; l < plan.dims.n_layers; ++l)
    for (Target t : kAllTargets)
      if (auto s = plan.scheme_for(l, t))
        m.adapter(l, t) = init_adapter(
            *s, t, m.base->dims,
            derive_seed(seed, 0xADA7,
                        l * 4 + static_cast<std::size_t>(t)));
  return m;
}

namespace detail {

/// Graph-side weights of one layer for one forward sweep.
struct LayerGraph {
  AttentionVars vars;
  std::array<const AdapterState *, 4> fast{};
  Var wk_base;
  bool any_fast = false;
  bool k_adapted = false;
};

inline LayerGraph build_layer(const AdaptedModel &m, std::size_t l) {
  const auto &base = m.base->layers[l];
  const auto &dims = m.base->dims;
  LayerGraph g;
  g.vars = AttentionVars::from(base, false);
  g.wk_base = g.vars.w_k;
  for (Target t : kAllTargets) {
    const auto &a = m.adapter(l, t);
    if (!a)
      continue;
    if (t == Target::K)
      g.k_adapted = true;
    Var *w = nullptr, *b = nullptr;
    switch (t) {
    case Target::Q: w = &g.vars.w_q; b = &g.vars.b_q; break;
    case Target::K: w = &g.vars.w_k; b = &g.vars.b_k; break;
    case Target::V: w = &g.vars.w_v; b = &g.vars.b_v; break;
    case Target::O: w = &g.vars.w_o; b = &g.vars.b_o; break;
    }
    if (a->bias_delta)
      *b = add(*b, a->bias_delta);
    if (m.lite_fast_path && is_lite(a->scheme.kind) && t != Target::O) {
      g.fast[static_cast<std::size_t>(t)] = &*a;
      g.any_fast = true;
    } else {
      *w = add(*w, compose_delta_var(*a, &base.w_k, dims));
    }
  }
  return g;
}

inline Var layer_forward(const LayerGraph &g, const Var &x,
                         const ModelDims &dims) {
  const std::size_t n = x->value.rows();
  Var k_nobias = g.any_fast ? matmul(x, g.wk_base) : Var{};
  auto proj = [&](Target t, const Var &w, const Var &b) -> Var {
    if (const AdapterState *s = g.fast[static_cast<std::size_t>(t)])
      return add(lite_fast_forward_nobias(x, k_nobias, *s, w, dims),
                 broadcast_row(b, n));
    if (t == Target::K && k_nobias && !g.k_adapted)
      return add(k_nobias, broadcast_row(b, n));
    return affine(x, w, b);
  };
  QKV qkv{proj(Target::Q, g.vars.w_q, g.vars.b_q),
          proj(Target::K, g.vars.w_k, g.vars.b_k),
          proj(Target::V, g.vars.w_v, g.vars.b_v)};
  return add(x, attention_from_qkv(qkv, g.vars, dims));
}

} // namespace detail

/// Reusable per-step graph of the adapted weights; feed many sequences
/// through one composition.
class ForwardGraph {
public:
  explicit ForwardGraph(const AdaptedModel &m) : dims_(m.base->dims) {
    for (std::size_t l = 0; l < dims_.n_layers; ++l)
      layers_.push_back(detail::build_layer(m, l));
  }

  Var operator()(const Var &x) const {
    if (x->value.cols() != dims_.model_dim())
      throw DimensionError("forward: input " + x->value.shape_str() +
                           " vs model dim " + std::to_string(dims_.model_dim()));
    Var h = x;
    for (const auto &g : layers_)
      h = detail::layer_forward(g, h, dims_);
    return h;
  }

  Matrix operator()(const Matrix &x) const { return (*this)(constant(x))->value; }

private:
  ModelDims dims_;
  std::vector<detail::LayerGraph> layers_;
};

inline Matrix forward(const AdaptedModel &m, const Matrix &x) {
  return ForwardGraph(m)(x);
}

inline Matrix forward(std::shared_ptr<const BaseModel> base, const Matrix &x) {
  return forward(unadapted(std::move(base)), x);
}

// -------------------------------------------------------------------- tasks

enum class TeacherKind : std::uint8_t { HeadSpecificLowRank, SharedLowRank, Dense };

inline const char *to_string(TeacherKind k) {
  switch (k) {
  case TeacherKind::HeadSpecificLowRank: return "head-specific-lowrank";
  case TeacherKind::SharedLowRank: return "shared-lowrank";
  case TeacherKind::Dense: return "dense";
  }
  return "?";
}

inline TeacherKind parse_teacher_kind(const std::string &s) {
  if (s == "head-specific-lowrank") return TeacherKind::HeadSpecificLowRank;
  if (s == "shared-lowrank") return TeacherKind::SharedLowRank;
  if (s == "dense") return TeacherKind::Dense;
  throw ConfigError("teacher_kind: unknown '" + s +
                    "' (expected head-specific-lowrank, shared-lowrank or dense)");
}

struct ToyTask {
  ModelDims dims = ModelDims::toy();
  std::size_t seq_len = 16;
  std::uint64_t base_seed = 1;
  TeacherKind teacher_kind = TeacherKind::HeadSpecificLowRank;
  std::size_t teacher_rank = 1;
  double teacher_scale = 0.5;
  std::size_t dataset_size = 64;
  std::vector<Target> targets{Target::V};
  /// Head-specific perturbations take their column space from the frozen
  /// key block W_k^(h), so every scheme family (lite ones included) can
  /// represent them. false draws unconstrained head bases.
  bool key_aligned = true;

  void validate() const {
    dims.validate();
    if (seq_len == 0)
      throw ConfigError("seq_len: must be positive");
    if (dataset_size == 0)
      throw ConfigError("dataset_size: must be positive");
    if (!(teacher_scale >= 0.0) || !std::isfinite(teacher_scale))
      throw ConfigError("teacher_scale: must be a finite value >= 0");
    if (teacher_rank == 0)
      throw ConfigError("teacher_rank: must be positive");
    if (teacher_rank > dims.head_dim)
      throw ConfigError("teacher_rank: " + std::to_string(teacher_rank) +
                        " exceeds head_dim " + std::to_string(dims.head_dim));
    if (targets.empty())
      throw ConfigError("targets: at least one target is required");
  }
};

struct Dataset {
  std::vector<Matrix> inputs;
  std::vector<Matrix> outputs;
  std::size_t size() const noexcept { return inputs.size(); }
};

struct TaskInstance {
  std::shared_ptr<const BaseModel> base;
  std::shared_ptr<const BaseModel> teacher;
  Dataset data;
};

/// Teacher update for one weight, in the same orientation convention as the
/// adapters (head blocks are rows of W_o).
inline Matrix teacher_delta(const ToyTask &task, const AttentionWeights &w,
                            Target t, std::mt19937_64 &rng) {
  const auto &dims = task.dims;
  const std::size_t d = dims.model_dim(), p = dims.head_dim,
                    r = task.teacher_rank;
  Matrix delta(d, d);
  switch (task.teacher_kind) {
  case TeacherKind::HeadSpecificLowRank: {
    std::vector<Matrix> blocks;
    for (std::size_t h = 0; h < dims.n_heads; ++h) {
      Matrix basis = task.key_aligned
                         ? matmul(slice_cols(w.w_k, h * p, (h + 1) * p),
                                  Matrix::gaussian(p, r, 1.0, rng))
                         : Matrix::gaussian(d, r, 1.0, rng);
      blocks.push_back(matmul(basis, Matrix::gaussian(r, p, 1.0, rng)));
    }
    delta = concat_cols(std::span<const Matrix>(blocks));
    break;
  }
  case TeacherKind::SharedLowRank:
    delta = matmul(Matrix::gaussian(d, r, 1.0, rng),
                   Matrix::gaussian(r, d, 1.0, rng));
    break;
  case TeacherKind::Dense:
    delta = Matrix::gaussian(d, d, 1.0, rng);
    break;
  }
  if (t == Target::O)
    delta = transpose(delta);
  const double norm = frobenius_norm(delta);
  const double want = task.teacher_scale * frobenius_norm(w.weight(t));
  return norm > 0.0 ? (want / norm) * delta : Matrix(d, d);
}

inline TaskInstance make_task(const ToyTask &task) {
  task.validate();
  TaskInstance inst;
  auto base = std::make_shared<BaseModel>(
      BaseModel::random(task.dims, derive_seed(task.base_seed, 1)));
  auto teacher = std::make_shared<BaseModel>(*base);
  std::mt19937_64 trng(derive_seed(task.base_seed, 2));
  for (std::size_t l = 0; l < task.dims.n_layers; ++l)
    for (Target t : task.targets)
      teacher->layers[l].weight(t) +=
          teacher_delta(task, base->layers[l], t, trng);
  inst.base = base;
  inst.teacher = teacher;

  std::mt19937_64 drng(derive_seed(task.base_seed, 3));
  const ForwardGraph teacher_fwd(unadapted(teacher));
  for (std::size_t i = 0; i < task.dataset_size; ++i) {
    Matrix x = Matrix::gaussian(task.seq_len, task.dims.model_dim(), 1.0, drng);
    inst.data.outputs.push_back(teacher_fwd(x));
    inst.data.inputs.push_back(std::move(x));
  }
  return inst;
}

// ----------------------------------------------------------------- training

struct TrainConfig {
  double learning_rate = 1e-2;
  std::size_t batch_size = 8;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 2000;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  /// Send lite schemes on Q/K/V through the key-reuse forward.
  bool lite_fast_path = false;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate: must be finite and >= 0");
    if (batch_size == 0)
      throw ConfigError("batch_size: must be positive");
    if (total_steps == 0)
      throw ConfigError("total_steps: must be positive");
    if (warmup_steps > total_steps)
      throw ConfigError("warmup_steps: exceeds total_steps");
    if (!(weight_decay >= 0.0))
      throw ConfigError("weight_decay: must be >= 0");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0))
      throw ConfigError("adam_beta1: must be in (0, 1)");
    if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0))
      throw ConfigError("adam_beta2: must be in (0, 1)");
    if (!(adam_eps > 0.0))
      throw ConfigError("adam_eps: must be positive");
  }
};

/// Linear warmup 0 -> lr over [0, warmup], then linear decay to 0 at total.
/// `step` counts from 1.
inline double scheduled_lr(const TrainConfig &cfg, std::size_t step) {
  const double lr = cfg.learning_rate;
  if (step <= cfg.warmup_steps)
    return cfg.warmup_steps == 0
               ? lr
               : lr * static_cast<double>(step) /
                     static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.total_steps)
    return 0.0;
  return lr * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

/// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
public:
  AdamW(std::vector<Var> params, const TrainConfig &cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto &p : params_) {
      m_.emplace_back(p->value.rows(), p->value.cols());
      v_.emplace_back(p->value.rows(), p->value.cols());
    }
  }

  void step(double lr) {
    ++t_;
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto &p = *params_[i];
      auto w = p.value.data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      const bool has_grad = p.grad.has_value();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double g = has_grad ? p.grad->data()[k] : 0.0;
        m[k] = b1 * m[k] + (1.0 - b1) * g;
        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
        w[k] *= 1.0 - lr * cfg_.weight_decay;
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.adam_eps);
      }
    }
  }

private:
  std::vector<Var> params_;
  TrainConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

struct TrainLog {
  std::vector<double> losses; ///< batch loss before each update
  std::vector<double> learning_rates;
  double initial_loss = 0.0; ///< full-dataset loss before training
  double final_loss = 0.0;   ///< full-dataset loss after training
  std::string base_checksum_before;
  std::string base_checksum_after;
  std::uint64_t trainable_param_count = 0;
};

/// Mean over sequences of the per-sequence MSE.
inline Var batch_loss(const ForwardGraph &fwd, const Dataset &data,
                      std::span<const std::size_t> indices) {
  Var total;
  for (std::size_t i : indices) {
    auto term = mse(fwd(constant(data.inputs[i])), constant(data.outputs[i]));
    total = total ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(indices.size()));
}

inline double dataset_loss(const AdaptedModel &m, const Dataset &data) {
  const ForwardGraph fwd(m);
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    s += mse(constant(fwd(data.inputs[i])), constant(data.outputs[i]))
             ->value(0, 0);
  return s / static_cast<double>(data.size());
}

inline TrainLog train(AdaptedModel &model, const Dataset &data,
                      const TrainConfig &cfg) {
  cfg.validate();
  if (data.size() == 0)
    throw ConfigError("train: empty dataset");
  model.lite_fast_path = cfg.lite_fast_path;
  TrainLog log;
  log.base_checksum_before = model.base->checksum();
  log.trainable_param_count = model.param_count();
  log.initial_loss = dataset_loss(model, data);

  const auto params = model.params();
  AdamW opt(params, cfg);
  // Epoch-wise shuffles without replacement; a short tail is dropped. Batch
  // indices are sorted so the loss reduction order does not depend on the
  // shuffle.
  std::mt19937_64 rng(derive_seed(cfg.seed, 0xBA7C));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = std::min(cfg.batch_size, data.size());
  std::size_t cursor = data.size();
  std::vector<std::size_t> idx(bs);

  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    if (cursor + bs > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    std::copy_n(order.begin() + static_cast<std::ptrdiff_t>(cursor), bs, idx.begin());
    std::sort(idx.begin(), idx.end());
    cursor += bs;
    zero_grad(std::span<const Var>(params));
    const ForwardGraph fwd(model);
    auto loss = batch_loss(fwd, data, idx);
    const double lv = loss->value(0, 0);
    if (!std::isfinite(lv))
      throw DivergenceError("training diverged: non-finite loss at step " +
                                std::to_string(step),
                            step);
    backward(loss);
    const double lr = scheduled_lr(cfg, step);
    opt.step(lr);
    log.losses.push_back(lv);
    log.learning_rates.push_back(lr);
  }
  zero_grad(std::span<const Var>(params));
  log.final_loss = dataset_loss(model, data);
  if (!std::isfinite(log.final_loss))
    throw DivergenceError("training diverged: non-finite final loss",
                          cfg.total_steps);
  log.base_checksum_after = model.base->checksum();
  return log;
}

// --------------------------------------------------------------- comparison

struct ComparisonRow {
  std::string plan;
  std::uint64_t params = 0;
  double percent = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  /// Largest numerical rank of the learned update per target over layers.
  std::array<std::size_t, 4> delta_rank{};
};

struct TrainedRun {
  AdaptedModel model;
  TrainLog log;
};

inline TrainedRun train_plan(const TaskInstance &inst, const BudgetPlan &plan,
                             const TrainConfig &cfg) {
  auto model = attach_plan(inst.base, plan, cfg.seed);
  auto log = train(model, inst.data, cfg);
  return {std::move(model), std::move(log)};
}

inline std::vector<ComparisonRow>
compare_schemes(const ToyTask &task, const std::vector<BudgetPlan> &plans,
                const TrainConfig &cfg) {
  const auto inst = make_task(task);
  std::vector<ComparisonRow> rows;
  for (const auto &plan : plans) {
    auto run = train_plan(inst, plan, cfg);
    ComparisonRow row;
    row.plan = plan.name;
    const auto rep = report(plan);
    row.params = rep.params_total;
    row.percent = rep.percent_of_base;
    row.initial_loss = run.log.initial_loss;
    row.final_loss = run.log.final_loss;
    for (std::size_t l = 0; l < task.dims.n_layers; ++l)
      for (Target t : kAllTargets)
        if (run.model.adapter(l, t)) {
          auto &slot = row.delta_rank[static_cast<std::size_t>(t)];
          slot = std::max(slot, numerical_rank(run.model.delta(l, t)));
        }
    rows.push_back(row);
  }
  return rows;
}

} // namespace kwadapt
