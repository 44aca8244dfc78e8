// SPDX-License-Identifier: Apache-2.0
/**
 * @file   planner.hpp
 * @brief  Budget plans: which scheme adapts which weight matrix, and the
 *         resulting trainable-parameter accounting.
 */
#pragma once

#include "adapters.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace kwadapt {

using json = nlohmann::json;

/// Scheme assignment for one (layer, target) that differs from the uniform plan.
struct LayerOverride {
  std::size_t layer = 0;
  Target target = Target::Q;
  std::optional<AdapterScheme> scheme; ///< nullopt leaves the matrix frozen

  friend bool operator==(const LayerOverride &, const LayerOverride &) = default;
};

struct BudgetPlan {
  std::string name;
  std::array<std::optional<AdapterScheme>, 4> per_target{};
  ModelDims dims;
  bool include_bias = true;
  std::vector<LayerOverride> overrides;

  const std::optional<AdapterScheme> &scheme(Target t) const {
    return per_target[static_cast<std::size_t>(t)];
  }
  std::optional<AdapterScheme> &scheme(Target t) {
    return per_target[static_cast<std::size_t>(t)];
  }

  std::optional<AdapterScheme> scheme_for(std::size_t layer, Target t) const {
    for (auto it = overrides.rbegin(); it != overrides.rend(); ++it)
      if (it->layer == layer && it->target == t)
        return it->scheme;
    return scheme(t);
  }

  void validate() const {
    dims.validate();
    bool any = false;
    for (Target t : kAllTargets) {
      if (!scheme(t))
        continue;
      any = true;
      try {
        scheme(t)->validate(&dims);
      } catch (const ConfigError &e) {
        throw ConfigError("plan '" + name + "' targets." + to_string(t) +
                          ": " + e.what());
      }
    }
    for (std::size_t i = 0; i < overrides.size(); ++i) {
      const auto &o = overrides[i];
      if (o.layer >= dims.n_layers)
        throw ConfigError("plan '" + name + "' layer_overrides[" +
                          std::to_string(i) + "].layer: " +
                          std::to_string(o.layer) + " >= n_layers " +
                          std::to_string(dims.n_layers));
      if (o.scheme) {
        any = true;
        o.scheme->validate(&dims);
      }
    }
    if (!any)
      throw ConfigError("plan '" + name + "': no target is adapted");
  }

  friend bool operator==(const BudgetPlan &, const BudgetPlan &) = default;
};

struct BudgetReport {
  std::string plan_name;
  std::uint64_t params_per_layer = 0; ///< uniform layer (no overrides)
  std::uint64_t params_total = 0;
  double percent_of_base = 0.0;
  std::map<Target, std::uint64_t> per_target_breakdown; ///< per uniform layer, bias included
  /// Factor-only counts of Q, V, O (bias excluded), scaled so the smallest
  /// nonzero entry is 1.
  std::array<double, 3> ratio_q_v_o{0, 0, 0};
  std::optional<double> reported_percent; ///< figure printed with the preset
  std::vector<std::string> notes;
};

namespace detail {

struct Preset {
  const char *name;
  std::optional<AdapterScheme> q, v, o;
  /// Published budget percentage at GPT-2 small dims, if any.
  std::optional<double> reported_percent;
};

inline const std::vector<Preset> &presets() {
  using S = AdapterScheme;
  static const std::vector<Preset> table{
      {"lora-4", S::lora(4), S::lora(4), std::nullopt, 0.13},
      {"lora-54", S::lora(54), S::lora(54), std::nullopt, 1.61},
      {"kernel-mix-lite-qv-tiny", S::kernel_mix_lite(1, 1),
       S::kernel_mix_lite(1, 1), std::nullopt, 0.07},
      {"kernel-mix-lite-qv-small", S::kernel_mix_lite(2, 2),
       S::kernel_mix_lite(2, 1), std::nullopt, 0.13},
      {"kernel-mix-qvo-intermediate", S::kernel_mix(12, 3),
       S::kernel_mix_lite(8, 8), S::kernel_mix(8, 8), 1.61},
      {"kernel-wise-lite-qv-small", S::kernel_wise_lite(4),
       S::kernel_wise_lite(4), std::nullopt, 0.13},
      {"kernel-wise-mq", S::kernel_wise(12), S::kernel_wise(4), std::nullopt,
       1.56},
      {"kernel-wise-mv", S::kernel_wise(4), S::kernel_wise(12), std::nullopt,
       1.56},
      {"kernel-wise-qvo", S::kernel_wise(5), S::kernel_wise_lite(10),
       S::kernel_wise(10), 1.61},
      // 0.5% budget of an encoder model; no GPT-2 figure.
      {"kernel-mix-qvo-nlu", S::kernel_mix(2, 1), S::kernel_mix_lite(4, 2),
       S::kernel_mix(4, 2), std::nullopt},
  };
  return table;
}

} // namespace detail

inline std::vector<std::string> registered_plan_names() {
  std::vector<std::string> out;
  for (const auto &p : detail::presets())
    out.emplace_back(p.name);
  return out;
}

/// Unknown preset name.
struct UnknownPlanError : ConfigError {
  using ConfigError::ConfigError;
};

inline BudgetPlan builtin_plan(const std::string &name, const ModelDims &dims) {
  for (const auto &p : detail::presets()) {
    if (name != p.name)
      continue;
    BudgetPlan plan;
    plan.name = name;
    plan.dims = dims;
    plan.include_bias = true;
    plan.scheme(Target::Q) = p.q;
    plan.scheme(Target::V) = p.v;
    plan.scheme(Target::O) = p.o;
    plan.validate();
    return plan;
  }
  std::string list;
  for (const auto &n : registered_plan_names())
    list += (list.empty() ? "" : ", ") + n;
  throw UnknownPlanError("unknown plan '" + name + "'; registered plans: " +
                         list);
}

inline std::optional<double> reported_percent(const std::string &name) {
  for (const auto &p : detail::presets())
    if (name == p.name)
      return p.reported_percent;
  return std::nullopt;
}

inline double round_to(double v, int decimals) {
  const double f = std::pow(10.0, decimals);
  return std::round(v * f) / f;
}

inline BudgetReport report(const BudgetPlan &plan) {
  plan.validate();
  BudgetReport r;
  r.plan_name = plan.name;
  std::array<std::uint64_t, 4> factor_only{};
  for (Target t : kAllTargets) {
    const auto &s = plan.scheme(t);
    if (!s)
      continue;
    const auto n = count_params(*s, plan.dims);
    r.per_target_breakdown[t] = n;
    r.params_per_layer += n;
    AdapterScheme no_bias = *s;
    no_bias.include_bias = false;
    factor_only[static_cast<std::size_t>(t)] = count_params(no_bias, plan.dims);
  }
  for (std::size_t l = 0; l < plan.dims.n_layers; ++l)
    for (Target t : kAllTargets)
      if (auto s = plan.scheme_for(l, t))
        r.params_total += count_params(*s, plan.dims);
  r.percent_of_base = 100.0 * static_cast<double>(r.params_total) /
                      static_cast<double>(plan.dims.base_param_total);

  const std::array<std::uint64_t, 3> qvo{
      factor_only[static_cast<std::size_t>(Target::Q)],
      factor_only[static_cast<std::size_t>(Target::V)],
      factor_only[static_cast<std::size_t>(Target::O)]};
  std::uint64_t smallest = 0;
  for (auto v : qvo)
    if (v && (!smallest || v < smallest))
      smallest = v;
  if (smallest)
    for (std::size_t i = 0; i < 3; ++i)
      r.ratio_q_v_o[i] =
          static_cast<double>(qvo[i]) / static_cast<double>(smallest);

  if (!plan.overrides.empty())
    r.notes.push_back("per-layer overrides present; params_per_layer "
                      "describes the uniform layer only");
  if (plan.scheme(Target::O))
    r.notes.push_back("b_o is trained as part of the O adapter when its "
                      "scheme includes bias");
  if (plan.dims == ModelDims::gpt2_small()) {
    r.reported_percent = reported_percent(plan.name);
    if (r.reported_percent &&
        round_to(r.percent_of_base, 2) != *r.reported_percent) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "computed %.3f%% (%.2f%% rounded) differs from the "
                    "published %.2f%%",
                    r.percent_of_base, round_to(r.percent_of_base, 2),
                    *r.reported_percent);
      r.notes.emplace_back(buf);
    }
  }
  return r;
}

// ------------------------------------------------------------ serialization

inline json dims_to_json(const ModelDims &d) {
  return {{"n_layers", d.n_layers},
          {"n_heads", d.n_heads},
          {"head_dim", d.head_dim},
          {"model_dim", d.model_dim()},
          {"base_param_total", d.base_param_total}};
}

namespace detail {

inline void reject_unknown_keys(const json &j,
                                std::initializer_list<std::string_view> allowed,
                                const std::string &path) {
  for (const auto &[key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(path + key + ": unknown key");
}

inline std::uint64_t read_count(const json &j, const std::string &key,
                                const std::string &path, bool allow_zero) {
  if (!j.contains(key))
    throw ConfigError(path + "." + key + ": missing");
  const auto &v = j.at(key);
  if (!v.is_number_integer())
    throw ConfigError(path + "." + key + ": expected an integer");
  if (v.get<std::int64_t>() < 0)
    throw ConfigError(path + "." + key + ": negative value " + v.dump());
  const auto n = v.get<std::uint64_t>();
  if (!allow_zero && n == 0)
    throw ConfigError(path + "." + key + ": must be positive");
  return n;
}

} // namespace detail

/// Dims from a preset name ("gpt2-small", "toy") or a JSON object.
inline ModelDims dims_from_json(const json &j, const std::string &path = "dims") {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "gpt2-small")
      return ModelDims::gpt2_small();
    if (s == "toy")
      return ModelDims::toy();
    throw ConfigError(path + ": unknown dims preset '" + s +
                      "' (expected gpt2-small or toy)");
  }
  if (!j.is_object())
    throw ConfigError(path + ": expected a preset name or an object");
  detail::reject_unknown_keys(
      j, {"n_layers", "n_heads", "head_dim", "model_dim", "base_param_total"},
      path + ".");
  ModelDims d;
  d.n_layers = detail::read_count(j, "n_layers", path, false);
  d.n_heads = detail::read_count(j, "n_heads", path, false);
  d.head_dim = detail::read_count(j, "head_dim", path, false);
  if (j.contains("model_dim") &&
      detail::read_count(j, "model_dim", path, false) != d.model_dim())
    throw ConfigError(path + ".model_dim: must equal n_heads * head_dim = " +
                      std::to_string(d.model_dim()));
  if (j.contains("base_param_total"))
    d.base_param_total = detail::read_count(j, "base_param_total", path, false);
  else
    d.base_param_total =
        ModelDims::attention_only(d.n_layers, d.n_heads, d.head_dim)
            .base_param_total;
  return d;
}

/// Parses "gpt2-small", "toy" or "layers=2,heads=4,head_dim=8[,base=N]".
inline ModelDims parse_dims_arg(const std::string &arg) {
  if (arg == "gpt2-small" || arg == "toy")
    return dims_from_json(json(arg));
  json j = json::object();
  std::size_t pos = 0;
  while (pos < arg.size()) {
    auto comma = arg.find(',', pos);
    if (comma == std::string::npos)
      comma = arg.size();
    const auto item = arg.substr(pos, comma - pos);
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw ConfigError("dims: expected key=value, got '" + item + "'");
    auto key = item.substr(0, eq);
    const auto val = item.substr(eq + 1);
    if (key == "layers" || key == "L") key = "n_layers";
    if (key == "heads") key = "n_heads";
    if (key == "p") key = "head_dim";
    if (key == "base") key = "base_param_total";
    try {
      std::size_t used = 0;
      const long long n = std::stoll(val, &used);
      if (used != val.size())
        throw std::invalid_argument(val);
      j[key] = n;
    } catch (const std::logic_error &) {
      throw ConfigError("dims." + key + ": not an integer '" + val + "'");
    }
    pos = comma + 1;
  }
  return dims_from_json(j);
}

inline json scheme_to_json(const AdapterScheme &s) {
  return {{"kind", to_string(s.kind)},
          {"rank_shared", s.rank_shared},
          {"rank_head", s.rank_head},
          {"include_bias", s.include_bias}};
}

inline AdapterScheme scheme_from_json(const json &j, const std::string &path,
                                      bool default_bias) {
  if (!j.is_object())
    throw ConfigError(path + ": expected an object");
  detail::reject_unknown_keys(
      j, {"kind", "rank_shared", "rank_head", "rank", "include_bias"}, path + ".");
  if (!j.contains("kind") || !j.at("kind").is_string())
    throw ConfigError(path + ".kind: missing or not a string");
  AdapterScheme s;
  try {
    s.kind = parse_scheme_kind(j.at("kind").get<std::string>());
  } catch (const ConfigError &e) {
    throw ConfigError(path + ".kind: " + e.what());
  }
  s.rank_shared = j.contains("rank_shared")
                      ? detail::read_count(j, "rank_shared", path, true)
                      : 0;
  s.rank_head =
      j.contains("rank_head") ? detail::read_count(j, "rank_head", path, true) : 0;
  // "rank" is shorthand for whichever rank the kind uses.
  if (j.contains("rank")) {
    const auto r = detail::read_count(j, "rank", path, true);
    if (uses_shared(s.kind) && !uses_head(s.kind))
      s.rank_shared = r;
    else if (!uses_shared(s.kind))
      s.rank_head = r;
    else
      throw ConfigError(path + ".rank: ambiguous for " +
                        std::string(to_string(s.kind)) +
                        "; give rank_shared and rank_head");
  }
  s.include_bias = default_bias;
  if (j.contains("include_bias")) {
    if (!j.at("include_bias").is_boolean())
      throw ConfigError(path + ".include_bias: expected a boolean");
    s.include_bias = j.at("include_bias").get<bool>();
  }
  return s;
}

inline json plan_to_json(const BudgetPlan &plan) {
  json targets = json::object();
  for (Target t : kAllTargets)
    if (plan.scheme(t))
      targets[to_string(t)] = scheme_to_json(*plan.scheme(t));
  json j{{"name", plan.name},
         {"dims", dims_to_json(plan.dims)},
         {"include_bias", plan.include_bias},
         {"targets", targets}};
  if (!plan.overrides.empty()) {
    json arr = json::array();
    for (const auto &o : plan.overrides)
      arr.push_back({{"layer", o.layer},
                     {"target", to_string(o.target)},
                     {"scheme", o.scheme ? scheme_to_json(*o.scheme) : json()}});
    j["layer_overrides"] = arr;
  }
  return j;
}

/// Validated plan from a configuration document. `fallback_dims` is used
/// when the document has no "dims" entry.
inline BudgetPlan custom_plan(const json &j,
                              std::optional<ModelDims> fallback_dims = {}) {
  if (!j.is_object())
    throw ConfigError("plan: expected a JSON object");
  detail::reject_unknown_keys(
      j, {"name", "dims", "include_bias", "targets", "layer_overrides"}, "");
  BudgetPlan plan;
  plan.name = j.value("name", std::string("custom"));
  if (j.contains("dims"))
    plan.dims = dims_from_json(j.at("dims"), "dims");
  else if (fallback_dims)
    plan.dims = *fallback_dims;
  else
    throw ConfigError("dims: missing");
  if (j.contains("include_bias")) {
    if (!j.at("include_bias").is_boolean())
      throw ConfigError("include_bias: expected a boolean");
    plan.include_bias = j.at("include_bias").get<bool>();
  }
  if (!j.contains("targets") || !j.at("targets").is_object())
    throw ConfigError("targets: missing or not an object");
  for (const auto &[key, val] : j.at("targets").items()) {
    Target t;
    try {
      t = parse_target(key);
    } catch (const ConfigError &e) {
      throw ConfigError("targets." + key + ": " + e.what());
    }
    const std::string path = std::string("targets.") + to_string(t);
    if (val.is_null())
      continue;
    auto s = scheme_from_json(val, path, plan.include_bias);
    try {
      s.validate(&plan.dims);
    } catch (const ConfigError &e) {
      throw ConfigError(path + ": " + e.what());
    }
    plan.scheme(t) = s;
  }
  if (j.contains("layer_overrides")) {
    const auto &arr = j.at("layer_overrides");
    if (!arr.is_array())
      throw ConfigError("layer_overrides: expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string path = "layer_overrides[" + std::to_string(i) + "]";
      if (!arr[i].is_object())
        throw ConfigError(path + ": expected an object");
      detail::reject_unknown_keys(arr[i], {"layer", "target", "scheme"}, path + ".");
      LayerOverride o;
      o.layer = detail::read_count(arr[i], "layer", path, true);
      if (!arr[i].contains("target") || !arr[i].at("target").is_string())
        throw ConfigError(path + ".target: missing");
      try {
        o.target = parse_target(arr[i].at("target").get<std::string>());
      } catch (const ConfigError &e) {
        throw ConfigError(path + ".target: " + e.what());
      }
      if (arr[i].contains("scheme") && !arr[i].at("scheme").is_null()) {
        o.scheme = scheme_from_json(arr[i].at("scheme"), path + ".scheme",
                                    plan.include_bias);
        try {
          o.scheme->validate(&plan.dims);
        } catch (const ConfigError &e) {
          throw ConfigError(path + ".scheme: " + e.what());
        }
      }
      plan.overrides.push_back(o);
    }
  }
  plan.validate();
  return plan;
}

inline json report_to_json(const BudgetReport &r) {
  json breakdown = json::object();
  for (const auto &[t, n] : r.per_target_breakdown)
    breakdown[to_string(t)] = n;
  json j{{"plan", r.plan_name},
         {"params_per_layer", r.params_per_layer},
         {"params_total", r.params_total},
         {"percent_of_base", r.percent_of_base},
         {"per_target_breakdown", breakdown},
         {"ratio_q_v_o", r.ratio_q_v_o},
         {"notes", r.notes}};
  j["reported_percent"] =
      r.reported_percent ? json(*r.reported_percent) : json();
  return j;
}

} // namespace kwadapt
