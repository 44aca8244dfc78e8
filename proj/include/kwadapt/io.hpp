// SPDX-License-Identifier: Apache-2.0
/**
 * @file   io.hpp
 * @brief  JSON documents (tasks, train configs, logs), CSV series and the
 *         binary checkpoint format.
 *
 * Checkpoint layout:
 *
 *   bytes 0..7   magic "KWADCKPT"
 *   bytes 8..15  header length H, unsigned 64-bit little-endian
 *   next H bytes UTF-8 JSON header
 *   remainder    IEEE-754 float64 little-endian entries, row-major, one
 *                matrix after another in header declaration order
 *
 * The header lists entries; each entry names its matrices with shapes:
 *
 *   {"format": "kwadapt-checkpoint", "version": 1, "dims": {...},
 *    "entries": [
 *      {"kind": "adapter", "layer": 0, "target": "Q", "seed": 42,
 *       "scheme": {...}, "matrices": [{"name": "shared_B", "rows": 32, "cols": 4}, ...]},
 *      {"kind": "attention", "layer": 0, "matrices": [{"name": "W_q", ...}, ...]}]}
 */
#pragma once

#include "analysis.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string_view>
#include <type_traits>

namespace kwadapt {

// ---------------------------------------------------------------- files

inline std::string read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path &path, std::string_view bytes) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw FormatError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw FormatError("short write to '" + path.string() + "'");
}

inline json read_json_file(const std::filesystem::path &path) {
  const auto text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error &e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path &path, const json &j) {
  write_file(path, j.dump(2) + "\n");
}

/// %.17g, enough digits to round-trip a double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// -------------------------------------------------------- task and config

namespace detail {

template <typename T>
T read_number(const json &j, const char *key, T fallback,
              const std::string &path) {
  if (!j.contains(key))
    return fallback;
  const auto &v = j.at(key);
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number())
      throw ConfigError(path + key + ": expected a number");
    return v.get<T>();
  } else {
    if (!v.is_number_unsigned())
      throw ConfigError(path + key + ": expected a non-negative integer");
    return v.get<T>();
  }
}

} // namespace detail

inline ToyTask task_from_json(const json &j) {
  if (!j.is_object())
    throw ConfigError("task: expected a JSON object");
  detail::reject_unknown_keys(j,
                              {"dims", "seq_len", "base_seed", "teacher_kind",
                               "teacher_rank", "teacher_scale", "dataset_size",
                               "targets", "key_aligned"},
                              "task.");
  ToyTask t;
  if (j.contains("dims"))
    t.dims = dims_from_json(j.at("dims"), "task.dims");
  t.seq_len = detail::read_number(j, "seq_len", t.seq_len, "task.");
  t.base_seed = detail::read_number(j, "base_seed", t.base_seed, "task.");
  if (j.contains("teacher_kind")) {
    if (!j.at("teacher_kind").is_string())
      throw ConfigError("task.teacher_kind: expected a string");
    t.teacher_kind = parse_teacher_kind(j.at("teacher_kind").get<std::string>());
  }
  t.teacher_rank = detail::read_number(j, "teacher_rank", t.teacher_rank, "task.");
  t.teacher_scale =
      detail::read_number(j, "teacher_scale", t.teacher_scale, "task.");
  t.dataset_size =
      detail::read_number(j, "dataset_size", t.dataset_size, "task.");
  if (j.contains("targets")) {
    if (!j.at("targets").is_array())
      throw ConfigError("task.targets: expected an array");
    t.targets.clear();
    for (const auto &v : j.at("targets")) {
      if (!v.is_string())
        throw ConfigError("task.targets: expected target names");
      t.targets.push_back(parse_target(v.get<std::string>()));
    }
  }
  if (j.contains("key_aligned")) {
    if (!j.at("key_aligned").is_boolean())
      throw ConfigError("task.key_aligned: expected a boolean");
    t.key_aligned = j.at("key_aligned").get<bool>();
  }
  try {
    t.validate();
  } catch (const ConfigError &e) {
    throw ConfigError(std::string("task.") + e.what());
  }
  return t;
}

inline json task_to_json(const ToyTask &t) {
  std::vector<std::string> targets;
  for (Target x : t.targets)
    targets.emplace_back(to_string(x));
  return {{"dims", dims_to_json(t.dims)},
          {"seq_len", t.seq_len},
          {"base_seed", t.base_seed},
          {"teacher_kind", to_string(t.teacher_kind)},
          {"teacher_rank", t.teacher_rank},
          {"teacher_scale", t.teacher_scale},
          {"dataset_size", t.dataset_size},
          {"targets", targets},
          {"key_aligned", t.key_aligned}};
}

inline TrainConfig train_config_from_json(const json &j) {
  if (!j.is_object())
    throw ConfigError("train_config: expected a JSON object");
  const std::string p = "train_config.";
  detail::reject_unknown_keys(j,
                              {"learning_rate", "batch_size", "warmup_steps",
                               "total_steps", "weight_decay", "adam_beta1",
                               "adam_beta2", "adam_eps", "seed", "lite_fast_path"},
                              p);
  TrainConfig c;
  c.learning_rate = detail::read_number(j, "learning_rate", c.learning_rate, p);
  c.batch_size = detail::read_number(j, "batch_size", c.batch_size, p);
  c.warmup_steps = detail::read_number(j, "warmup_steps", c.warmup_steps, p);
  c.total_steps = detail::read_number(j, "total_steps", c.total_steps, p);
  c.weight_decay = detail::read_number(j, "weight_decay", c.weight_decay, p);
  c.adam_beta1 = detail::read_number(j, "adam_beta1", c.adam_beta1, p);
  c.adam_beta2 = detail::read_number(j, "adam_beta2", c.adam_beta2, p);
  c.adam_eps = detail::read_number(j, "adam_eps", c.adam_eps, p);
  c.seed = detail::read_number(j, "seed", c.seed, p);
  if (j.contains("lite_fast_path")) {
    if (!j.at("lite_fast_path").is_boolean())
      throw ConfigError(p + "lite_fast_path: expected a boolean");
    c.lite_fast_path = j.at("lite_fast_path").get<bool>();
  }
  try {
    c.validate();
  } catch (const ConfigError &e) {
    throw ConfigError(p + e.what());
  }
  return c;
}

inline json train_config_to_json(const TrainConfig &c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"warmup_steps", c.warmup_steps},   {"total_steps", c.total_steps},
          {"weight_decay", c.weight_decay},   {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},       {"adam_eps", c.adam_eps},
          {"seed", c.seed},                   {"lite_fast_path", c.lite_fast_path}};
}

inline json train_log_to_json(const TrainLog &log) {
  return {{"steps", log.losses.size()},
          {"initial_loss", log.initial_loss},
          {"final_loss", log.final_loss},
          {"base_checksum_before", log.base_checksum_before},
          {"base_checksum_after", log.base_checksum_after},
          {"trainable_param_count", log.trainable_param_count},
          {"losses", log.losses},
          {"learning_rates", log.learning_rates}};
}

inline std::string loss_csv(const TrainLog &log) {
  std::string out = "step,loss,lr\n";
  for (std::size_t i = 0; i < log.losses.size(); ++i)
    out += std::to_string(i + 1) + "," + format_double(log.losses[i]) + "," +
           format_double(log.learning_rates[i]) + "\n";
  return out;
}

inline std::string comparison_csv(const std::vector<ComparisonRow> &rows) {
  std::string out =
      "plan,params,percent,initial_loss,final_loss,rank_q,rank_k,rank_v,rank_o\n";
  for (const auto &r : rows) {
    out += r.plan + "," + std::to_string(r.params) + "," +
           format_double(r.percent) + "," + format_double(r.initial_loss) +
           "," + format_double(r.final_loss);
    for (auto k : r.delta_rank)
      out += "," + std::to_string(k);
    out += "\n";
  }
  return out;
}

inline json comparison_to_json(const std::vector<ComparisonRow> &rows) {
  json arr = json::array();
  for (const auto &r : rows) {
    json ranks = json::object();
    for (Target t : kAllTargets)
      ranks[to_string(t)] = r.delta_rank[static_cast<std::size_t>(t)];
    arr.push_back({{"plan", r.plan},
                   {"params", r.params},
                   {"percent", r.percent},
                   {"initial_loss", r.initial_loss},
                   {"final_loss", r.final_loss},
                   {"delta_rank", ranks}});
  }
  return arr;
}

// ------------------------------------------------------------- checkpoints

struct Checkpoint {
  ModelDims dims;
  std::vector<std::pair<std::size_t, AdapterState>> adapters; ///< (layer, state)
  std::vector<std::pair<std::size_t, AttentionWeights>> weights;
  json lineage = json::object(); ///< free-form provenance (seeds, plan name)
};

inline constexpr std::string_view kCheckpointMagic = "KWADCKPT";

namespace detail {

inline void put_u64_le(std::string &out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i]))
         << (8 * i);
  return v;
}

inline const std::array<const char *, 8> &attention_matrix_names() {
  static const std::array<const char *, 8> names{"W_q", "W_k", "W_v", "W_o",
                                                 "b_q", "b_k", "b_v", "b_o"};
  return names;
}

inline std::array<const Matrix *, 8> attention_matrices(const AttentionWeights &w) {
  return {&w.w_q, &w.w_k, &w.w_v, &w.w_o, &w.b_q, &w.b_k, &w.b_v, &w.b_o};
}

inline json shape_entry(const std::string &name, const Matrix &m) {
  return {{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}};
}

} // namespace detail

inline std::string encode_checkpoint(const Checkpoint &ck) {
  json entries = json::array();
  std::vector<const Matrix *> payload;
  for (const auto &[layer, st] : ck.adapters) {
    json mats = json::array();
    const auto params = trainable_params(st);
    const auto names = trainable_param_names(st);
    for (std::size_t i = 0; i < params.size(); ++i) {
      mats.push_back(detail::shape_entry(names[i], params[i]->value));
      payload.push_back(&params[i]->value);
    }
    entries.push_back({{"kind", "adapter"},
                       {"layer", layer},
                       {"target", to_string(st.target)},
                       {"seed", st.seed},
                       {"scheme", scheme_to_json(st.scheme)},
                       {"matrices", mats}});
  }
  for (const auto &[layer, w] : ck.weights) {
    json mats = json::array();
    const auto ms = detail::attention_matrices(w);
    for (std::size_t i = 0; i < ms.size(); ++i) {
      mats.push_back(
          detail::shape_entry(detail::attention_matrix_names()[i], *ms[i]));
      payload.push_back(ms[i]);
    }
    entries.push_back({{"kind", "attention"}, {"layer", layer}, {"matrices", mats}});
  }
  const json header{{"format", "kwadapt-checkpoint"},
                    {"version", 1},
                    {"dims", dims_to_json(ck.dims)},
                    {"lineage", ck.lineage},
                    {"entries", entries}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic);
  detail::put_u64_le(out, h.size());
  out += h;
  for (const Matrix *m : payload)
    for (double v : m->data())
      detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

namespace detail {

inline Checkpoint decode_checkpoint_unchecked(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kCheckpointMagic)
    throw FormatError("checkpoint: bad magic or file too short");
  const std::uint64_t hlen = detail::get_u64_le(bytes, 8);
  if (hlen > bytes.size() - 16)
    throw FormatError("checkpoint: header length " + std::to_string(hlen) +
                      " exceeds file size");
  json header;
  try {
    header = json::parse(bytes.substr(16, hlen));
  } catch (const json::parse_error &e) {
    throw FormatError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  if (header.value("format", "") != "kwadapt-checkpoint" ||
      header.value("version", 0) != 1)
    throw FormatError("checkpoint: unsupported format/version");

  Checkpoint ck;
  try {
    ck.dims = dims_from_json(header.at("dims"), "checkpoint.dims");
  } catch (const std::exception &e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  ck.lineage = header.value("lineage", json::object());

  std::size_t offset = 16 + hlen;
  auto read_matrix = [&](const json &spec, std::size_t exp_rows,
                         std::size_t exp_cols, const std::string &where) {
    const auto name = spec.value("name", std::string("?"));
    const auto rows = spec.value("rows", std::size_t{0});
    const auto cols = spec.value("cols", std::size_t{0});
    if (rows != exp_rows || cols != exp_cols)
      throw FormatError("checkpoint: " + where + " " + name + ": expected " +
                        std::to_string(exp_rows) + "x" +
                        std::to_string(exp_cols) + ", found " +
                        std::to_string(rows) + "x" + std::to_string(cols));
    const std::size_t need = rows * cols * 8;
    if (bytes.size() - offset < need)
      throw FormatError("checkpoint: truncated payload at " + where + " " +
                        name + ": needs " + std::to_string(need) +
                        " bytes, " + std::to_string(bytes.size() - offset) +
                        " remain");
    std::vector<double> data(rows * cols);
    for (auto &v : data) {
      v = std::bit_cast<double>(detail::get_u64_le(bytes, offset));
      offset += 8;
    }
    return Matrix(rows, cols, std::move(data));
  };

  const auto &entries = header.value("entries", json::array());
  for (std::size_t e = 0; e < entries.size(); ++e) {
    const auto &ent = entries[e];
    const std::string kind = ent.value("kind", "");
    const std::size_t layer = ent.value("layer", std::size_t{0});
    const auto &mats = ent.value("matrices", json::array());
    if (layer >= ck.dims.n_layers)
      throw FormatError("checkpoint: entries[" + std::to_string(e) +
                        "].layer out of range");
    if (kind == "adapter") {
      AdapterScheme scheme;
      Target target;
      try {
        scheme = scheme_from_json(ent.at("scheme"), "scheme", true);
        scheme.validate(&ck.dims);
        target = parse_target(ent.at("target").get<std::string>());
      } catch (const std::exception &ex) {
        throw FormatError("checkpoint: entries[" + std::to_string(e) +
                          "]: " + ex.what());
      }
      const auto shapes = expected_factor_shapes(scheme, ck.dims);
      const std::string where =
          "layer " + std::to_string(layer) + " " + to_string(target);
      if (mats.size() != shapes.size())
        throw FormatError("checkpoint: " + where + ": " +
                          std::to_string(mats.size()) + " matrices, scheme " +
                          to_string(scheme.kind) + " needs " +
                          std::to_string(shapes.size()));
      std::vector<Matrix> factors;
      for (std::size_t i = 0; i < shapes.size(); ++i)
        factors.push_back(
            read_matrix(mats[i], shapes[i].first, shapes[i].second, where));
      ck.adapters.emplace_back(
          layer, assemble_adapter(scheme, target, ck.dims,
                                  ent.value("seed", std::uint64_t{0}),
                                  std::move(factors)));
    } else if (kind == "attention") {
      const std::size_t d = ck.dims.model_dim();
      if (mats.size() != 8)
        throw FormatError("checkpoint: attention entry needs 8 matrices");
      const std::string where = "layer " + std::to_string(layer) + " attention";
      AttentionWeights w;
      Matrix *dst[8] = {&w.w_q, &w.w_k, &w.w_v, &w.w_o,
                        &w.b_q, &w.b_k, &w.b_v, &w.b_o};
      for (std::size_t i = 0; i < 8; ++i)
        *dst[i] = read_matrix(mats[i], i < 4 ? d : 1, d, where);
      ck.weights.emplace_back(layer, std::move(w));
    } else {
      throw FormatError("checkpoint: entries[" + std::to_string(e) +
                        "].kind unknown '" + kind + "'");
    }
  }
  if (offset != bytes.size())
    throw FormatError("checkpoint: " + std::to_string(bytes.size() - offset) +
                      " trailing payload bytes");
  return ck;
}

} // namespace detail

/// Parses a checkpoint. Nothing is returned unless the whole file is valid.
inline Checkpoint decode_checkpoint(std::string_view bytes) {
  try {
    return detail::decode_checkpoint_unchecked(bytes);
  } catch (const json::exception &e) {
    throw FormatError(std::string("checkpoint: malformed header field: ") +
                      e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path &path,
                            const Checkpoint &ck) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  return decode_checkpoint(read_file(path));
}

inline Checkpoint checkpoint_of(const AdaptedModel &m, bool include_base) {
  Checkpoint ck;
  ck.dims = m.base->dims;
  for (std::size_t l = 0; l < m.adapters.size(); ++l)
    for (const auto &a : m.adapters[l])
      if (a)
        ck.adapters.emplace_back(l, a->clone());
  if (include_base)
    for (std::size_t l = 0; l < m.base->layers.size(); ++l)
      ck.weights.emplace_back(l, m.base->layers[l]);
  return ck;
}

} // namespace kwadapt
