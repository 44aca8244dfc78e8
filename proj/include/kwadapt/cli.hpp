// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cli.hpp
 * @brief  The kwadapt command line: plan, verify, train, compare, inspect.
 *
 * Exit codes: 0 success, 1 verification failure, 2 usage/config error,
 * 3 numerical divergence.
 */
#pragma once

#include "io.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <ostream>

namespace kwadapt::cli {

inline constexpr const char *kToolVersion = "0.3.0";

enum ExitCode : int {
  kOk = 0,
  kVerifyFailed = 1,
  kUsage = 2,
  kDiverged = 3,
};

inline std::string with_commas(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3)
    s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

inline std::string percent_str(double pct) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f%%", pct);
  return buf;
}

/// ISO-8601 UTC; honours SOURCE_DATE_EPOCH for reproducible manifests.
inline std::string timestamp_now() {
  std::time_t t = std::time(nullptr);
  if (const char *sde = std::getenv("SOURCE_DATE_EPOCH"))
    t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::filesystem::path default_out_dir() {
  if (const char *env = std::getenv("KWADAPT_OUT_DIR"))
    return env;
  return "kwadapt-out";
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config_paths = json::object();
  json seeds = json::object();
  std::vector<std::string> outputs;

  json to_json() const {
    return {{"command", command},
            {"argv", argv},
            {"config_paths", config_paths},
            {"seeds", seeds},
            {"tool_version", kToolVersion},
            {"timestamp", timestamp_now()},
            {"outputs", outputs}};
  }
};

inline void print_plan_table(std::ostream &out, const BudgetPlan &plan,
                             const BudgetReport &rep) {
  const auto &d = plan.dims;
  out << "plan " << plan.name << "  (L=" << d.n_layers << " N_h=" << d.n_heads
      << " p=" << d.head_dim << " d=" << d.model_dim()
      << ", base " << with_commas(d.base_param_total) << ")\n";
  out << std::left << std::setw(8) << "target" << std::setw(16) << "scheme"
      << std::setw(10) << "r_shared" << std::setw(8) << "r_head"
      << std::setw(6) << "bias" << std::right << std::setw(14)
      << "params/layer" << std::setw(10) << "percent" << "\n";
  for (Target t : kAllTargets) {
    const auto &s = plan.scheme(t);
    if (!s)
      continue;
    const auto n = rep.per_target_breakdown.at(t);
    const double pct = 100.0 * static_cast<double>(n * d.n_layers) /
                       static_cast<double>(d.base_param_total);
    out << std::left << std::setw(8) << to_string(t) << std::setw(16)
        << to_string(s->kind) << std::setw(10) << s->rank_shared
        << std::setw(8) << s->rank_head << std::setw(6)
        << (s->include_bias ? "yes" : "no") << std::right << std::setw(14)
        << with_commas(n) << std::setw(10) << percent_str(pct) << "\n";
  }
  out << "total " << with_commas(rep.params_total) << " params, "
      << percent_str(rep.percent_of_base) << " of base";
  if (rep.reported_percent) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", *rep.reported_percent);
    out << " (published " << buf << ")";
  }
  out << "\n";
  char ratio[96];
  std::snprintf(ratio, sizeof ratio, "Q:V:O factor ratio %.3g:%.3g:%.3g\n",
                rep.ratio_q_v_o[0], rep.ratio_q_v_o[1], rep.ratio_q_v_o[2]);
  out << ratio;
  for (const auto &n : rep.notes)
    out << "note: " << n << "\n";
}

/// Preset name, or a path to a plan JSON document.
inline BudgetPlan resolve_plan(const std::string &spec, const ModelDims &dims) {
  if (std::filesystem::is_regular_file(spec))
    return custom_plan(read_json_file(spec), dims);
  return builtin_plan(spec, dims);
}

inline ToyTask load_task(const std::string &path) {
  if (path.empty())
    return ToyTask{};
  return task_from_json(read_json_file(path));
}

inline TrainConfig load_train_config(const std::string &path) {
  if (path.empty())
    return TrainConfig{};
  return train_config_from_json(read_json_file(path));
}

inline int cmd_plan(const std::string &preset, const std::string &config,
                    const std::string &dims_arg, const std::string &out_path,
                    std::ostream &out) {
  if (preset.empty() == config.empty())
    throw ConfigError("plan: give exactly one of --preset or --config");
  const ModelDims dims = parse_dims_arg(dims_arg);
  const BudgetPlan plan = preset.empty()
                              ? custom_plan(read_json_file(config), dims)
                              : builtin_plan(preset, dims);
  const auto rep = report(plan);
  print_plan_table(out, plan, rep);
  if (!out_path.empty()) {
    write_json_file(out_path,
                    {{"plan", plan_to_json(plan)}, {"report", report_to_json(rep)}});
    out << "wrote " << out_path << "\n";
  }
  return kOk;
}

inline int cmd_verify(const std::string &suite, std::size_t trials,
                      std::uint64_t seed, const std::string &dims_arg,
                      const std::string &json_path, std::ostream &out) {
  static const std::vector<std::string> suites{"kernel", "rewrite", "merge",
                                               "grad", "rank"};
  if (suite != "all" &&
      std::find(suites.begin(), suites.end(), suite) == suites.end())
    throw ConfigError("verify: unknown suite '" + suite +
                      "' (expected kernel, rewrite, merge, grad, rank or all)");
  if (trials == 0)
    throw ConfigError("verify: --trials must be >= 1");
  const ModelDims dims = parse_dims_arg(dims_arg);
  std::vector<VerifyReport> reports;
  auto want = [&](const char *s) { return suite == "all" || suite == s; };
  if (want("kernel")) {
    reports.push_back(verify_kernel_equivalence(dims, trials, seed));
    auto rect = verify_kernel_equivalence(dims, trials, seed + 1, {3, 7});
    rect.suite = "kernel-rectangular";
    reports.push_back(rect);
  }
  if (want("rewrite"))
    reports.push_back(verify_rewrite_equivalence(dims, trials, seed));
  if (want("merge"))
    reports.push_back(verify_merge_equivalence(dims, trials, seed));
  if (want("grad"))
    reports.push_back(verify_gradients(dims, seed));
  if (want("rank"))
    reports.push_back(verify_rank_structure(dims, trials, seed));

  bool ok = true;
  json arr = json::array();
  for (const auto &r : reports) {
    ok = ok && r.passed;
    char line[200];
    std::snprintf(line, sizeof line,
                  "%-20s %s  trials=%zu checks=%zu worst=%.3e tol=%.1e\n",
                  r.suite.c_str(), r.passed ? "PASS" : "FAIL", r.trials,
                  r.checks, r.worst, r.tolerance);
    out << line;
    if (!r.passed)
      out << "  failing case: " << r.failing_case.dump() << "\n";
    arr.push_back(verify_report_to_json(r));
  }
  if (!json_path.empty())
    write_json_file(json_path, {{"suite", suite},
                                {"seed", seed},
                                {"trials", trials},
                                {"dims", dims_to_json(dims)},
                                {"passed", ok},
                                {"reports", arr}});
  return ok ? kOk : kVerifyFailed;
}

inline int cmd_train(const std::string &task_path, const std::string &plan_spec,
                     const std::string &cfg_path,
                     const std::filesystem::path &out_dir,
                     const std::vector<std::string> &argv, std::ostream &out) {
  const ToyTask task = load_task(task_path);
  const TrainConfig cfg = load_train_config(cfg_path);
  const BudgetPlan plan = resolve_plan(plan_spec, task.dims);
  const auto inst = make_task(task);
  auto run = train_plan(inst, plan, cfg);

  std::filesystem::create_directories(out_dir);
  Manifest man;
  man.command = "train";
  man.argv = argv;
  man.config_paths = {{"task", task_path}, {"plan", plan_spec},
                      {"train_config", cfg_path}};
  man.seeds = {{"base_seed", task.base_seed}, {"train_seed", cfg.seed}};

  json log = train_log_to_json(run.log);
  log["plan"] = plan.name;
  log["task"] = task_to_json(task);
  log["train_config"] = train_config_to_json(cfg);
  write_json_file(out_dir / "train_log.json", log);
  write_file(out_dir / "loss.csv", loss_csv(run.log));
  auto ck = checkpoint_of(run.model, false);
  ck.lineage = {{"plan", plan.name},
                {"base_seed", task.base_seed},
                {"train_seed", cfg.seed}};
  save_checkpoint(out_dir / "adapters.ckpt", ck);
  write_json_file(out_dir / "plan.json", {{"plan", plan_to_json(plan)},
                                          {"report", report_to_json(report(plan))}});
  man.outputs = {"train_log.json", "loss.csv", "adapters.ckpt", "plan.json"};
  write_json_file(out_dir / "manifest.json", man.to_json());

  out << "plan " << plan.name << ": " << with_commas(run.log.trainable_param_count)
      << " trainable params, loss " << format_double(run.log.initial_loss)
      << " -> " << format_double(run.log.final_loss) << " after "
      << run.log.losses.size() << " steps\n";
  out << "wrote " << out_dir.string() << "\n";
  return kOk;
}

inline std::vector<std::string> split_list(const std::vector<std::string> &items) {
  std::vector<std::string> out;
  for (const auto &item : items) {
    std::size_t pos = 0;
    while (pos <= item.size()) {
      auto comma = item.find(',', pos);
      if (comma == std::string::npos)
        comma = item.size();
      if (comma > pos)
        out.push_back(item.substr(pos, comma - pos));
      pos = comma + 1;
    }
  }
  return out;
}

inline int cmd_compare(const std::string &task_path,
                       const std::vector<std::string> &plan_specs,
                       const std::string &cfg_path,
                       const std::filesystem::path &out_dir,
                       const std::vector<std::string> &argv, std::ostream &out) {
  if (plan_specs.size() < 2)
    throw ConfigError("compare: needs at least 2 plans, got " +
                      std::to_string(plan_specs.size()));
  const ToyTask task = load_task(task_path);
  const TrainConfig cfg = load_train_config(cfg_path);
  std::vector<BudgetPlan> plans;
  for (const auto &s : plan_specs)
    plans.push_back(resolve_plan(s, task.dims));
  const auto rows = compare_schemes(task, plans, cfg);

  std::filesystem::create_directories(out_dir);
  write_file(out_dir / "comparison.csv", comparison_csv(rows));
  write_json_file(out_dir / "comparison.json",
                  {{"task", task_to_json(task)},
                   {"train_config", train_config_to_json(cfg)},
                   {"rows", comparison_to_json(rows)}});
  Manifest man;
  man.command = "compare";
  man.argv = argv;
  man.config_paths = {{"task", task_path}, {"plans", plan_specs},
                      {"train_config", cfg_path}};
  man.seeds = {{"base_seed", task.base_seed}, {"train_seed", cfg.seed}};
  man.outputs = {"comparison.csv", "comparison.json"};
  write_json_file(out_dir / "manifest.json", man.to_json());

  out << std::left << std::setw(30) << "plan" << std::right << std::setw(10)
      << "params" << std::setw(10) << "percent" << std::setw(14) << "initial"
      << std::setw(14) << "final" << "  rank Q/K/V/O\n";
  for (const auto &r : rows) {
    char buf[64];
    out << std::left << std::setw(30) << r.plan << std::right << std::setw(10)
        << r.params << std::setw(10) << percent_str(r.percent);
    std::snprintf(buf, sizeof buf, "%14.4e%14.4e", r.initial_loss, r.final_loss);
    out << buf << "  " << r.delta_rank[0] << "/" << r.delta_rank[1] << "/"
        << r.delta_rank[2] << "/" << r.delta_rank[3] << "\n";
  }
  out << "wrote " << out_dir.string() << "\n";
  return kOk;
}

inline int cmd_inspect(const std::string &path, std::ostream &out) {
  const auto ck = load_checkpoint(path);
  out << "checkpoint " << path << ": L=" << ck.dims.n_layers
      << " N_h=" << ck.dims.n_heads << " p=" << ck.dims.head_dim << "\n";
  for (const auto &[layer, st] : ck.adapters) {
    std::uint64_t n = 0;
    for (const auto &p : trainable_params(st))
      n += p->value.size();
    out << "  layer " << layer << " " << to_string(st.target) << " "
        << to_string(st.scheme.kind) << "(" << st.scheme.rank_shared << ","
        << st.scheme.rank_head << ") " << with_commas(n) << " params\n";
  }
  for (const auto &[layer, w] : ck.weights)
    out << "  layer " << layer << " attention weights\n";
  return kOk;
}

/// Parses argv and dispatches. Never throws; errors map to exit codes.
inline int run(int argc, const char *const *argv, std::ostream &out = std::cout,
               std::ostream &err = std::cerr) {
  CLI::App app{"Kernel-wise adapters for multi-head attention", "kwadapt"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  const std::vector<std::string> args(argv, argv + argc);

  std::string preset, config, dims = "gpt2-small", out_path;
  auto *plan = app.add_subcommand("plan", "Parameter budget of a plan");
  plan->add_option("--preset", preset, "Registered plan name");
  plan->add_option("--config", config, "Plan JSON document");
  plan->add_option("--dims", dims,
                   "gpt2-small, toy, or layers=L,heads=H,head_dim=P[,base=N]");
  plan->add_option("--out", out_path, "Write plan + report JSON here");

  std::string suite = "all", vdims = "toy", json_path;
  std::size_t trials = 100;
  std::uint64_t seed = 7;
  auto *verify = app.add_subcommand("verify", "Run numerical verification suites");
  verify->add_option("--suite", suite, "kernel|rewrite|merge|grad|rank|all");
  verify->add_option("--trials", trials, "Random trials per suite");
  verify->add_option("--seed", seed, "Seed");
  verify->add_option("--dims", vdims, "Dims preset or fields");
  verify->add_option("--json", json_path, "Write JSON report here");

  std::string task_path, plan_spec, cfg_path, out_dir;
  std::vector<std::string> plan_list;
  auto *train = app.add_subcommand("train", "Train one plan on a toy task");
  train->add_option("--task", task_path, "Task JSON (default task if omitted)");
  train->add_option("--plan", plan_spec, "Preset name or plan JSON")->required();
  train->add_option("--train-config", cfg_path, "Train config JSON");
  train->add_option("--out", out_dir, "Output directory");

  auto *compare = app.add_subcommand("compare", "Train several plans side by side");
  compare->add_option("--task", task_path, "Task JSON");
  compare->add_option("--plans", plan_list, "Presets or plan JSON paths")
      ->required();
  compare->add_option("--train-config", cfg_path, "Train config JSON");
  compare->add_option("--out", out_dir, "Output directory");

  std::string ckpt;
  auto *inspect = app.add_subcommand("inspect", "Validate and summarize a checkpoint");
  inspect->add_option("checkpoint", ckpt, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  const std::filesystem::path odir =
      out_dir.empty() ? default_out_dir() : std::filesystem::path(out_dir);
  try {
    if (*plan)
      return cmd_plan(preset, config, dims, out_path, out);
    if (*verify)
      return cmd_verify(suite, trials, seed, vdims, json_path, out);
    if (*train)
      return cmd_train(task_path, plan_spec, cfg_path, odir, args, out);
    if (*compare)
      return cmd_compare(task_path, split_list(plan_list), cfg_path, odir, args,
                         out);
    if (*inspect)
      return cmd_inspect(ckpt, out);
  } catch (const DivergenceError &e) {
    err << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

} // namespace kwadapt::cli
