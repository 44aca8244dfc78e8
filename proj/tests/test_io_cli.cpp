// SPDX-License-Identifier: Apache-2.0
#include "kwadapt/cli.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

using namespace kwadapt;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "kwadapt");
  std::vector<const char *> argv;
  for (const auto &a : args)
    argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string &name) {
  const auto p = fs::temp_directory_path() / ("kwadapt-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_json(const fs::path &dir, const std::string &name, const json &j) {
  const auto p = dir / name;
  write_json_file(p, j);
  return p.string();
}

json short_train_config(std::size_t steps) {
  return {{"total_steps", steps}, {"warmup_steps", steps / 4}};
}

} // namespace

TEST(Checkpoint, RoundTripEverySchemeBitwise) {
  const auto dims = ModelDims::toy();
  Checkpoint ck;
  ck.dims = dims;
  ck.lineage = {{"note", "round trip"}};
  std::uint64_t seed = 1;
  for (Target t : kAllTargets)
    for (const auto &s :
         {AdapterScheme::lora(3), AdapterScheme::kernel_wise(2, false),
          AdapterScheme::kernel_wise_lite(2), AdapterScheme::kernel_mix(2, 1),
          AdapterScheme::kernel_mix_lite(1, 3, false)}) {
      auto st = init_adapter(s, t, dims, seed);
      randomize_factors(st, ++seed);
      ck.adapters.emplace_back(seed % 2, std::move(st));
    }
  std::mt19937_64 rng(5);
  ck.weights.emplace_back(1, AttentionWeights::random(dims, rng));
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.dims, dims);
  EXPECT_EQ(back.lineage, ck.lineage);
  ASSERT_EQ(back.adapters.size(), ck.adapters.size());
  for (std::size_t i = 0; i < ck.adapters.size(); ++i) {
    const auto &[la, a] = ck.adapters[i];
    const auto &[lb, b] = back.adapters[i];
    EXPECT_EQ(la, lb);
    EXPECT_EQ(a.target, b.target);
    EXPECT_EQ(a.scheme, b.scheme);
    EXPECT_EQ(a.seed, b.seed);
    const auto pa = trainable_params(a), pb = trainable_params(b);
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k)
      EXPECT_TRUE(kwtest::bit_equal(pa[k]->value, pb[k]->value));
  }
  ASSERT_EQ(back.weights.size(), 1u);
  EXPECT_TRUE(kwtest::bit_equal(back.weights[0].second.w_o, ck.weights[0].second.w_o));
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, PayloadIsLittleEndianDoubles) {
  Checkpoint ck;
  ck.dims = ModelDims::attention_only(1, 1, 1);
  auto st = init_adapter(AdapterScheme::lora(1, false), Target::Q, ck.dims, 0);
  st.shared_B->value(0, 0) = 1.0;
  st.shared_A_heads[0]->value(0, 0) = -2.0;
  ck.adapters.emplace_back(0, st);
  const auto bytes = encode_checkpoint(ck);
  ASSERT_GE(bytes.size(), 16u);
  const std::string tail = bytes.substr(bytes.size() - 16);
  const unsigned char one[8] = {0, 0, 0, 0, 0, 0, 0xF0, 0x3F};
  const unsigned char minus_two[8] = {0, 0, 0, 0, 0, 0, 0, 0xC0};
  EXPECT_EQ(std::memcmp(tail.data(), one, 8), 0);
  EXPECT_EQ(std::memcmp(tail.data() + 8, minus_two, 8), 0);
}

TEST(Checkpoint, TruncatedPayloadRejected) {
  Checkpoint ck;
  ck.dims = ModelDims::toy();
  ck.adapters.emplace_back(0, init_adapter(AdapterScheme::kernel_wise(1),
                                           Target::V, ck.dims, 1));
  const auto bytes = encode_checkpoint(ck);
  EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 3)),
               FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
  EXPECT_THROW(decode_checkpoint("KWADCKP"), FormatError);
}

TEST(Checkpoint, ShapeConflictNamesMatrix) {
  Checkpoint ck;
  ck.dims = ModelDims::toy();
  ck.adapters.emplace_back(0, init_adapter(AdapterScheme::kernel_wise(1),
                                           Target::V, ck.dims, 1));
  const auto bytes = encode_checkpoint(ck);
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  json header = json::parse(bytes.substr(16, hlen));
  header["entries"][0]["matrices"][5]["rows"] = 2;
  const std::string h = header.dump();
  std::string forged = "KWADCKPT";
  for (int i = 0; i < 8; ++i)
    forged.push_back(static_cast<char>((h.size() >> (8 * i)) & 0xFF));
  forged += h + bytes.substr(16 + hlen);
  try {
    decode_checkpoint(forged);
    FAIL();
  } catch (const FormatError &e) {
    EXPECT_NE(std::string(e.what()).find("head_A[1]"), std::string::npos) << e.what();
  }
}

TEST(Json, TaskAndConfigRoundTrip) {
  ToyTask t;
  t.teacher_kind = TeacherKind::SharedLowRank;
  t.targets = {Target::Q, Target::O};
  t.teacher_scale = 0.25;
  const auto t2 = task_from_json(task_to_json(t));
  EXPECT_EQ(task_to_json(t2), task_to_json(t));
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.lite_fast_path = true;
  EXPECT_EQ(train_config_to_json(train_config_from_json(train_config_to_json(c))),
            train_config_to_json(c));
}

TEST(Json, UnknownKeysRejected) {
  EXPECT_THROW(task_from_json(json{{"teacher_scal", 0.5}}), ConfigError);
  EXPECT_THROW(train_config_from_json(json{{"lr", 0.5}}), ConfigError);
}

TEST(Cli, PlanPrintsTotals) {
  auto r = run_cli({"plan", "--preset", "lora-4", "--dims", "gpt2-small"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("165,888"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("0.133%"), std::string::npos) << r.out;
  r = run_cli({"plan", "--preset", "kernel-mix-qvo-intermediate"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("2,009,088"), std::string::npos);
  EXPECT_NE(r.out.find("1.615%"), std::string::npos);
}

TEST(Cli, PlanErrors) {
  EXPECT_EQ(run_cli({"plan", "--preset", "nope"}).code, 2);
  EXPECT_EQ(run_cli({"plan"}).code, 2);
  EXPECT_EQ(run_cli({"plan", "--preset", "lora-4", "--config", "x.json"}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({}).code, 2);
}

TEST(Cli, PlanConfigAndJsonOutput) {
  const auto dir = scratch("plan");
  const auto cfg = write_json(dir, "p.json",
                              json{{"name", "mine"},
                                   {"targets", {{"Q", {{"kind", "LoRA"}, {"rank", 4}}}}}});
  const auto out = (dir / "report.json").string();
  EXPECT_EQ(run_cli({"plan", "--config", cfg, "--out", out}).code, 0);
  const auto j = read_json_file(out);
  EXPECT_EQ(j.at("report").at("params_total"), 12 * (6144 + 768));
}

TEST(Cli, VerifySuites) {
  auto r = run_cli({"verify", "--suite", "kernel", "--trials", "100", "--seed", "7"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(run_cli({"verify", "--suite", "bogus"}).code, 2);
  EXPECT_EQ(run_cli({"verify", "--trials", "0"}).code, 2);
}

TEST(Cli, VerifyAllWritesJson) {
  const auto dir = scratch("verify");
  const auto out = (dir / "v.json").string();
  const auto r = run_cli({"verify", "--suite", "all", "--trials", "10", "--json", out});
  EXPECT_EQ(r.code, 0) << r.out;
  const auto j = read_json_file(out);
  EXPECT_TRUE(j.at("passed").get<bool>());
  EXPECT_EQ(j.at("reports").size(), 6u);
}

TEST(Cli, TrainWritesArtifacts) {
  const auto dir = scratch("train");
  const auto cfg = write_json(dir, "cfg.json", short_train_config(30));
  const auto out = dir / "run";
  const auto r = run_cli({"train", "--plan", "kernel-wise-mq", "--train-config", cfg,
                          "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char *f : {"train_log.json", "loss.csv", "adapters.ckpt", "manifest.json",
                        "plan.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto log = read_json_file(out / "train_log.json");
  EXPECT_EQ(log.at("losses").size(), 30u);
  EXPECT_EQ(log.at("base_checksum_before"), log.at("base_checksum_after"));
  const auto man = read_json_file(out / "manifest.json");
  EXPECT_EQ(man.at("command"), "train");
  EXPECT_EQ(man.at("seeds").at("train_seed"), 0);
  const auto ck = load_checkpoint(out / "adapters.ckpt");
  EXPECT_EQ(ck.adapters.size(), 4u);
  EXPECT_EQ(run_cli({"inspect", (out / "adapters.ckpt").string()}).code, 0);
}

TEST(Cli, TrainNullTask) {
  const auto dir = scratch("null");
  const auto task = write_json(dir, "task.json", json{{"teacher_scale", 0.0}});
  const auto cfg = write_json(dir, "cfg.json", short_train_config(100));
  const auto out = dir / "run";
  ASSERT_EQ(run_cli({"train", "--task", task, "--plan", "kernel-wise-mq",
                     "--train-config", cfg, "--out", out.string()})
                .code,
            0);
  EXPECT_LT(read_json_file(out / "train_log.json").at("final_loss").get<double>(), 1e-12);
}

TEST(Cli, TrainDefaultTaskKernelWise) {
  const auto dir = scratch("kw");
  const auto out = dir / "run";
  ASSERT_EQ(run_cli({"train", "--plan", "kernel-wise-mq", "--out", out.string()}).code, 0);
  const auto log = read_json_file(out / "train_log.json");
  EXPECT_LT(log.at("final_loss").get<double>(),
            0.05 * log.at("initial_loss").get<double>());
}

TEST(Cli, TrainRejectsOversizedLiteRank) {
  const auto dir = scratch("bad");
  const auto plan = write_json(
      dir, "bad.json",
      json{{"name", "bad"}, {"targets", {{"V", {{"kind", "KernelWiseLite"}, {"rank_head", 9}}}}}});
  const auto r = run_cli({"train", "--plan", plan, "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("targets.V"), std::string::npos) << r.err;
}

TEST(Cli, TrainDivergenceExitCode) {
  const auto dir = scratch("diverge");
  const auto cfg = write_json(dir, "cfg.json",
                              json{{"learning_rate", 1e200}, {"warmup_steps", 0},
                                   {"total_steps", 5}});
  const auto r = run_cli({"train", "--plan", "lora-4", "--train-config", cfg, "--out",
                          (dir / "o").string()});
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(Cli, OutputDirectoryFromEnvironment) {
  const auto dir = scratch("env");
  const auto cfg = write_json(dir, "cfg.json", short_train_config(4));
  ::setenv("KWADAPT_OUT_DIR", (dir / "envout").c_str(), 1);
  const auto r = run_cli({"train", "--plan", "lora-4", "--train-config", cfg});
  ::unsetenv("KWADAPT_OUT_DIR");
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(dir / "envout" / "manifest.json"));
}

TEST(Cli, CompareNeedsTwoPlans) {
  EXPECT_EQ(run_cli({"compare", "--plans", "lora-4"}).code, 2);
}

TEST(Cli, CompareMatchedBudgets) {
  const auto dir = scratch("cmp");
  const auto cfg = write_json(dir, "cfg.json", short_train_config(20));
  const auto out = dir / "o";
  ASSERT_EQ(run_cli({"compare", "--plans", "lora-4,kernel-wise-lite-qv-small",
                     "--train-config", cfg, "--out", out.string()})
                .code,
            0);
  const auto rows = read_json_file(out / "comparison.json").at("rows");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].at("params"), rows[1].at("params"));
}

TEST(Cli, CompareIsByteDeterministic) {
  const auto dir = scratch("det");
  const auto cfg = write_json(dir, "cfg.json", short_train_config(25));
  for (const char *sub : {"a", "b"})
    ASSERT_EQ(run_cli({"compare", "--plans", "lora-4", "--plans",
                       "kernel-wise-mq,kernel-mix-lite-qv-tiny", "--train-config", cfg,
                       "--out", (dir / sub).string()})
                  .code,
              0);
  EXPECT_EQ(read_file(dir / "a" / "comparison.csv"), read_file(dir / "b" / "comparison.csv"));
  EXPECT_EQ(read_file(dir / "a" / "comparison.json"),
            read_file(dir / "b" / "comparison.json"));
}

TEST(Cli, ManifestTimestampHonoursSourceDateEpoch) {
  ::setenv("SOURCE_DATE_EPOCH", "0", 1);
  EXPECT_EQ(cli::timestamp_now(), "1970-01-01T00:00:00Z");
  ::unsetenv("SOURCE_DATE_EPOCH");
}
