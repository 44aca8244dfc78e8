// SPDX-License-Identifier: Apache-2.0
#include "kwadapt/harness.hpp"
#include "kwadapt/rank.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <iostream>

using namespace kwadapt;

namespace {

BudgetPlan single_target_plan(const std::string &name, Target t,
                              AdapterScheme s, const ModelDims &dims) {
  BudgetPlan p;
  p.name = name;
  p.dims = dims;
  p.scheme(t) = s;
  return p;
}

std::vector<AdapterScheme> all_schemes() {
  return {AdapterScheme::lora(2), AdapterScheme::kernel_wise(1),
          AdapterScheme::kernel_wise_lite(2), AdapterScheme::kernel_mix(1, 1),
          AdapterScheme::kernel_mix_lite(1, 2)};
}

TrainConfig short_config(std::size_t steps) {
  TrainConfig c;
  c.total_steps = steps;
  c.warmup_steps = steps / 4;
  return c;
}

} // namespace

TEST(Seeds, DerivedStreamsDiffer) {
  EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
  EXPECT_NE(derive_seed(1, 1, 0), derive_seed(1, 1, 1));
  EXPECT_NE(derive_seed(1, 1), derive_seed(2, 1));
  EXPECT_EQ(derive_seed(5, 7, 3), derive_seed(5, 7, 3));
}

TEST(Digest, KnownEmptyValue) {
  EXPECT_EQ(Digest{}.hex(), "cbf29ce484222325");
}

TEST(Digest, SensitiveToSingleBit) {
  Matrix a(2, 2, 1.0), b = a;
  b(1, 1) = std::nextafter(1.0, 2.0);
  Digest da, db;
  da.add(a);
  db.add(b);
  EXPECT_NE(da.value(), db.value());
}

TEST(Task, NullTeacherEqualsBase) {
  ToyTask task;
  task.teacher_scale = 0.0;
  const auto inst = make_task(task);
  EXPECT_EQ(inst.base->checksum(), inst.teacher->checksum());
  const auto m = unadapted(inst.base);
  EXPECT_EQ(dataset_loss(m, inst.data), 0.0);
}

TEST(Task, SharedTeacherRankIsExact) {
  for (std::size_t r : {1u, 2u, 3u}) {
    ToyTask task;
    task.teacher_kind = TeacherKind::SharedLowRank;
    task.teacher_rank = r;
    std::mt19937_64 rng(r);
    const auto base = BaseModel::random(task.dims, 11);
    const auto delta = teacher_delta(task, base.layers[0], Target::V, rng);
    EXPECT_EQ(numerical_rank(delta), r);
  }
}

TEST(Task, HeadSpecificTeacherHasRankPerHead) {
  ToyTask task;
  std::mt19937_64 rng(3);
  const auto base = BaseModel::random(task.dims, 12);
  const auto delta = teacher_delta(task, base.layers[0], Target::V, rng);
  EXPECT_EQ(numerical_rank(delta), 4u);
  for (std::size_t h = 0; h < 4; ++h)
    EXPECT_EQ(numerical_rank(slice_cols(delta, h * 8, (h + 1) * 8)), 1u);
}

TEST(Task, TeacherScaleIsRelativeFrobenius) {
  ToyTask task;
  std::mt19937_64 rng(4);
  const auto base = BaseModel::random(task.dims, 13);
  const auto delta = teacher_delta(task, base.layers[0], Target::V, rng);
  EXPECT_NEAR(frobenius_norm(delta) / frobenius_norm(base.layers[0].w_v), 0.5, 1e-12);
}

TEST(Task, InvalidFieldsRejected) {
  ToyTask t;
  t.teacher_rank = 9;
  EXPECT_THROW(make_task(t), ConfigError);
  t = ToyTask{};
  t.teacher_scale = -1.0;
  EXPECT_THROW(make_task(t), ConfigError);
}

TEST(Task, SameSeedSameData) {
  ToyTask t;
  t.dataset_size = 4;
  const auto a = make_task(t), b = make_task(t);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_TRUE(kwtest::bit_equal(a.data.outputs[i], b.data.outputs[i]));
}

TEST(Scheduler, WarmupPeakAndEnd) {
  TrainConfig c;
  c.learning_rate = 0.03;
  c.warmup_steps = 10;
  c.total_steps = 30;
  EXPECT_EQ(scheduled_lr(c, 10), 0.03);
  EXPECT_EQ(scheduled_lr(c, 30), 0.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 5), 0.015);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 20), 0.015);
}

TEST(Scheduler, NoWarmupStartsAtPeak) {
  TrainConfig c;
  c.warmup_steps = 0;
  c.total_steps = 4;
  EXPECT_EQ(scheduled_lr(c, 1), c.learning_rate * 3.0 / 4.0);
}

TEST(AdamW, TwoStepsMatchHandComputation) {
  TrainConfig c;
  c.weight_decay = 0.1;
  auto p = variable(Matrix{{1.0, -2.0}});
  AdamW opt({p}, c);
  const double lr = 0.5, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double w[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  const double g[2][2] = {{0.3, -0.7}, {-0.1, 0.2}};
  for (int t = 1; t <= 2; ++t) {
    p->grad = Matrix{{g[t - 1][0], g[t - 1][1]}};
    opt.step(lr);
    for (int k = 0; k < 2; ++k) {
      m[k] = b1 * m[k] + (1 - b1) * g[t - 1][k];
      v[k] = b2 * v[k] + (1 - b2) * g[t - 1][k] * g[t - 1][k];
      w[k] = w[k] * (1 - lr * 0.1);
      const double mh = m[k] / (1 - std::pow(b1, t));
      const double vh = v[k] / (1 - std::pow(b2, t));
      w[k] -= lr * mh / (std::sqrt(vh) + eps);
    }
    EXPECT_DOUBLE_EQ(p->value(0, 0), w[0]);
    EXPECT_DOUBLE_EQ(p->value(0, 1), w[1]);
  }
}

TEST(TrainConfig, InvalidRejected) {
  TrainConfig c;
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.warmup_steps = c.total_steps + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Model, FreshAdaptersAreBitExactNeutral) {
  const auto dims = ModelDims::toy();
  auto base = std::make_shared<BaseModel>(BaseModel::random(dims, 3));
  const auto x = kwtest::random(7, 32, 4);
  const auto y0 = forward(base, x);
  for (Target t : kAllTargets)
    for (const auto &s : all_schemes())
      for (bool fast : {false, true}) {
        auto m = attach_plan(base, single_target_plan("p", t, s, dims), 9);
        m.lite_fast_path = fast;
        EXPECT_TRUE(kwtest::bit_equal(forward(m, x), y0))
            << to_string(s.kind) << " on " << to_string(t) << (fast ? " fast" : "");
      }
}

TEST(Model, ParamNamesAreQualified) {
  const auto dims = ModelDims::toy();
  auto base = std::make_shared<BaseModel>(BaseModel::random(dims, 3));
  const auto m = attach_plan(base, builtin_plan("lora-4", dims), 1);
  const auto names = m.param_names();
  ASSERT_EQ(names.size(), m.params().size());
  EXPECT_EQ(names.front(), "layer0.Q.shared_B");
  EXPECT_EQ(names.back(), "layer1.V.bias_delta");
  EXPECT_EQ(m.param_count(), report(builtin_plan("lora-4", dims)).params_total);
}

TEST(Model, PlanDimsMustMatch) {
  auto base = std::make_shared<BaseModel>(BaseModel::random(ModelDims::toy(), 3));
  EXPECT_THROW(attach_plan(base, builtin_plan("lora-4", ModelDims::gpt2_small()), 1),
               ConfigError);
}

TEST(Model, OverrideFreezesOneLayer) {
  const auto dims = ModelDims::toy();
  auto base = std::make_shared<BaseModel>(BaseModel::random(dims, 3));
  auto plan = builtin_plan("lora-4", dims);
  plan.overrides.push_back({1, Target::V, std::nullopt});
  const auto m = attach_plan(base, plan, 1);
  EXPECT_TRUE(m.adapter(0, Target::V));
  EXPECT_FALSE(m.adapter(1, Target::V));
}

TEST(Train, ZeroLearningRateChangesNothing) {
  const auto inst = make_task(ToyTask{});
  auto m = attach_plan(inst.base,
                       single_target_plan("kw", Target::V,
                                          AdapterScheme::kernel_wise(1), inst.base->dims),
                       2);
  for (auto &p : m.params())
    p->value = kwtest::random(p->value.rows(), p->value.cols(), 5, 0.1);
  std::vector<Matrix> before;
  for (auto &p : m.params())
    before.push_back(p->value);
  auto c = short_config(20);
  c.learning_rate = 0.0;
  c.batch_size = 64;
  const auto log = train(m, inst.data, c);
  const auto after = m.params();
  for (std::size_t i = 0; i < before.size(); ++i)
    EXPECT_TRUE(kwtest::bit_equal(after[i]->value, before[i]));
  for (double l : log.losses)
    EXPECT_EQ(l, log.losses.front());
}

TEST(Train, NullTaskStaysAtZero) {
  ToyTask t;
  t.teacher_scale = 0.0;
  const auto inst = make_task(t);
  auto run = train_plan(inst, builtin_plan("kernel-wise-mq", inst.base->dims),
                        short_config(200));
  for (double l : run.log.losses)
    EXPECT_LE(l, 1e-20);
  EXPECT_LE(run.log.final_loss, 1e-20);
}

TEST(Train, KernelWiseRankOneFitsHeadSpecificTeacher) {
  const auto inst = make_task(ToyTask{});
  auto run = train_plan(inst,
                        single_target_plan("kw1", Target::V,
                                           AdapterScheme::kernel_wise(1),
                                           inst.base->dims),
                        TrainConfig{});
  EXPECT_EQ(run.log.losses.size(), 2000u);
  EXPECT_LT(run.log.final_loss, 0.05 * run.log.initial_loss);
  EXPECT_EQ(run.log.base_checksum_before, run.log.base_checksum_after);
}

TEST(Train, SameSeedSameLog) {
  const auto inst = make_task(ToyTask{});
  const auto plan = builtin_plan("kernel-wise-lite-qv-small", inst.base->dims);
  const auto a = train_plan(inst, plan, short_config(50));
  const auto b = train_plan(inst, plan, short_config(50));
  EXPECT_EQ(a.log.final_loss, b.log.final_loss);
  EXPECT_EQ(a.log.losses, b.log.losses);
}

TEST(Train, FastPathTracksMergedPath) {
  const auto inst = make_task(ToyTask{});
  const auto plan = builtin_plan("kernel-mix-lite-qv-small", inst.base->dims);
  auto cfg = short_config(40);
  const auto merged = train_plan(inst, plan, cfg);
  cfg.lite_fast_path = true;
  const auto fast = train_plan(inst, plan, cfg);
  EXPECT_NEAR(fast.log.final_loss, merged.log.final_loss,
              1e-9 * merged.log.initial_loss);
}

TEST(Train, HugeLearningRateDiverges) {
  const auto inst = make_task(ToyTask{});
  auto cfg = short_config(10);
  cfg.learning_rate = 1e200;
  cfg.warmup_steps = 0;
  EXPECT_THROW(train_plan(inst, builtin_plan("lora-4", inst.base->dims), cfg),
               DivergenceError);
}

TEST(Compare, SinglePlanGivesOneRow) {
  ToyTask t;
  t.dataset_size = 8;
  const auto rows =
      compare_schemes(t, {builtin_plan("lora-4", t.dims)}, short_config(5));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].plan, "lora-4");
}

TEST(Compare, MatchedLiteVersusLoraObservational) {
  const ToyTask t;
  const auto rows = compare_schemes(
      t,
      {builtin_plan("lora-4", t.dims), builtin_plan("kernel-wise-lite-qv-small", t.dims)},
      short_config(400));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].params, rows[1].params);
  for (const auto &r : rows)
    std::cout << "[observed] " << r.plan << " final/initial = "
              << r.final_loss / r.initial_loss << "\n";
}
