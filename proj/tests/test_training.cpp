#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "sslrul/pipeline.hpp"
#include "sslrul/training.hpp"

using namespace sslrul;

namespace {

ModelSpec tiny_spec(ModelKind kind, BackboneArch arch = BackboneArch::AR, std::size_t q = 1) {
  ModelSpec s = kind == ModelKind::FineTune ? ModelSpec::finetune(arch) : ModelSpec::pretext(kind, q);
  s.h = 8;
  s.embed_dim = s.hidden = 8;
  s.backbone_layers = 2;
  s.encoder_layers = 1;
  s.finetune_hidden = 4;
  s.dropout = s.finetune_dropout = 0.0;
  return s;
}

TrainConfig quick_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.stage_lrs = {1e-2, 1e-3};
  c.epochs_per_stage = 4;
  c.final_max_epochs = 3;
  c.final_patience = 2;
  c.batch_size = 32;
  c.val_fraction = 0.25;
  c.seed = seed;
  return c;
}

const Dataset& unlabelled_data() {
  static const Dataset ds = generate_dataset(MaterialConfig{}, 8, DatasetKind::Unlabelled, 0.3, 21, 8);
  return ds;
}

const Dataset& labelled_data() {
  static const Dataset ds = generate_dataset(MaterialConfig{}, 6, DatasetKind::Labelled, 1.0, 22, 8);
  return ds;
}

double reference_mse(const std::vector<double>& a, const std::vector<double>& b) {
  long double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (long double)(a[i] - b[i]) * (a[i] - b[i]);
  return static_cast<double>(acc / a.size());
}

}  // namespace

TEST(Losses, MseMatchesReference) {
  Rng rng(1);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> a(1 + rep % 17), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = u(rng), b[i] = u(rng);
    const double got = mse_loss(Tensor::from({1, a.size()}, a), Tensor::from({1, b.size()}, b)).item();
    EXPECT_NEAR(got, reference_mse(a, b), 1e-12 * std::max(1.0, reference_mse(a, b)));
  }
}

TEST(Losses, MapeHandValuesAndZeroTargets) {
  const std::vector<double> pred{110, 90};
  const std::vector<double> truth{100, 100};
  EXPECT_NEAR(mape(pred, truth).value, 10.0, 1e-12);
  const std::vector<double> p2{1, 5, 3};
  const std::vector<double> t2{0, 4, 3};
  const MapeResult r = mape(p2, t2);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.used, 2u);
  EXPECT_NEAR(r.value, 12.5, 1e-12);
  EXPECT_TRUE(std::isnan(mape(std::vector<double>{1}, std::vector<double>{0}).value));
  EXPECT_THROW(mape(pred, t2), ShapeError);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{1.0, -3.0};
  AdamMoments st;
  adam_step(p, g, st, 0.1);
  EXPECT_NEAR(p[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p[1], -2.0 + 0.1 * 3.0 / (3.0 + 1e-8), 1e-15);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, SecondStepMatchesHandRecurrence) {
  std::vector<double> p{0.0};
  AdamMoments st;
  adam_step(p, std::vector<double>{2.0}, st, 0.01);
  adam_step(p, std::vector<double>{-1.0}, st, 0.01);
  const double m = 0.9 * 0.2 + 0.1 * -1.0;
  const double v = 0.999 * 0.004 + 0.001 * 1.0;
  const double step2 = 0.01 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(p[0], -0.01 * 2.0 / (2.0 + 1e-8) - step2, 1e-15);
}

TEST(Adam, MinimizesQuadratic) {
  Tensor w = Tensor::from({1, 3}, {4, -3, 2}, true);
  const Tensor target = Tensor::from({1, 3}, {1, 1, 1});
  AdamOptimizer opt({w});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    Tensor loss = mse(w, target);
    backward(loss);
    opt.step(0.05);
  }
  for (double v : w.values()) EXPECT_NEAR(v, 1.0, 1e-3);
}

TEST(Adam, SkipsTensorsWithoutGradient) {
  Tensor used = Tensor::from({1, 1}, {1.0}, true);
  Tensor unused = Tensor::from({1, 1}, {5.0}, true);
  AdamOptimizer opt({used, unused});
  Tensor loss = sum(used);
  backward(loss);
  opt.step(0.1);
  EXPECT_EQ(unused.item(), 5.0);
  EXPECT_LT(used.item(), 1.0);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.stage_lrs = {1e-3, 1e-2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.val_fraction = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(TrainConfig::finetune_defaults().batch_size, 32u);
  EXPECT_EQ(TrainConfig::pretrain_defaults().batch_size, 4096u);
}

TEST(Normalizer, StandardizesEachGauge) {
  StrainSequence s;
  s.n_gauges = 2;
  s.measurements = {1, 10, 3, 30, 5, 50};
  const std::vector<StrainSequence> seqs{s};
  const Normalizer n = Normalizer::fit(seqs);
  EXPECT_NEAR(n.mean[0], 3.0, 1e-12);
  EXPECT_NEAR(n.mean[1], 30.0, 1e-12);
  EXPECT_NEAR(n.std[0], std::sqrt(8.0 / 3.0), 1e-12);
  const StrainSequence z = n.apply(s);
  EXPECT_NEAR(z.at(0, 1), -20.0 / n.std[1], 1e-12);
  StrainSequence flat = s;
  flat.measurements = {1, 1, 1, 1, 1, 1};
  EXPECT_THROW(Normalizer::fit(std::vector<StrainSequence>{flat}), DataError);
}

TEST(Split, ByStructureIsDisjointAndSeeded) {
  const auto& ds = labelled_data();
  const StructureSplit a = split_structures(ds.structures, 0.34, 5);
  const StructureSplit b = split_structures(ds.structures, 0.34, 5);
  EXPECT_EQ(a.val.size(), 2u);
  EXPECT_EQ(a.train.size(), 4u);
  for (const auto& v : a.val)
    for (const auto& t : a.train) EXPECT_NE(v.id, t.id);
  for (std::size_t i = 0; i < a.val.size(); ++i) EXPECT_EQ(a.val[i].id, b.val[i].id);
  EXPECT_EQ(split_structures(ds.structures, 0.0, 5).val.size(), 0u);
}

TEST(Objectives, WindowCountsMatchRanges) {
  const auto& ds = unlabelled_data();
  const Model m = init_params(tiny_spec(ModelKind::MSPA, BackboneArch::AR, 3), 0);
  PretextObjective obj(m, {Task::MSPA, 3}, ds.structures, {});
  std::size_t expected = 0;
  for (const auto& s : ds.structures) expected += window_range(s.length(), 8, {Task::MSPA, 3}).count;
  EXPECT_EQ(obj.size(Split::Train), expected);
  EXPECT_EQ(obj.size(Split::Val), 0u);
}

TEST(Objectives, CachedFrozenBackboneGivesSameLoss) {
  const auto& ds = labelled_data();
  Model m = init_params(tiny_spec(ModelKind::FineTune), 3);
  m.apply_freeze(m.backbone_names());
  const std::vector<StrainSequence> train(ds.structures.begin(), ds.structures.begin() + 4);
  const std::vector<StrainSequence> val(ds.structures.begin() + 4, ds.structures.end());
  RulObjective plain(m, train, val, 500, 100.0, false);
  RulObjective cached(m, train, val, 500, 100.0, true);
  EXPECT_TRUE(cached.cached());
  std::vector<SampleRef> refs;
  for (std::uint32_t i = 0; i < plain.size(Split::Val); ++i) refs.push_back({Split::Val, i});
  const EvalResult a = plain.evaluate(refs, 64);
  const EvalResult b = cached.evaluate(refs, 64);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  EXPECT_NEAR(a.mape, b.mape, 1e-9);
}

TEST(Fit, ReducesLossAndLogsEveryEpoch) {
  const auto& ds = unlabelled_data();
  PretrainOptions opt;
  opt.pretext = Pretext::AR;
  opt.spec = tiny_spec(ModelKind::AR);
  opt.train = quick_config();
  const TrainingRun run = pretrain(ds.structures, 8, opt);
  ASSERT_GE(run.fit.log.size(), 9u);
  EXPECT_EQ(run.fit.log.front().phase, "stage0");
  EXPECT_EQ(run.fit.log.back().phase, "final");
  EXPECT_LT(run.fit.best_val_loss, run.fit.log.front().val_loss + 1e-12);
  const EpochLog& last_stage = run.fit.log[2 * opt.train.epochs_per_stage - 1];
  EXPECT_EQ(last_stage.phase, "stage1");
  EXPECT_LT(last_stage.train_loss, 0.5 * run.fit.log.front().train_loss);
  EXPECT_EQ(run.fit.epoch_seconds.size(), run.fit.log.size());
}

TEST(Fit, RestoresBestValidationWeightsBetweenStages) {
  const auto& ds = unlabelled_data();
  PretrainOptions opt;
  opt.spec = tiny_spec(ModelKind::AR);
  opt.train = quick_config();
  opt.train.stage_lrs = {5e-2};
  opt.train.final_max_epochs = 0;
  const TrainingRun run = pretrain(ds.structures, 8, opt);
  // With no final stage the returned weights are the best-validation ones.
  const Model model = run.checkpoint.to_model();
  const StructureSplit split = split_structures(ds.structures, opt.train.val_fraction, opt.train.seed);
  PretextObjective obj(model, {Task::AR, 1}, normalize_all(run.checkpoint.normalizer, split.train),
                       normalize_all(run.checkpoint.normalizer, split.val));
  std::vector<SampleRef> refs;
  for (std::uint32_t i = 0; i < obj.size(Split::Val); ++i) refs.push_back({Split::Val, i});
  // float32 storage in the checkpoint perturbs the loss slightly.
  EXPECT_NEAR(obj.evaluate(refs, 512).loss, run.fit.best_val_loss, 1e-5 * run.fit.best_val_loss + 1e-9);
}

TEST(Fit, IsDeterministicForAFixedSeed) {
  const auto& ds = unlabelled_data();
  PretrainOptions opt;
  opt.pretext = Pretext::MSPA;
  opt.q = 2;
  opt.spec = tiny_spec(ModelKind::MSPA, BackboneArch::AR, 2);
  opt.spec->dropout = 0.2;
  opt.train = quick_config(9);
  const TrainingRun a = pretrain(ds.structures, 8, opt);
  const TrainingRun b = pretrain(ds.structures, 8, opt);
  EXPECT_EQ(a.fit.log, b.fit.log);
  for (std::size_t i = 0; i < a.checkpoint.tensors.size(); ++i)
    EXPECT_EQ(a.checkpoint.tensors[i].values, b.checkpoint.tensors[i].values);
}

TEST(Finetune, FrozenBackboneIsUntouched) {
  PretrainOptions po;
  po.pretext = Pretext::AR;
  po.spec = tiny_spec(ModelKind::AR);
  po.train = quick_config();
  const TrainingRun pre = pretrain(unlabelled_data().structures, 8, po);
  FinetuneOptions fo;
  fo.freeze = true;
  fo.train = quick_config(4);
  fo.spec = tiny_spec(ModelKind::FineTune);
  const TrainingRun ft = finetune(&pre.checkpoint, labelled_data().structures, 8, 500, fo);
  std::size_t checked = 0;
  for (const auto& t : ft.checkpoint.tensors) {
    if (!ft.checkpoint.frozen.count(t.name)) continue;
    for (const auto& s : pre.checkpoint.tensors)
      if (s.name == t.name) {
        EXPECT_EQ(s.values, t.values) << t.name;
        ++checked;
      }
  }
  EXPECT_EQ(checked, 2u + 2u * 12u);
  EXPECT_EQ(ft.fit.trainable, ft.checkpoint.trainable_count());
  EXPECT_GT(ft.checkpoint.rul_scale, 0.0);
  EXPECT_EQ(ft.checkpoint.pretext, Pretext::AR);
}

TEST(Finetune, UnfrozenBackboneMovesAndHeadTrains) {
  PretrainOptions po;
  po.spec = tiny_spec(ModelKind::AR);
  po.train = quick_config();
  const TrainingRun pre = pretrain(unlabelled_data().structures, 8, po);
  FinetuneOptions fo;
  fo.train = quick_config(4);
  fo.spec = tiny_spec(ModelKind::FineTune);
  const TrainingRun ft = finetune(&pre.checkpoint, labelled_data().structures, 8, 500, fo);
  EXPECT_TRUE(ft.checkpoint.frozen.empty());
  EXPECT_NE(ft.checkpoint.tensors[0].values, pre.checkpoint.tensors[0].values);
  EXPECT_LT(ft.fit.log.back().train_loss, ft.fit.log.front().train_loss);
}

TEST(Finetune, RejectsInvalidCombinations) {
  FinetuneOptions fo;
  fo.freeze = true;
  fo.train = quick_config();
  EXPECT_THROW(finetune(nullptr, labelled_data().structures, 30, 500, fo), ConfigError);
  fo.freeze = false;
  EXPECT_THROW(finetune(nullptr, unlabelled_data().structures, 8, 500, fo), DataError);
  fo.spec = tiny_spec(ModelKind::FineTune);
  EXPECT_THROW(finetune(nullptr, labelled_data().structures, 30, 500, fo), ConfigError);
}

TEST(Pretrain, RejectsNoneTask) {
  PretrainOptions po;
  po.pretext = Pretext::None;
  EXPECT_THROW(pretrain(unlabelled_data().structures, 8, po), ConfigError);
}
