#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "nesyxil/trainer.hpp"

using namespace nesyxil;

namespace {

struct Stop {};

const DatasetSpec& tiny_spec() {
  static const DatasetSpec spec = [] {
    DatasetSpec s = clevr_hans3_spec();
    s.per_class_counts = {24, 8, 8};
    return s;
  }();
  return spec;
}

const Dataset& tiny_data() {
  static const Dataset ds = generate_dataset(tiny_spec());
  return ds;
}

TrainConfig tiny_config(TrainMode mode = TrainMode::kDefault) {
  TrainConfig c = default_train_config(mode, "ch3", 3, 7);
  c.model.d_hidden = 16;
  c.model.n_heads = 2;
  c.epochs = 4;
  c.batch_size = 16;
  c.lr_init = 1e-2;
  c.lr_min = 1e-4;
  c.ig_steps_train = 4;
  c.expl_samples = 4;
  c.val_expl_samples = 8;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nesyxil_trainer_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Schedule, CosineEndpoints) {
  TrainConfig c;
  c.epochs = 4;
  EXPECT_DOUBLE_EQ(cosine_lr(0, c), 1e-4);
  EXPECT_NEAR(cosine_lr(1, c), 8.55017856687341e-05, 1e-18);
  EXPECT_NEAR(cosine_lr(2, c), 0.5 * (1e-4 + 1e-6), 1e-18);
  EXPECT_NEAR(cosine_lr(4, c), 1e-6, 1e-18);
  for (std::size_t e = 1; e < 4; ++e) EXPECT_LT(cosine_lr(e, c), cosine_lr(e - 1, c));
}

TEST(Adam, MatchesReferenceTrajectory) {
  ModelParams p;
  p.add("w", Tensor({2}, {1.0, -2.0}));
  TrainConfig c;
  AdamState st = AdamState::zeros_like(p);
  const std::vector<std::vector<double>> grads{{0.5, 0.1}, {-1.0, 0.3}, {0.2, -0.4}};
  const std::vector<std::vector<double>> expected{{0.900000002, -2.099999990000001},
                                                  {0.9366103542405654, -2.19177809779441},
                                                  {0.9532121057371115, -2.1856379980611185}};
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<Tensor> g{Tensor({2}, grads[s])};
    adam_step(p, g, st, 0.1, c);
    EXPECT_NEAR(p.get("w")[0], expected[s][0], 1e-12);
    EXPECT_NEAR(p.get("w")[1], expected[s][1], 1e-12);
  }
  EXPECT_EQ(st.step, 3u);
}

TEST(Adam, WeightDecayAndShapeChecks) {
  ModelParams p;
  p.add("w", Tensor({2}, {1.0, -2.0}));
  TrainConfig c;
  c.weight_decay = 0.01;
  AdamState st = AdamState::zeros_like(p);
  for (const auto& g : std::vector<std::vector<double>>{{0.5, 0.1}, {-1.0, 0.3}}) {
    std::vector<Tensor> gt{Tensor({2}, g)};
    adam_step(p, gt, st, 0.1, c);
  }
  EXPECT_NEAR(p.get("w")[0], 0.9355236415321513, 1e-12);
  EXPECT_NEAR(p.get("w")[1], -2.189994210661293, 1e-12);

  std::vector<Tensor> bad{Tensor({3})};
  EXPECT_THROW(adam_step(p, bad, st, 0.1, c), ShapeMismatch);
  std::vector<Tensor> none;
  EXPECT_THROW(adam_step(p, none, st, 0.1, c), ShapeMismatch);
}

TEST(Metrics, BalancedAccuracy) {
  std::vector<std::size_t> labels{0, 0, 0, 1, 2, 2};
  std::vector<std::size_t> preds{0, 1, 0, 1, 2, 0};
  Metrics m = metrics_from_predictions(labels, preds, 3);
  EXPECT_NEAR(m.per_class_accuracy[0], 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(m.per_class_accuracy[1], 1.0);
  EXPECT_DOUBLE_EQ(m.per_class_accuracy[2], 0.5);
  EXPECT_NEAR(m.balanced_accuracy, (2.0 / 3.0 + 1.0 + 0.5) / 3.0, 1e-15);
  EXPECT_NEAR(m.accuracy, 4.0 / 6.0, 1e-15);
  EXPECT_EQ(m.confusion[2][0], 1u);

  // Classes absent from the labels do not count.
  Metrics partial = metrics_from_predictions(std::vector<std::size_t>{0, 0}, std::vector<std::size_t>{0, 2}, 3);
  EXPECT_DOUBLE_EQ(partial.balanced_accuracy, 0.5);
}

TEST(Config, JsonRoundTripAndHash) {
  TrainConfig c = tiny_config(TrainMode::kXilBoth);
  c.mask_source = MaskSource::kGroundTruth;
  c.rrr_reduction = Reduction::kSum;
  c.weight_decay = 1e-3;
  TrainConfig back = TrainConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  back.lambda_rrr = 21;
  EXPECT_NE(back.hash(), c.hash());

  EXPECT_THROW(parse_mode("xil"), FormatError);
  EXPECT_THROW(parse_reduction("avg"), FormatError);
  TrainConfig bad;
  bad.lr_min = 1.0;
  EXPECT_THROW(bad.validate(), FormatError);
}

TEST(Config, ModeDefaults) {
  auto d = default_train_config(TrainMode::kDefault, "ch3", 3, 0);
  EXPECT_DOUBLE_EQ(d.lr_init, 1e-4);
  EXPECT_EQ(d.epochs, 50u);
  EXPECT_EQ(d.batch_size, 128u);
  auto x = default_train_config(TrainMode::kXilMse, "ch7", 7, 0);
  EXPECT_DOUBLE_EQ(x.lr_init, 1e-3);
  EXPECT_DOUBLE_EQ(x.lambda_mse, 10.0);
  EXPECT_DOUBLE_EQ(default_train_config(TrainMode::kXilRrr, "ch3", 3, 0).lambda_rrr, 20.0);
  EXPECT_DOUBLE_EQ(default_train_config(TrainMode::kXilMse, "ch3", 3, 0).lambda_mse, 1000.0);
}

TEST(Checkpoint, RoundTripIsExact) {
  Checkpoint ck;
  ck.params = init_params(tiny_config().model, 3);
  ck.adam = AdamState::zeros_like(ck.params);
  ck.adam.m[0][0] = 0.125;
  ck.adam.v[3][1] = std::nextafter(1.0, 2.0);
  ck.adam.step = 17;
  ck.epoch = 5;
  ck.config_hash = 0xfeedfacecafebeefULL;
  ck.best_val = true;
  ck.val_loss = 0.1;
  auto dir = temp_dir("ckpt");
  save_checkpoint(dir, ck);
  Checkpoint back = load_checkpoint(dir);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.adam, ck.adam);
  EXPECT_EQ(back.epoch, 5u);
  EXPECT_EQ(back.config_hash, ck.config_hash);
  EXPECT_TRUE(back.best_val);
  EXPECT_DOUBLE_EQ(back.val_loss, 0.1);
  EXPECT_THROW(load_checkpoint(dir / "missing"), NotFound);

  std::filesystem::resize_file(dir / "params.bin", 64);
  EXPECT_THROW(load_checkpoint(dir), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Train, LossDecreasesAndBestIsLowestValidationLoss) {
  TrainConfig c = tiny_config();
  c.epochs = 8;
  TrainResult r = train(tiny_data(), c, nullptr);
  ASSERT_EQ(r.history.size(), 8u);
  EXPECT_LT(r.history.back().train_ce, r.history.front().train_ce);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  for (const auto& h : r.history) {
    EXPECT_TRUE(std::isfinite(h.train_loss));
    if (h.val_loss < best) {
      best = h.val_loss;
      best_epoch = h.epoch;
    }
  }
  EXPECT_EQ(r.best.epoch, best_epoch + 1);
  EXPECT_DOUBLE_EQ(r.best.val_loss, best);
  EXPECT_TRUE(r.best.best_val);
  EXPECT_EQ(r.last.epoch, 8u);

  SetTransformer m(c.model);
  Metrics vm = evaluate(m, r.best.params, encode_split(tiny_data(), Split::kVal, 0));
  EXPECT_NEAR(vm.loss, r.history[best_epoch].val_ce, 1e-12);
}

TEST(Train, EvaluateMatchesPredict) {
  TrainConfig c = tiny_config();
  SetTransformer m(c.model);
  ModelParams p = init_params(c.model, 1);
  EncodedSplit test = encode_split(tiny_data(), Split::kTest, 0);
  Metrics got = evaluate(m, p, test, 5);
  std::vector<std::size_t> idx = detail::iota(test.size());
  Metrics want = metrics_from_predictions(test.labels, predict(m, p, test.batch(idx)), 3);
  EXPECT_EQ(got.confusion, want.confusion);
  EXPECT_GE(got.balanced_accuracy, 0.0);
  EXPECT_LE(got.balanced_accuracy, 1.0);
}

TEST(Train, DeterministicAndResumable) {
  TrainConfig c = tiny_config(TrainMode::kXilRrr);
  FeedbackSet fs = not_gray_feedback();
  TrainResult full = train(tiny_data(), c, &fs);
  TrainResult again = train(tiny_data(), c, &fs);
  EXPECT_EQ(full.last.params, again.last.params);
  EXPECT_EQ(full.best.params, again.best.params);

  // Interrupt after two epochs, persist, reload and finish.
  auto dir = temp_dir("resume");
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const TrainResult& r) {
    save_run(dir, c, r, "data");
    if (r.last.epoch == 2) throw Stop{};
  };
  EXPECT_THROW(train(tiny_data(), c, &fs, nullptr, hooks), Stop);
  TrainResult partial = load_run(dir);
  EXPECT_EQ(partial.last.epoch, 2u);
  TrainResult resumed = train(tiny_data(), c, &fs, nullptr, {}, &partial);
  EXPECT_EQ(resumed.last.params, full.last.params);
  EXPECT_EQ(resumed.last.adam, full.last.adam);
  EXPECT_EQ(resumed.best.params, full.best.params);
  ASSERT_EQ(resumed.history.size(), full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    EXPECT_EQ(resumed.history[i].to_json(), full.history[i].to_json());
  }

  TrainConfig other = c;
  other.lambda_rrr = 1.0;
  EXPECT_THROW(train(tiny_data(), other, &fs, nullptr, {}, &partial), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Train, FeedbackRequirements) {
  FeedbackSet empty;
  EXPECT_THROW(train(tiny_data(), tiny_config(TrainMode::kXilRrr), nullptr), FeedbackMissing);
  EXPECT_THROW(train(tiny_data(), tiny_config(TrainMode::kXilMse), &empty), FeedbackMissing);
  TrainConfig gt = tiny_config(TrainMode::kXilMse);
  gt.mask_source = MaskSource::kGroundTruth;
  gt.epochs = 1;
  EXPECT_THROW(train(tiny_data(), gt, nullptr), FeedbackMissing);
  TrainResult r = train(tiny_data(), gt, nullptr, &tiny_spec());
  EXPECT_GT(r.history[0].train_mse, 0.0);
}

TEST(Train, ExplanationTermsAreReportedAndWeighted) {
  TrainConfig c = tiny_config(TrainMode::kXilBoth);
  c.epochs = 1;
  FeedbackSet fs = class_rule_feedback(tiny_spec());
  auto extra = not_gray_feedback().rules();
  for (const auto& r : extra) fs.add(r);
  TrainResult r = train(tiny_data(), c, &fs, &tiny_spec());
  const auto& h = r.history[0];
  EXPECT_GT(h.train_mse, 0.0);
  EXPECT_GT(h.train_rrr, 0.0);
  EXPECT_GT(h.val_mse, 0.0);
  EXPECT_NEAR(h.val_loss, h.val_ce + c.lambda_mse * h.val_mse + c.lambda_rrr * h.val_rrr, 1e-9);
}

TEST(Train, ReductionsScaleThePenalties) {
  TrainConfig mean_cfg = tiny_config(TrainMode::kXilBoth);
  TrainConfig sum_cfg = mean_cfg;
  sum_cfg.mse_reduction = Reduction::kSum;
  sum_cfg.rrr_reduction = Reduction::kSum;
  FeedbackSet fs = class_rule_feedback(tiny_spec());
  auto extra = not_gray_feedback().rules();
  for (const auto& r : extra) fs.add(r);
  EncodedSplit data = encode_split(tiny_data(), Split::kTrain, 0);
  SplitMasks masks = split_masks(data, &fs, MaskSource::kFeedback, nullptr);
  SetTransformer m(mean_cfg.model);
  ModelParams params = init_params(mean_cfg.model, 2);
  std::vector<std::size_t> idx{0, 5, 30, 41, 60, 70};
  auto run = [&](const TrainConfig& c) {
    ParamVars p = bind(params, true);
    return detail::batch_loss(m, p, c, data, masks, idx, {});
  };
  auto a = run(mean_cfg);
  auto b = run(sum_cfg);
  EXPECT_DOUBLE_EQ(a.ce, b.ce);
  EXPECT_NEAR(a.rrr * 6.0, b.rrr, 1e-12 * b.rrr);
  EXPECT_NEAR(a.mse * kDefaultSlots * kObjectWidth, b.mse, 1e-12 * b.mse);
}
