#include <gtest/gtest.h>

#include <cmath>

#include "cdnet/trainer.hpp"
#include "support.hpp"

using namespace cdnet;

namespace {

GlyphConfig tiny_glyphs(LabelMode mode) {
  GlyphConfig g;
  g.side = 8;
  g.train_count = 60;
  g.validation_count = 20;
  g.test_count = 20;
  g.mode = mode;
  return g;
}

NetworkSpec tiny_spec(const Dataset& d) {
  NetworkSpec s;
  s.image_dim = d.images.cols();
  s.target_dim = d.labels.cols();
  s.latent_dim = 2;
  s.mode = d.mode;
  s.encoder_hidden = {12};
  s.decoder_hidden = {12};
  s.discriminator_hidden = {10, 6};
  return s;
}

TrainConfig tiny_config(LabelMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.batch_size = 20;
  c.pretrain_epochs = 2;
  c.joint_iterations = 6;
  c.weights.warmup_iterations = 4;
  c.learning_rate = 1e-3;
  return c;
}

}  // namespace

TEST(LambdaSchedule, RampsLinearlyThenHolds) {
  LossWeights w;
  w.lambda_dcorr_target = 2.0;
  w.warmup_iterations = 100;
  EXPECT_EQ(lambda_dcorr_at(0, w), 0.0);
  EXPECT_DOUBLE_EQ(lambda_dcorr_at(50, w), 1.0);
  EXPECT_DOUBLE_EQ(lambda_dcorr_at(100, w), 2.0);
  EXPECT_DOUBLE_EQ(lambda_dcorr_at(5000, w), 2.0);
}

TEST(RmsProp, ClosedFormFirstStep) {
  TensorMap params{{"p", Tensor::matrix(1, 2, {1.0, -1.0})}};
  Gradients g{{"p", Tensor::matrix(1, 2, {2.0, -0.5})}};
  RmsPropState state;
  rmsprop_step(params, g, state, 0.1, 0.9, 1e-8);
  // v = 0.1 g^2, step = lr g / sqrt(v) = lr sign(g) / sqrt(0.1)
  const double s = 0.1 / std::sqrt(0.1);
  EXPECT_NEAR(params.at("p")(0, 0), 1.0 - s, 1e-7);
  EXPECT_NEAR(params.at("p")(0, 1), -1.0 + s, 1e-7);
  EXPECT_NEAR(state.mean_square.at("p")(0, 0), 0.4, 1e-15);
}

TEST(RmsProp, ZeroGradientLeavesParametersUnchanged) {
  TensorMap params{{"p", Tensor::matrix(1, 2, {1.0, -1.0})}};
  const TensorMap before = params;
  RmsPropState state;
  rmsprop_step(params, Gradients{{"p", Tensor({1, 2}, 0.0)}}, state, 0.1, 0.9, 1e-8);
  EXPECT_EQ(params.at("p"), before.at("p"));
}

TEST(RmsProp, NonFiniteGradientNamesTheParameter) {
  TensorMap params{{"enc_z/fc0/weight", Tensor({1, 1}, 1.0)}};
  RmsPropState state;
  try {
    rmsprop_step(params, Gradients{{"enc_z/fc0/weight", Tensor({1, 1}, std::nan(""))}}, state, 0.1, 0.9, 1e-8);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("enc_z/fc0/weight"), std::string::npos);
  }
  EXPECT_EQ(params.at("enc_z/fc0/weight")(0, 0), 1.0);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.weights.warmup_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

class JointTraining : public ::testing::TestWithParam<LabelMode> {};

TEST_P(JointTraining, TargetEncoderStaysFrozenAndOthersMove) {
  const LabelMode mode = GetParam();
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(mode));
  const NetworkSpec spec = tiny_spec(d.train);
  const TrainConfig cfg = tiny_config(mode);
  Model model{spec, initialize_params(spec, 11)};
  pretrain_enc_y(cfg, d.train, d.validation, model);
  const ModelParams before = model.params;
  const TrainLog log = train_joint(cfg, d.train, model);
  ASSERT_EQ(log.records.size(), cfg.joint_iterations);
  for (const auto& [name, t] : model.params.tensors) {
    if (belongs_to(name, kEncY)) {
      EXPECT_EQ(t, before.at(name)) << name;
    } else if (name.ends_with("/weight")) {
      EXPECT_NE(t, before.at(name)) << name;
    }
  }
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    EXPECT_EQ(r.phase, "joint");
    EXPECT_DOUBLE_EQ(*r.lambda_dcorr, lambda_dcorr_at(i, cfg.weights));
    for (const auto& v : {r.loss_dcorr, r.loss_rec_pix, r.loss_rec_feat, r.loss_rec, r.loss_adv}) {
      ASSERT_TRUE(v.has_value());
      EXPECT_TRUE(std::isfinite(*v));
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, JointTraining, ::testing::Values(LabelMode::multiclass, LabelMode::multilabel));

TEST(Pretrain, OnlyTouchesTargetEncoderAndLogsAccuracy) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multiclass));
  const NetworkSpec spec = tiny_spec(d.train);
  Model model{spec, initialize_params(spec, 2)};
  const ModelParams before = model.params;
  const TrainLog log = pretrain_enc_y(tiny_config(LabelMode::multiclass), d.train, d.validation, model);
  EXPECT_EQ(log.records.size(), 2u * 3u);  // 60 / 20 batches per epoch
  EXPECT_TRUE(log.records.back().validation_accuracy.has_value());
  for (const auto& [name, t] : model.params.tensors) {
    if (!belongs_to(name, kEncY)) {
      EXPECT_EQ(t, before.at(name)) << name;
    }
  }
}

TEST(Pretrain, ModeMismatchIsAConfigError) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multiclass));
  const NetworkSpec spec = tiny_spec(d.train);
  Model model{spec, initialize_params(spec, 2)};
  EXPECT_THROW(pretrain_enc_y(tiny_config(LabelMode::multilabel), d.train, d.validation, model), ConfigError);
}

TEST(Ablation, PixelOnlyHasNoAdversarialTerms) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multiclass));
  const NetworkSpec spec = tiny_spec(d.train);
  TrainConfig cfg = tiny_config(LabelMode::multiclass);
  cfg.ablation = Ablation::m1;
  Model model{spec, initialize_params(spec, 3)};
  const ModelParams before = model.params;
  const TrainLog log = train_joint(cfg, d.train, model);
  for (const auto& r : log.records) {
    EXPECT_FALSE(r.loss_adv.has_value());
    EXPECT_FALSE(r.loss_rec_feat.has_value());
    EXPECT_EQ(*r.loss_rec, *r.loss_rec_pix);
  }
  for (const auto& [name, t] : model.params.tensors) {
    if (belongs_to(name, kDis)) {
      EXPECT_EQ(t, before.at(name)) << name;
    }
  }
}

TEST(Ablation, NoDecorrelationStillMonitorsIt) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multiclass));
  const NetworkSpec spec = tiny_spec(d.train);
  TrainConfig cfg = tiny_config(LabelMode::multiclass);
  cfg.decorrelation = Decorrelation::none;
  Model model{spec, initialize_params(spec, 3)};
  const TrainLog log = train_joint(cfg, d.train, model);
  for (const auto& r : log.records) {
    EXPECT_FALSE(r.loss_dcorr.has_value());
    EXPECT_TRUE(r.dcorr_monitor.has_value());
  }
}

TEST(JointGraphTest, PenaltyGradientDoesNotReachDecoder) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multilabel));
  const NetworkSpec spec = tiny_spec(d.train);
  const TrainConfig cfg = tiny_config(LabelMode::multilabel);
  const JointGraph j = build_joint_graph(cfg, spec);
  const ModelParams p = initialize_params(spec, 4);
  Bindings b;
  b.bind_all(p.tensors).bind("x", d.train.images).bind("lambda_dcorr", Tensor::scalar(1.0));
  const Execution exec = forward(j.graph, b, {true, 5});
  const Gradients g = backward(j.graph, exec, j.dcorr);
  // The target encoder does receive a gradient; training filters it out.
  for (const auto& [name, t] : g) {
    if (belongs_to(name, kDec) || belongs_to(name, kDis)) {
      for (double v : t.values()) ASSERT_EQ(v, 0.0) << name;
    }
  }
  bool moved = false;
  for (double v : g.at("enc_z/fc0/weight").values()) moved |= v != 0.0;
  EXPECT_TRUE(moved);
}

TEST(Train, IdenticalSeedsGiveIdenticalParameters) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multilabel));
  const NetworkSpec spec = tiny_spec(d.train);
  const TrainConfig cfg = tiny_config(LabelMode::multilabel);
  const TrainResult a = train(cfg, spec, d);
  const TrainResult b = train(cfg, spec, d);
  EXPECT_EQ(a.model.params, b.model.params);
  TrainConfig other = cfg;
  other.seed = 8;
  EXPECT_NE(train(other, spec, d).model.params, a.model.params);
}

TEST(Train, CheckpointCallbackFiresAtInterval) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multiclass));
  const NetworkSpec spec = tiny_spec(d.train);
  TrainConfig cfg = tiny_config(LabelMode::multiclass);
  cfg.checkpoint_interval = 2;
  std::vector<std::size_t> seen;
  train(cfg, spec, d, [&](const ModelParams&, std::size_t it) { seen.push_back(it); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{2, 4, 6}));
}

TEST(Train, DivergenceAbortsWithLastGoodParameters) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multiclass));
  const NetworkSpec spec = tiny_spec(d.train);
  TrainConfig cfg = tiny_config(LabelMode::multiclass);
  Model model{spec, initialize_params(spec, 3)};
  model.params.tensors.at("enc_z/fc0/weight")(0, 0) = std::numeric_limits<double>::infinity();
  try {
    train_joint(cfg, d.train, model);
    FAIL();
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.diagnostic().iteration, 0u);
    EXPECT_EQ(e.last_good().tensors.at("enc_z/fc0/weight")(0, 0), std::numeric_limits<double>::infinity());
  }
}

TEST(Accuracy, ConstantPredictorScoresClassShare) {
  const DatasetSplits d = generate_glyph_splits(tiny_glyphs(LabelMode::multiclass));
  const NetworkSpec spec = tiny_spec(d.train);
  Model model{spec, initialize_params(spec, 3)};
  const double acc = classification_accuracy(model, d.test);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  // Bias every class but "bar": prediction constant, accuracy = share of bars.
  auto& last = model.params.tensors.at("enc_y/fc1/weight");
  for (double& v : last.values()) v = 0.0;
  model.params.tensors.at("enc_y/fc1/bias")(0, 0) = 5.0;
  double bars = 0.0;
  for (std::size_t i = 0; i < d.test.size(); ++i) bars += d.test.labels(i, 0);
  EXPECT_DOUBLE_EQ(classification_accuracy(model, d.test), bars / d.test.size());
}
