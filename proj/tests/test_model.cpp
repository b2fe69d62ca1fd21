// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "oracle/finite_diff.hpp"
#include "oracle/gradient_cases.hpp"
#include "rnnquant/checkpoint.hpp"
#include "rnnquant/model.hpp"

using namespace rnnquant;

namespace {

SequenceDataset random_dataset(std::size_t n, std::size_t window, std::size_t features, Rng& rng) {
  SequenceDataset d;
  d.window = window;
  d.features = features;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix x = oracle::random_matrix(window, features, rng);
    d.targets.push_back(x(window - 1, 0));
    d.inputs.push_back(std::move(x));
  }
  return d;
}

ModelSpec tiny(std::string_view layers, std::size_t features = 3, std::size_t window = 4) {
  ModelSpec s{ModelSpec::parse_layers(layers), features, window};
  s.validate();
  return s;
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  auto ta = tensor_list(a);
  auto tb = tensor_list(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (!ta[i]->same_shape(*tb[i])) return false;
    if (std::memcmp(ta[i]->data().data(), tb[i]->data().data(), ta[i]->size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

using oracle::full_model_error;

}  // namespace

// --- specification ---------------------------------------------------------

TEST(ModelSpec, DefaultPresetParameterCount) {
  Rng rng(1);
  const Model m = build_model(preset("paper", 8, 12), rng);
  EXPECT_EQ(m.parameter_count(), 4u * (256 * (256 + 8) + 256) + (32 * 256 + 32) + (1 * 32 + 1));
  EXPECT_EQ(m.parameter_count(), 279617u);
  EXPECT_EQ(m.spec.layers_str(), "lstm(256,relu) > dropout(0.2) > dense(32,relu) > dense(1,linear)");
}

TEST(ModelSpec, LstmGruPresetLayout) {
  const ModelSpec s = preset("lstm-gru", 8, 12);
  EXPECT_EQ(s.layers_str(),
            "lstm(256,relu) > dropout(0.2) > gru(128) > dense(32,relu) > dense(1,linear)");
  EXPECT_THROW(preset("svm", 8, 12), ConfigError);
}

TEST(ModelSpec, SameSeedSameInitialParameters) {
  Rng a(42), b(42);
  EXPECT_TRUE(bitwise_equal(build_model(preset("lstm-gru", 8, 12, {16, 8, 8, 0.2}), a).params,
                            build_model(preset("lstm-gru", 8, 12, {16, 8, 8, 0.2}), b).params));
}

TEST(ModelSpec, RejectsBrokenLayerChains) {
  EXPECT_THROW(tiny("dense(32,relu) > dense(1,linear)"), SpecError);
  EXPECT_THROW(tiny("dropout(0.2) > dense(1,linear)"), SpecError);
  EXPECT_THROW(tiny("gru(4) > dense(2,linear)"), SpecError);
  EXPECT_THROW(tiny("gru(4) > dense(4,relu) > gru(2) > dense(1,linear)"), SpecError);
  EXPECT_THROW(tiny("gru(4) > dense(1,relu)"), SpecError);
  EXPECT_THROW(tiny("gru(0) > dense(1,linear)"), SpecError);
  EXPECT_THROW(tiny("gru(4) > dropout(1.0) > dense(1,linear)"), SpecError);
  EXPECT_THROW(tiny("conv(4) > dense(1,linear)"), SpecError);
  EXPECT_NO_THROW(tiny("rnn(4,relu) > dropout(0.5) > lstm(3) > gru(2) > dense(1,linear)"));
}

TEST(ModelSpec, ErrorNamesOffendingLayer) {
  try {
    tiny("dense(32,relu) > dense(1,linear)");
    FAIL();
  } catch (const SpecError& e) {
    EXPECT_NE(std::string(e.what()).find("dense(32,relu)"), std::string::npos);
  }
}

TEST(ModelSpec, LayerStringRoundTrip) {
  const std::string text = "lstm(16,relu) > dropout(0.25) > gru(8) > dense(4,relu) > dense(1,linear)";
  EXPECT_EQ(tiny(text).layers_str(), text);
}

// --- forward ---------------------------------------------------------------

TEST(ForwardSequence, ZeroParametersPredictZero) {
  const ModelSpec spec = preset("lstm-gru", 3, 5, {4, 3, 2, 0.2});
  const Model model{spec, make_params(spec, nullptr)};
  Rng rng(1);
  EXPECT_EQ(predict(model, oracle::random_matrix(5, 3, rng)), 0.0);
}

TEST(ForwardSequence, SingleStepGruReducesToCellPlusHead) {
  Rng rng(3);
  const Model model = build_model(tiny("gru(4) > dense(1,linear)", 3, 1), rng);
  const Matrix window = oracle::random_matrix(1, 3, rng);
  const auto& gp = std::get<GruParams>(model.params[0]);
  const auto& dp = std::get<DenseParams>(model.params[1]);
  const Matrix x = Matrix::column({window(0, 0), window(0, 1), window(0, 2)});
  const Matrix h = gru_forward(x, Matrix(4, 1), gp).h;
  EXPECT_EQ(predict(model, window), dense_forward(h, dp).y[0]);
}

TEST(ForwardSequence, InferModeIsBitwiseDeterministic) {
  Rng a(9), b(9);
  const auto spec = preset("paper", 8, 12, {16, 8, 8, 0.2});
  const Model m1 = build_model(spec, a), m2 = build_model(spec, b);
  Rng rng(10);
  const Matrix w = oracle::random_matrix(12, 8, rng);
  const double p1 = predict(m1, w), p2 = predict(m2, w), p3 = predict(m1, w);
  EXPECT_EQ(std::memcmp(&p1, &p2, sizeof p1), 0);
  EXPECT_EQ(std::memcmp(&p1, &p3, sizeof p1), 0);
}

TEST(ForwardSequence, ShapeMismatch) {
  Rng rng(1);
  const Model m = build_model(tiny("gru(2) > dense(1,linear)"), rng);
  EXPECT_THROW(predict(m, Matrix(3, 3)), DimensionError);
}

TEST(ForwardSequence, TrainModeDropoutNeedsGenerator) {
  Rng rng(1);
  const Model m = build_model(tiny("gru(2) > dropout(0.5) > dense(1,linear)"), rng);
  EXPECT_THROW(forward_sequence(m, Matrix(4, 3), Mode::train), ConfigError);
}

// --- loss and optimiser ----------------------------------------------------

TEST(MseLoss, Examples) {
  const auto same = mse_loss(std::vector{1.0, 2.0}, std::vector{1.0, 2.0});
  EXPECT_EQ(same.loss, 0.0);
  EXPECT_EQ(same.grad, (std::vector{0.0, 0.0}));
  const auto one = mse_loss(std::vector{2.0}, std::vector{0.0});
  EXPECT_EQ(one.loss, 4.0);
  EXPECT_EQ(one.grad, std::vector{4.0});
  const auto two = mse_loss(std::vector{1.0, 3.0}, std::vector{0.0, 0.0});
  EXPECT_EQ(two.loss, 5.0);
  EXPECT_EQ(two.grad, (std::vector{1.0, 3.0}));
  EXPECT_THROW(mse_loss(std::vector{1.0}, std::vector{1.0, 2.0}), DimensionError);
  EXPECT_THROW(mse_loss(std::vector<double>{}, std::vector<double>{}), DimensionError);
}

TEST(AdamStep, ZeroGradientIsAFixedPoint) {
  Rng rng(4);
  Matrix p = oracle::random_matrix(3, 3, rng);
  const Matrix before = p;
  const Matrix g(3, 3);
  std::vector<Matrix*> ps{&p};
  std::vector<const Matrix*> gs{&g};
  AdamState s = AdamState::zeros_like(ps);
  for (int i = 0; i < 5; ++i) adam_step(ps, gs, s, TrainConfig{});
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.t, 5u);
}

TEST(AdamStep, FirstStepMovesByLearningRate) {
  Matrix p = Matrix::column({1.0});
  const Matrix g = Matrix::column({2.0});
  std::vector<Matrix*> ps{&p};
  std::vector<const Matrix*> gs{&g};
  AdamState s = AdamState::zeros_like(ps);
  adam_step(ps, gs, s, TrainConfig{});
  // m_hat = 2, v_hat = 4: 1 - 1e-4 * 2 / (2 + 1e-8)
  EXPECT_NEAR(p[0], 0.9999000000005, 1e-7);
  const double first = 1.0 - p[0];
  const double before = p[0];
  adam_step(ps, gs, s, TrainConfig{});
  const double second = before - p[0];
  EXPECT_LE(first, 1e-4 * (1 + 1e-6));
  EXPECT_LE(second, 1e-4 * (1 + 1e-6));
  EXPECT_GT(second, 0.0);
}

TEST(AdamStep, SecondMomentStaysNonNegative) {
  Rng rng(8);
  Matrix p = oracle::random_matrix(4, 2, rng);
  std::vector<Matrix*> ps{&p};
  AdamState s = AdamState::zeros_like(ps);
  for (int i = 0; i < 20; ++i) {
    const Matrix g = oracle::random_matrix(4, 2, rng, 3.0);
    std::vector<const Matrix*> gs{&g};
    adam_step(ps, gs, s, TrainConfig{});
    for (double v : s.v[0].data()) ASSERT_GE(v, 0.0);
  }
}

TEST(ClipGlobalNorm, PostClipNormBounded) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix a = oracle::random_matrix(3, 4, rng, 10.0), b = oracle::random_matrix(5, 1, rng, 10.0);
    std::vector<Matrix*> gs{&a, &b};
    const double limit = rng.uniform(0.1, 20.0);
    clip_global_norm(gs, limit);
    const std::vector<const Matrix*> view{&a, &b};
    EXPECT_LE(global_norm(view), limit + 1e-12);
  }
}

// --- training --------------------------------------------------------------

TEST(Train, LearnsNoiselessTarget) {
  Rng rng(21);
  const SequenceDataset data = random_dataset(256, 4, 2, rng);
  Model model = build_model(tiny("gru(4) > dense(1,linear)", 2, 4), rng);
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.seed = 5;
  const auto result = train(std::move(model), data, cfg);
  ASSERT_EQ(result.history.epochs.size(), 20u);
  EXPECT_LT(result.history.epochs.back().train_loss, 0.1 * result.history.epochs.front().train_loss);
}

TEST(Train, RejectsInvalidConfigAndData) {
  Rng rng(1);
  Model model = build_model(tiny("gru(2) > dense(1,linear)", 2, 4), rng);
  TrainConfig cfg;
  cfg.epochs = 0;
  const SequenceDataset data = random_dataset(8, 4, 2, rng);
  EXPECT_THROW(train(model, data, cfg), ConfigError);
  EXPECT_THROW(train(model, SequenceDataset{}, TrainConfig{}), DataError);
  EXPECT_THROW(train(model, random_dataset(8, 3, 2, rng), TrainConfig{}), DimensionError);
  cfg = TrainConfig{};
  cfg.clip_norm = 0.0;
  EXPECT_THROW(train(model, data, cfg), ConfigError);
}

TEST(Train, SameSeedSameHistoryAndParameters) {
  Rng rng(31);
  const SequenceDataset data = random_dataset(100, 5, 3, rng);
  const ModelSpec spec = preset("lstm-gru", 3, 5, {6, 4, 4, 0.2});
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e-3;
  cfg.seed = 77;
  Rng a(1), b(1);
  const auto r1 = train(build_model(spec, a), data, cfg, &data);
  const auto r2 = train(build_model(spec, b), data, cfg, &data);
  EXPECT_EQ(r1.history.to_csv(), r2.history.to_csv());
  EXPECT_TRUE(bitwise_equal(r1.model.params, r2.model.params));
  EXPECT_TRUE(r1.history.epochs.front().dir_acc.has_value());
}

TEST(Train, DivergenceIsReported) {
  Rng rng(2);
  SequenceDataset data = random_dataset(16, 3, 2, rng);
  for (double& t : data.targets) t = 1e200;
  Model model = build_model(tiny("rnn(2) > dense(1,linear)", 2, 3), rng);
  TrainConfig cfg;
  cfg.epochs = 2;
  std::vector<EpochRecord> seen;
  try {
    train(model, data, cfg, nullptr, [&](const EpochRecord& r) { seen.push_back(r); });
    FAIL() << "expected divergence";
  } catch (const TrainingDivergedError& e) {
    EXPECT_EQ(e.epoch(), 1u);
    EXPECT_EQ(e.batch(), 0u);
  }
}

// --- gradient check --------------------------------------------------------

TEST(GradCheck, TinyGruModel) {
  Rng rng(40);
  const Model m = build_model(tiny("gru(5) > dense(3,relu) > dense(1,linear)"), rng);
  const auto report = grad_check(m, oracle::random_matrix(4, 3, rng), 0.3, 1e-5);
  EXPECT_LT(report.max_error(), 1e-4);
  EXPECT_TRUE(report.passed());
  EXPECT_EQ(report.layers.size(), 3u);
}

TEST(GradCheck, TinyLstmModel) {
  Rng rng(41);
  const Model m = build_model(tiny("lstm(5,relu) > dropout(0.2) > dense(1,linear)"), rng);
  const auto report = grad_check(m, oracle::random_matrix(4, 3, rng), -0.2, 1e-5);
  EXPECT_LT(report.max_error(), 1e-4);
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
  Rng rng(42);
  const Model m = build_model(tiny("gru(4) > dense(1,linear)"), rng);
  GradCheckOptions opts;
  opts.corrupt_backward = true;
  const auto report = grad_check(m, oracle::random_matrix(4, 3, rng), 0.5, 1e-5, opts);
  EXPECT_GT(report.max_error(), 1e-1);
  EXPECT_FALSE(report.passed());
}

TEST(GradCheck, EpsilonRange) {
  Rng rng(1);
  const Model m = build_model(tiny("gru(2) > dense(1,linear)"), rng);
  EXPECT_THROW(grad_check(m, Matrix(4, 3), 0.0, 1e-8), ConfigError);
  EXPECT_THROW(grad_check(m, Matrix(4, 3), 0.0, 1e-2), ConfigError);
}

TEST(GradCheck, ReducedWidthPresetsAgainstTestOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_LT(full_model_error(preset("paper", 4, 5, {8, 8, 4, 0.2}), 500 + seed), 1e-4);
    EXPECT_LT(full_model_error(preset("lstm-gru", 4, 5, {8, 8, 4, 0.2}), 600 + seed), 1e-4);
    EXPECT_LT(full_model_error(tiny("rnn(6,relu) > dropout(0.1) > gru(5) > dense(1,linear)", 3, 6),
                               700 + seed),
              1e-4);
  }
}

// --- checkpoint ------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitwise) {
  Rng rng(55);
  const Model m = build_model(preset("lstm-gru", 5, 7, {6, 4, 3, 0.2}), rng);
  std::stringstream ss;
  save_checkpoint(ss, m, 1234);
  const std::string text = ss.str();
  const Checkpoint ck = load_checkpoint(ss);
  EXPECT_EQ(ck.seed, 1234u);
  EXPECT_EQ(ck.model.spec, m.spec);
  EXPECT_TRUE(bitwise_equal(ck.model.params, m.params));
  std::stringstream again;
  save_checkpoint(again, ck.model, ck.seed);
  EXPECT_EQ(again.str(), text);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  Rng rng(56);
  const Model m = build_model(tiny("gru(2) > dense(1,linear)", 2, 2), rng);
  std::stringstream ss;
  save_checkpoint(ss, m, 1);
  std::string text = ss.str();

  std::stringstream bad_magic("not-a-checkpoint\n");
  EXPECT_THROW(load_checkpoint(bad_magic), ParseError);

  std::string truncated = text.substr(0, text.size() / 2);
  truncated = truncated.substr(0, truncated.rfind('\n') + 1);
  std::stringstream t(truncated);
  EXPECT_THROW(load_checkpoint(t), ParseError);

  std::string shape = text;
  shape.replace(shape.find("reset.weight 2 4"), 16, "reset.weight 3 4");
  std::stringstream s(shape);
  EXPECT_THROW(load_checkpoint(s), ParseError);
}
