#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "gradmask/error.hpp"
#include "gradmask/json_util.hpp"
#include "gradmask/synthetic.hpp"
#include "gradmask/trainer.hpp"
#include "test_util.hpp"

using namespace gradmask;
using ad::Tensor;

namespace {

SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.n_examples = 60;
  s.n_validation = 16;
  s.n_test = 4;
  s.leads = 2;
  s.samples = 32;
  s.n_classes = 2;
  s.evidence_window_len = 8;
  s.feedback_fraction = 0.3;
  return s;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.in_leads = 2;
  c.n_classes = 2;
  c.blocks = {InceptionBlock{{3, 7}, 3, 3}};
  return c;
}

TrainConfig tiny_train(std::size_t epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 16;
  t.lambda = 1.0;
  return t;
}

ModelParams scalar_param(double v) {
  ModelParams p;
  p.add("theta", Tensor::leaf({1}, {v}));
  return p;
}

}  // namespace

TEST(Adam, ZeroGradientIsFixedPoint) {
  auto p = scalar_param(0.7);
  auto s = AdamState::zeros_like(p);
  adam_step(p, {Tensor::zeros({1})}, s, TrainConfig{});
  EXPECT_EQ(p.tensor(0).at(0), 0.7);
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, OneStepHandComputation) {
  auto p = scalar_param(1.0);
  auto s = AdamState::zeros_like(p);
  adam_step(p, {Tensor::constant({1}, {1.0})}, s, TrainConfig{});
  // Bias correction gives m_hat = v_hat = 1.
  EXPECT_NEAR(p.tensor(0).at(0), 1.0 - 0.002 * 1.0 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, TwoStepMoments) {
  auto p = scalar_param(1.0);
  auto s = AdamState::zeros_like(p);
  for (int i = 0; i < 2; ++i) adam_step(p, {Tensor::constant({1}, {1.0})}, s, TrainConfig{});
  EXPECT_EQ(s.t, 2u);
  EXPECT_NEAR(s.m[0][0], 0.19, 1e-15);
  EXPECT_NEAR(s.v[0][0], 0.001999, 1e-15);
}

TEST(Adam, NonFiniteGradientNamesParameterAndLeavesValues) {
  auto p = scalar_param(1.0);
  p.add("other", Tensor::leaf({2}, {1, 2}));
  auto s = AdamState::zeros_like(p);
  try {
    adam_step(p, {Tensor::constant({1}, {0.5}), Tensor::constant({2}, {0, NAN})}, s,
              TrainConfig{}, "epoch 3 batch 7: ");
    FAIL();
  } catch (const NonFiniteError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 3 batch 7"), std::string::npos);
    EXPECT_NE(msg.find("'other'"), std::string::npos);
  }
  EXPECT_EQ(p.tensor(0).at(0), 1.0);
  EXPECT_EQ(s.t, 0u);
}

TEST(TrainConfig, JsonOverrideAndValidation) {
  TrainConfig c;
  from_json(nlohmann::json{{"lr", 0.01}, {"selection_metric", "fmax"}}, c);
  EXPECT_EQ(c.lr, 0.01);
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_EQ(c.selection, SelectionMetric::kFmax);
  EXPECT_THROW(from_json(nlohmann::json{{"learning_rate", 1}}, c), ValidationError);
  c.lr = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  const TrainConfig d;
  EXPECT_EQ(nlohmann::json(nlohmann::json(d).get<TrainConfig>()), nlohmann::json(d));
}

TEST(Train, ZeroLambdaMatchesMaskStrippedBitForBit) {
  const auto data = generate_synthetic(tiny_spec()).manifest;
  ASSERT_GT(data.feedback_count(Split::kTrain), 0u);
  auto cfg = tiny_train(2);
  cfg.lambda = 0.0;
  const auto a = train_run(data, tiny_model(), cfg, 3);
  const auto b = train_run(strip_masks(data), tiny_model(), cfg, 3);
  EXPECT_EQ(encode_checkpoint(a.best), encode_checkpoint(b.best));
  EXPECT_EQ(encode_checkpoint(a.last), encode_checkpoint(b.last));
}

TEST(Train, DeterministicPerSeed) {
  const auto data = generate_synthetic(tiny_spec()).manifest;
  const auto a = train_run(data, tiny_model(), tiny_train(), 1);
  const auto b = train_run(data, tiny_model(), tiny_train(), 1);
  const auto c = train_run(data, tiny_model(), tiny_train(), 2);
  EXPECT_EQ(encode_checkpoint(a.last), encode_checkpoint(b.last));
  ASSERT_EQ(a.manifest.epochs.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.manifest.epochs[e].train_loss, b.manifest.epochs[e].train_loss);
  }
  EXPECT_NE(encode_checkpoint(a.last), encode_checkpoint(c.last));
}

// With one batch per epoch the run is exactly one Adam step from init, and
// the first Adam step is theta - lr * g / (|g| + eps).
TEST(Train, SingleStepMatchesHandAppliedAdam) {
  auto spec = tiny_spec();
  spec.n_examples = 30;
  spec.n_validation = 8;
  spec.n_test = 2;
  const auto data = generate_synthetic(spec).manifest;
  auto cfg = tiny_train(1);
  cfg.batch_size = 64;
  const auto run = train_run(data, tiny_model(), cfg, 9);

  auto model = tiny_model();
  model.seed = init_seed(9);
  const auto init = init_params(model);
  const auto obj = objective_batch(as_logit_fn(model, init), data.split(Split::kTrain),
                                   {cfg.lambda, cfg.reduction});
  const auto g = ad::grad(obj, init.tensors());
  for (std::size_t i = 0; i < init.size(); ++i) {
    for (std::size_t j = 0; j < init.tensor(i).numel(); ++j) {
      const double gj = g[i].at(j);
      const double expected = init.tensor(i).at(j) - cfg.lr * gj / (std::abs(gj) + cfg.eps);
      ASSERT_NEAR(run.last.params.tensor(i).at(j), expected, 1e-12)
          << init.name(i) << "[" << j << "]";
    }
  }
}

TEST(Train, LossDecreasesOnSeparableData) {
  auto spec = tiny_spec();
  spec.n_examples = 200;
  spec.n_validation = 30;
  spec.n_test = 10;
  spec.noise_sigma = 0.05;
  spec.spurious_correlation = 0.0;
  const auto data = generate_synthetic(spec).manifest;
  auto cfg = tiny_train(5);
  cfg.lr = 0.01;
  const auto run = train_run(data, tiny_model(), cfg, 0);
  ASSERT_EQ(run.manifest.epochs.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e) {
    EXPECT_LT(run.manifest.epochs[e].train_loss, run.manifest.epochs[e - 1].train_loss)
        << "epoch " << e + 1;
  }
}

TEST(Train, SelectsEarliestArgmaxAndWritesRunDir) {
  test::TempDir dir;
  const auto data = generate_synthetic(tiny_spec()).manifest;
  TrainOptions opts;
  opts.run_id = "r1";
  opts.run_dir = dir.path() / "runs" / "r1";
  std::size_t callbacks = 0;
  opts.on_epoch = [&](const RunManifest&) { ++callbacks; };
  const auto run = train_run(data, tiny_model(), tiny_train(3), 4, opts);
  EXPECT_EQ(callbacks, 3u);

  const auto& eps = run.manifest.epochs;
  std::size_t argmax = 0;
  for (std::size_t e = 1; e < eps.size(); ++e) {
    if (eps[e].selection_value > eps[argmax].selection_value) argmax = e;
  }
  EXPECT_EQ(run.manifest.selected_epoch, argmax + 1);
  EXPECT_EQ(run.best.meta.epoch, argmax + 1);
  EXPECT_EQ(run.manifest.feedback_count, data.feedback_count(Split::kTrain));

  for (auto f : {"manifest.json", "ckpt-best.gmck", "ckpt-last.gmck"}) {
    EXPECT_TRUE(std::filesystem::exists(*opts.run_dir / f)) << f;
  }
  const auto disk = manifest_from_json(read_json_file(*opts.run_dir / "manifest.json"));
  EXPECT_EQ(disk.status, RunStatus::kCompleted);
  EXPECT_EQ(disk.epochs.size(), 3u);
  EXPECT_EQ(disk.epochs[2].train_loss, eps[2].train_loss);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(*opts.run_dir / "ckpt-best.gmck")),
            encode_checkpoint(run.best));
}

TEST(Train, RejectsEmptySplitsAndShapeMismatch) {
  auto data = generate_synthetic(tiny_spec()).manifest;
  auto no_val = data;
  std::erase_if(no_val.examples,
                [](const SignalExample& e) { return e.split == Split::kValidation; });
  EXPECT_THROW(train_run(no_val, tiny_model(), tiny_train(), 0), ValidationError);
  auto wrong = tiny_model();
  wrong.n_classes = 3;
  EXPECT_THROW(train_run(data, wrong, tiny_train(), 0), ValidationError);
}

// A step size of 1e300 pushes the parameters far enough that a later
// forward pass overflows.
TEST(Train, NonFiniteLossAbortsKeepingLastGoodCheckpoint) {
  test::TempDir dir;
  const auto data = generate_synthetic(tiny_spec()).manifest;
  auto cfg = tiny_train();
  cfg.lr = 1e300;
  TrainOptions opts;
  opts.run_dir = dir.path();
  EXPECT_THROW(train_run(data, tiny_model(), cfg, 0, opts), NonFiniteError);
  const auto disk = manifest_from_json(read_json_file(dir.path() / "manifest.json"));
  EXPECT_EQ(disk.status, RunStatus::kFailed);
  EXPECT_NE(disk.error.find("non-finite"), std::string::npos) << disk.error;
  EXPECT_LT(disk.epochs.size(), cfg.epochs);
  EXPECT_EQ(load_checkpoint(dir.path() / "ckpt-last.gmck").meta.epoch, disk.epochs.size());
}

TEST(Train, CancelFlagStopsBeforeNextEpoch) {
  const auto data = generate_synthetic(tiny_spec()).manifest;
  std::atomic<bool> cancel{false};
  TrainOptions opts;
  opts.cancel = &cancel;
  opts.on_epoch = [&](const RunManifest&) { cancel = true; };
  const auto run = train_run(data, tiny_model(), tiny_train(3), 0, opts);
  EXPECT_EQ(run.manifest.status, RunStatus::kCancelled);
  EXPECT_EQ(run.manifest.epochs.size(), 1u);
}
