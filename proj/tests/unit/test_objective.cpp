#include <cmath>

#include <gtest/gtest.h>

#include "gradmask/error.hpp"
#include "gradmask/objective.hpp"
#include "gradmask/rng.hpp"

using namespace gradmask;
using ad::Tensor;

namespace {

// f = w . x on a one-lead, two-sample signal.
LogitFn linear_model(const Tensor& w) {
  return [w](const Tensor& x) {
    return ad::matmul(ad::reshape(x, {x.dim(0), 2}), w);
  };
}

SignalExample example(std::vector<double> signal, std::vector<int> labels,
                      std::size_t leads, std::size_t samples) {
  return SignalExample{.id = "e", .leads = leads, .samples = samples,
                       .signal = std::move(signal), .labels = std::move(labels)};
}

ModelConfig small_config() {
  ModelConfig c;
  c.in_leads = 2;
  c.n_classes = 2;
  c.blocks = {InceptionBlock{{3, 5}, 2, 2}};
  return c;
}

std::vector<SignalExample> random_examples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SignalExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(2 * 12);
    for (auto& v : s) v = rng.normal();
    auto ex = example(s, {rng.bernoulli(0.5) ? 1 : -1, rng.bernoulli(0.5) ? 1 : -1},
                      2, 12);
    ex.id = "r" + std::to_string(i);
    if (i % 2 == 0) {
      const std::size_t start = rng.below(8);
      ex.mask = MaskSet({{rng.below(2), start, start + 4}}, 2, 12);
    }
    out.push_back(ex);
  }
  return out;
}

std::vector<const SignalExample*> pointers(const std::vector<SignalExample>& v) {
  std::vector<const SignalExample*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

}  // namespace

TEST(LogisticLoss, ZeroLogitsGiveKLn2) {
  const Tensor f = Tensor::zeros({1, 71});
  const Tensor y = Tensor::full({1, 71}, -1);
  EXPECT_NEAR(logistic_loss(f, y).item(), 49.2134498197561, 1e-12);
  EXPECT_NEAR(logistic_loss(f, y).item(), 71 * std::log(2.0), 1e-12);
}

TEST(LogisticLoss, TwoLabelValue) {
  const Tensor f = Tensor::constant({1, 2}, {1, -1});
  const Tensor y = Tensor::constant({1, 2}, {1, 1});
  const double oracle = std::log1p(std::exp(-1.0)) + std::log1p(std::exp(1.0));
  EXPECT_NEAR(logistic_loss(f, y).item(), oracle, 1e-15);
  EXPECT_NEAR(oracle, 1.6265233, 1e-7);
}

TEST(LogisticLoss, ConfidentCorrectIsTiny) {
  const Tensor f = Tensor::constant({1, 2}, {50, -50});
  const Tensor y = Tensor::constant({1, 2}, {1, -1});
  const double v = logistic_loss(f, y).item();
  EXPECT_GT(v, 0.0);
  EXPECT_LT(v, 2e-20);
}

TEST(Penalty, FullMaskAndZeroLambdaGiveZero) {
  const Tensor w = Tensor::leaf({2, 1}, {1, 2});
  auto ex = example({0.3, -0.7}, {1}, 1, 2);
  ex.mask = MaskSet({{0, 0, 2}}, 1, 2);
  EXPECT_EQ(penalty(linear_model(w), ex, 1.0).item(), 0.0);
  ex.mask = MaskSet({{0, 0, 1}}, 1, 2);
  EXPECT_EQ(penalty(linear_model(w), ex, 0.0).item(), 0.0);
  ex.mask.reset();
  EXPECT_THROW(penalty(linear_model(w), ex, 1.0), ValidationError);
}

TEST(Penalty, LinearWorkedExample) {
  const Tensor w = Tensor::leaf({2, 1}, {1, 2});
  const auto model = linear_model(w);
  auto ex = example({0, 0}, {1}, 1, 2);
  ex.mask = MaskSet({{0, 0, 1}}, 1, 2);

  // Finite-difference oracle for d loss / d x_1 at x = 0.
  const double h = 1e-6;
  auto loss_at = [&](double x1) {
    return logistic_loss(model, example({0, x1}, {1}, 1, 2)).item();
  };
  const double g1 = (loss_at(h) - loss_at(-h)) / (2 * h);
  EXPECT_NEAR(g1, -1.0, 1e-8);

  EXPECT_NEAR(penalty(model, ex, 0.1).item(), 0.1 * g1 * g1, 1e-9);
  EXPECT_DOUBLE_EQ(penalty(model, ex, 0.1).item(), 0.1);
  const SignalExample* one[] = {&ex};
  const double total = objective_batch(model, one, {0.1, Reduction::kSum}).item();
  EXPECT_NEAR(total, std::log(2.0) + 0.1, 1e-15);
  EXPECT_NEAR(total, 0.7931471, 1e-7);
}

TEST(Penalty, LinearInLambdaAndNonNegative) {
  const auto c = small_config();
  const auto p = init_params(c);
  const auto model = as_logit_fn(c, p);
  for (const auto& ex : random_examples(10, 3)) {
    if (!ex.mask) continue;
    const double a = penalty(model, ex, 0.7).item();
    const double b = penalty(model, ex, 1.4).item();
    EXPECT_GE(a, 0.0);
    EXPECT_NEAR(b, 2 * a, 1e-14 * std::max(1.0, b));
  }
}

// For f = w.x the input gradient does not depend on x, so changing x inside
// the mask leaves the penalty unchanged when the loss term is held fixed.
TEST(Penalty, LinearModelInvariantToValuesInsideMask) {
  const Tensor w = Tensor::leaf({2, 1}, {0.4, -1.3});
  const auto model = linear_model(w);
  auto a = example({0.0, 0.0}, {1}, 1, 2);
  a.mask = MaskSet({{0, 0, 1}}, 1, 2);
  // Keep w.x fixed so sigma(-y f) is unchanged.
  auto b = example({1.3, 0.4}, {1}, 1, 2);
  b.mask = a.mask;
  EXPECT_NEAR(penalty(model, a, 1.0).item(), penalty(model, b, 1.0).item(), 1e-15);
}

TEST(Objective, ZeroLambdaIsBitwiseMaskFree) {
  const auto c = small_config();
  const auto p = init_params(c);
  const auto model = as_logit_fn(c, p);
  const auto exs = random_examples(6, 1);
  auto stripped = exs;
  for (auto& e : stripped) e.mask.reset();
  const auto with = objective_batch(model, pointers(exs), {0.0, Reduction::kMean});
  const auto without =
      objective_batch(model, pointers(stripped), {0.0, Reduction::kMean});
  EXPECT_EQ(with.item(), without.item());
  const auto g1 = ad::grad(with, p.tensors());
  const auto g2 = ad::grad(without, p.tensors());
  for (std::size_t i = 0; i < g1.size(); ++i) {
    for (std::size_t j = 0; j < g1[i].numel(); ++j) {
      ASSERT_EQ(g1[i].at(j), g2[i].at(j));
    }
  }
}

TEST(Objective, DecomposesIntoPerExampleTerms) {
  const auto c = small_config();
  const auto p = init_params(c);
  const auto model = as_logit_fn(c, p);
  const auto exs = random_examples(5, 2);
  double expected = 0;
  for (const auto& e : exs) {
    expected += logistic_loss(model, e).item();
    if (e.mask) expected += penalty(model, e, 0.5).item();
  }
  const double sum = objective_batch(model, pointers(exs), {0.5, Reduction::kSum}).item();
  const double mean = objective_batch(model, pointers(exs), {0.5, Reduction::kMean}).item();
  EXPECT_NEAR(sum, expected, 1e-12);
  EXPECT_NEAR(mean, expected / 5, 1e-12);
}

// The full objective, penalty included, differentiated with respect to the
// parameters against central differences.
TEST(Objective, ParameterGradientMatchesFiniteDifferences) {
  const auto c = small_config();
  const auto exs = random_examples(4, 9);
  for (double lambda : {0.01, 0.1, 1.0, 10.0}) {
    const auto p = init_params(c);
    const ad::ScalarFn f = [&](const std::vector<Tensor>& leaves) {
      ModelParams q;
      for (std::size_t i = 0; i < leaves.size(); ++i) q.add(p.name(i), leaves[i]);
      return objective_batch(as_logit_fn(c, q), pointers(exs),
                             {lambda, Reduction::kMean});
    };
    const auto r = ad::grad_check(f, p.tensors(), {1, 0, 0});
    EXPECT_LT(r.max_rel_error, 1e-5) << "lambda " << lambda << " "
                                     << p.name(r.worst_leaf);
  }
}
