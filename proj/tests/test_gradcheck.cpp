#include <gtest/gtest.h>

#include "milsurv/checks.hpp"
#include "milsurv/gradcheck.hpp"
#include "milsurv/ops.hpp"
#include "milsurv/survival.hpp"

using namespace milsurv;
using Td = Tensor<double>;

namespace {

Td random_matrix(Rng& rng, Shape shape) {
  Td t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-1, 1);
  return t;
}

}  // namespace

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error(1e-3, 2e-3), 1e-3);
  EXPECT_DOUBLE_EQ(relative_error(100, 101), 1.0 / 101);
}

TEST(GradCheck, LinearLayerSumBelow1e8) {
  Rng rng(1);
  const auto x = random_matrix(rng, {3, 4});
  const auto w = random_matrix(rng, {4, 2});
  const auto report =
      grad_check([&](Tape<double>& t) { return ops::sum(t, ops::linear(t, x, w)); }, {{"W", w}}, 1e-5, 1e-8);
  EXPECT_TRUE(report.passed()) << report.max_error();
}

TEST(GradCheck, SigmoidAtPointThreeBelow1e8) {
  const auto x = Td::row({0.3});
  const auto report = grad_check([&](Tape<double>& t) { return ops::sum(t, ops::sigmoid(t, x)); }, {{"x", x}}, 1e-5, 1e-8);
  EXPECT_TRUE(report.passed()) << report.max_error();
}

TEST(GradCheck, SoftmaxNllComposite) {
  Rng rng(2);
  const auto logits = random_matrix(rng, {1, 4});
  const auto report = grad_check(
      [&](Tape<double>& t) { return nll_loss(t, ops::log(t, ops::softmax(t, logits, 1)), 1, false); },
      {{"logits", logits}}, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed()) << report.max_error();
}

TEST(GradCheck, CompositeMlpEveryParameter) {
  Rng rng(3);
  const auto x = random_matrix(rng, {5, 6});
  const auto w1 = random_matrix(rng, {6, 4}), b1 = random_matrix(rng, {4});
  const auto w2 = random_matrix(rng, {4, 4}), b2 = random_matrix(rng, {4});
  const auto report = grad_check(
      [&](Tape<double>& t) {
        const auto h = ops::tanh(t, ops::linear(t, x, w1, b1));
        const auto pooled = ops::reduce(t, ops::linear(t, h, w2, b2), ops::Reduce::mean);
        return nll_loss(t, pooled, 3, true);
      },
      {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}}, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed()) << report.max_error();
  EXPECT_EQ(report.entries.size(), 4u);
}

TEST(GradCheck, LayerNormRandom4x8) {
  Rng rng(4);
  const auto x = random_matrix(rng, {4, 8});
  Td gain({8}, 1.0), shift({8}, 0.0);
  const auto wsum = random_matrix(rng, {4, 8});
  const auto report = grad_check(
      [&](Tape<double>& t) { return ops::sum(t, ops::mul(t, ops::layer_norm(t, x, gain, shift), wsum)); },
      {{"x", x}, {"gain", gain}, {"shift", shift}}, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed()) << report.max_error();
}

TEST(GradCheck, CorruptedGradientIsReported) {
  // A hand-made op whose backward adds a +0.01 bias to the true gradient.
  const auto x = Td::matrix(1, 3, {0.1, -0.4, 0.7});
  auto corrupted_square_sum = [](Tape<double>& t, const Td& in) {
    Td out = Td::scalar(0.0);
    double total = 0;
    for (double v : in.values()) total += v * v;
    out.values()[0] = total;
    if (t.wants_grad({&in})) {
      t.record(out, {in}, [in](std::span<const double> g, std::span<std::vector<double>* const> gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < in.size(); ++i) (*gin[0])[i] += g[0] * (2 * in.values()[i] + 0.01);
      });
    }
    return out;
  };
  const auto report = grad_check([&](Tape<double>& t) { return corrupted_square_sum(t, x); }, {{"x", x}}, 1e-5, 1e-6);
  EXPECT_FALSE(report.passed());
  EXPECT_GT(report.max_error(), 1e-6);
  EXPECT_NEAR(report.max_error(), 0.01, 1e-6);
}

TEST(GradCheck, NonFiniteObjectiveFailsWithoutThrowing) {
  const auto x = Td::row({-1.0});
  const auto report = grad_check([&](Tape<double>& t) { return ops::sum(t, ops::log(t, x)); }, {{"x", x}});
  EXPECT_FALSE(report.passed());
}

TEST(GradCheck, FullSuitePassesAtDefaultTolerances) {
  const auto suite = gradcheck_suite(0);
  ASSERT_FALSE(suite.empty());
  int heads = 0;
  for (const auto& e : suite) {
    EXPECT_TRUE(e.report.passed()) << e.name << " " << e.report.max_error();
    heads += e.scope == CheckScope::head;
  }
  EXPECT_EQ(heads, 4);
}
