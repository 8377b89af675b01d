#include <cmath>
#include <cstring>
#include <numeric>

#include <gtest/gtest.h>

#include "milsurv/error.hpp"
#include "milsurv/ops.hpp"
#include "milsurv/tensor.hpp"

using namespace milsurv;
using Td = Tensor<double>;

namespace {

Td random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1, double hi = 1) {
  Td t({r, c});
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::io;
}

}  // namespace

TEST(Tensor, ShapeAndStorage) {
  Td t({2, 3}, 1.5);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.size(), 6u);
  Td alias = t;
  alias.values()[0] = 7;
  EXPECT_EQ(t.values()[0], 7);
  Td copy = t.clone();
  copy.values()[0] = 0;
  EXPECT_EQ(t.values()[0], 7);
  EXPECT_FALSE(copy.same_storage(t));
  EXPECT_EQ(kind_of([] { Td bad({2, 2}, std::vector<double>{1, 2, 3}); }), ErrorKind::dimension);
}

TEST(Tensor, CastPreservesValues) {
  const auto t = Td::matrix(1, 3, {0.5, -2.0, 3.25});
  const auto f = t.cast<float>();
  EXPECT_EQ(f.shape(), t.shape());
  EXPECT_FLOAT_EQ(f.values()[1], -2.0f);
}

TEST(Linear, IdentityWeights) {
  Tape<double> tape;
  const auto y = ops::linear(tape, Td::matrix(1, 2, {1, 2}), Td::matrix(2, 2, {1, 0, 0, 1}), Td({2}, 0.0));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1, 2}));
}

TEST(Linear, BasisVectorsSelectRows) {
  Tape<double> tape;
  const auto y = ops::linear(tape, Td::matrix(2, 2, {1, 0, 0, 1}), Td::matrix(2, 2, {3, 4, 5, 6}),
                             Td({2}, std::vector<double>{1, 1}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{4, 5, 6, 7}));
}

TEST(Linear, ShapeMismatchIsDimensionError) {
  Tape<double> tape;
  EXPECT_EQ(kind_of([&] { ops::linear(tape, Td({1, 3}), Td({2, 2})); }), ErrorKind::dimension);
}

TEST(Linear, NonFiniteInputRejected) {
  Tape<double> tape;
  Td x = Td::matrix(1, 2, {1, NAN});
  EXPECT_EQ(kind_of([&] { ops::linear(tape, x, Td({2, 2})); }), ErrorKind::non_finite);
}

TEST(Activation, Relu) {
  Tape<double> tape;
  const auto y = ops::relu(tape, Td::row({-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Activation, SoftmaxOfZerosIsUniform) {
  Tape<double> tape;
  const auto y = ops::softmax(tape, Td::row({0, 0, 0}), 1);
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Activation, ParseRejectsUnknownNames) {
  EXPECT_EQ(ops::parse_activation("tanh"), ops::Activation::tanh);
  EXPECT_EQ(kind_of([] { ops::parse_activation("gelu"); }), ErrorKind::configuration);
  EXPECT_EQ(kind_of([] { ops::parse_reduce("median"); }), ErrorKind::configuration);
  Tape<double> tape;
  EXPECT_EQ(kind_of([&] { ops::softmax(tape, Td::row({1, 2}), 3); }), ErrorKind::configuration);
}

TEST(Activation, SoftmaxRowsSumToOneProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    const auto x = random_matrix(rng, 1 + trial % 5, 1 + trial % 7, -30, 30);
    for (int axis : {0, 1}) {
      const auto y = ops::softmax(tape, x, axis);
      const std::size_t outer = axis == 1 ? y.rows() : y.cols();
      const std::size_t inner = axis == 1 ? y.cols() : y.rows();
      for (std::size_t o = 0; o < outer; ++o) {
        double total = 0;
        for (std::size_t i = 0; i < inner; ++i) total += axis == 1 ? y.at(o, i) : y.at(i, o);
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
    }
  }
}

TEST(Reduce, MeanAndMax) {
  Tape<double> tape;
  const auto x = Td::matrix(2, 2, {1, 3, 3, 5});
  const auto mean = ops::reduce(tape, x, ops::Reduce::mean);
  const auto max = ops::reduce(tape, x, ops::Reduce::max);
  EXPECT_EQ(mean.shape(), (Shape{1, 2}));
  EXPECT_EQ(std::vector<double>(mean.values().begin(), mean.values().end()), (std::vector<double>{2, 4}));
  EXPECT_EQ(std::vector<double>(max.values().begin(), max.values().end()), (std::vector<double>{3, 5}));
}

TEST(Reduce, MaxTieRoutesGradientToFirstRow) {
  Tape<double> tape;
  Td x = Td::matrix(2, 1, {2, 2});
  x.set_requires_grad();
  tape.backward(ops::sum(tape, ops::reduce(tape, x, ops::Reduce::max)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tape<double> tape;
  const auto y = ops::layer_norm(tape, Td::matrix(1, 4, {3, 3, 3, 3}), Td({4}, 1.0), Td({4}, 0.0));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizedRowIsUnchangedUpToEps) {
  Tape<double> tape;
  const auto y = ops::layer_norm(tape, Td::matrix(1, 2, {1, -1}), Td({2}, 1.0), Td({2}, 0.0));
  EXPECT_NEAR(y.values()[0], 1.0, 1e-5);
  EXPECT_NEAR(y.values()[1], -1.0, 1e-5);
}

TEST(LayerNorm, RowStatisticsProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Tape<double> tape;
    const auto x = random_matrix(rng, 4, 8, -10, 10);
    const auto y = ops::layer_norm(tape, x, Td({8}, 1.0), Td({8}, 0.0));
    for (std::size_t r = 0; r < 4; ++r) {
      double mean = 0, var = 0;
      for (std::size_t c = 0; c < 8; ++c) mean += y.at(r, c) / 8;
      for (std::size_t c = 0; c < 8; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 8;
      EXPECT_LT(std::abs(mean), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-4);
    }
  }
}

TEST(Dropout, RateZeroAndEvaluationAreIdentity) {
  Tape<double> tape;
  Rng rng(1);
  const auto x = Td::matrix(1, 3, {1, 2, 3});
  EXPECT_TRUE(ops::dropout(tape, x, 0.0, rng, true).same_storage(x));
  EXPECT_TRUE(ops::dropout(tape, x, 0.9, rng, false).same_storage(x));
  EXPECT_EQ(kind_of([&] { ops::dropout(tape, x, 1.0, rng, true); }), ErrorKind::configuration);
}

TEST(Dropout, MonteCarloSurvivorFractionAndMean) {
  Tape<double> tape;
  Rng rng(2024);
  const Td x({100, 100}, 1.0);
  const auto y = ops::dropout(tape, x, 0.25, rng, true);
  double kept = 0, total = 0;
  for (double v : y.values()) {
    kept += v != 0.0;
    total += v;
  }
  const double fraction = kept / 10000.0;
  EXPECT_GE(fraction, 0.72);
  EXPECT_LE(fraction, 0.78);
  EXPECT_NEAR(total / 10000.0, 1.0, 0.03);
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  Td x({3, 2}, 0.7);
  x.set_requires_grad();
  tape.backward(ops::sum(tape, x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, TwoCallsDoubleTheGradient) {
  Rng rng(3);
  Tape<double> tape;
  Td x = random_matrix(rng, 3, 4);
  Td w = random_matrix(rng, 4, 2);
  w.set_requires_grad();
  const auto loss = ops::sum(tape, ops::tanh(tape, ops::matmul(tape, x, w)));
  tape.backward(loss);
  const std::vector<double> once(w.grad().begin(), w.grad().end());
  tape.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(w.grad()[i], 2 * once[i]);
}

TEST(Backward, LinearityProperty) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_matrix(rng, 3, 4);
    const auto w0 = random_matrix(rng, 4, 3);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    auto grad_of = [&](double ca, double cb) {
      Td w = w0.clone();
      w.set_requires_grad();
      Tape<double> tape;
      const auto h = ops::matmul(tape, x, w);
      const auto l1 = ops::sum(tape, ops::sigmoid(tape, h));
      const auto l2 = ops::sum(tape, ops::mul(tape, h, h));
      tape.backward(ops::add(tape, ops::affine(tape, l1, ca, 0.0), ops::affine(tape, l2, cb, 0.0)));
      return std::vector<double>(w.grad().begin(), w.grad().end());
    };
    const auto combined = grad_of(a, b);
    const auto g1 = grad_of(1, 0);
    const auto g2 = grad_of(0, 1);
    for (std::size_t i = 0; i < combined.size(); ++i) {
      const double expected = a * g1[i] + b * g2[i];
      EXPECT_LE(std::abs(combined[i] - expected), 1e-12 * std::max(1.0, std::abs(expected)));
    }
  }
}

TEST(Backward, BitwiseDeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(99);
    Tape<double> tape;
    Td x = random_matrix(rng, 6, 5);
    Td w = random_matrix(rng, 5, 4);
    w.set_requires_grad();
    Rng drop(7);
    const auto h = ops::dropout(tape, ops::relu(tape, ops::matmul(tape, x, w)), 0.25, drop, true);
    const auto loss = ops::sum(tape, ops::softmax(tape, h, 1));
    tape.backward(ops::add(tape, loss, ops::abs_sum(tape, w)));
    std::vector<double> out(h.values().begin(), h.values().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(double)));
}

TEST(Backward, RejectsNonScalarOrConstantLoss) {
  Tape<double> tape;
  Td x({2, 2}, 1.0);
  x.set_requires_grad();
  const auto y = ops::relu(tape, x);
  EXPECT_EQ(kind_of([&] { tape.backward(y); }), ErrorKind::contract);
  EXPECT_EQ(kind_of([&] { tape.backward(Td::scalar(1.0)); }), ErrorKind::contract);
}

TEST(Backward, NonRecordingTapeKeepsNoNodes) {
  Tape<double> tape(false);
  Td x({2, 2}, 1.0);
  x.set_requires_grad();
  const auto y = ops::sum(tape, ops::relu(tape, x));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Shapes, ConcatSliceGatherRoundTrip) {
  Rng rng(8);
  Tape<double> tape;
  const auto a = random_matrix(rng, 2, 3), b = random_matrix(rng, 3, 3);
  const std::vector<Td> parts{a, b};
  const auto rows = ops::concat_rows(tape, std::span<const Td>(parts));
  const auto back = ops::slice_rows(tape, rows, 2, 3);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(back.values()[i], b.values()[i]);
  const auto g = ops::gather_rows(tape, a, {1, 1, 0});
  EXPECT_EQ(g.at(0, 2), a.at(1, 2));
  EXPECT_EQ(g.at(2, 0), a.at(0, 0));
  EXPECT_EQ(kind_of([&] { ops::gather_rows(tape, a, {2}); }), ErrorKind::dimension);
  EXPECT_EQ(kind_of([&] { ops::slice_cols(tape, a, 2, 2); }), ErrorKind::dimension);
}

TEST(Cumprod, MatchesDirectProduct) {
  Tape<double> tape;
  const auto y = ops::cumprod(tape, Td::matrix(1, 4, {0.5, 0.8, 0.9, 0.1}));
  EXPECT_DOUBLE_EQ(y.values()[3], 0.5 * 0.8 * 0.9 * 0.1);
}

TEST(PinvInit, ScalesTransposeByNorms) {
  Tape<double> tape;
  const auto a = Td::matrix(2, 2, {1, 2, 3, 4});
  const auto z = ops::pinv_init(tape, a);
  // max row abs-sum 7, max column abs-sum 6
  EXPECT_DOUBLE_EQ(z.at(0, 1), 3.0 / 42.0);
  EXPECT_DOUBLE_EQ(z.at(1, 0), 2.0 / 42.0);
}
