// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "msc/gradcheck.hpp"
#include "msc/ops.hpp"

using namespace msc;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Independent triple-loop reference for 2-d products.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Weighted sum so every output entry gets a distinct upstream gradient.
Tensor probe(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m).vec(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
  const auto expect = naive_matmul(a.vec(), b.vec(), 2, 2, 2);
  EXPECT_EQ(expect, (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(matmul(a, b).vec(), expect);

  Rng rng(7);
  auto x = random_tensor({3, 5}, rng, false);
  auto y = random_tensor({5, 4}, rng, false);
  const auto ref = naive_matmul(x.vec(), y.vec(), 3, 5, 4);
  const auto got = matmul(x, y).vec();
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-14);
}

TEST(Matmul, InnerDimensionMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2,3)"), std::string::npos);
    EXPECT_NE(msg.find("(4,3)"), std::string::npos);
  }
}

TEST(Matmul, BroadcastsBatchDimensions) {
  Rng rng(3);
  auto a = random_tensor({2, 3, 4}, rng, false);
  auto b = random_tensor({1, 4, 2}, rng, false);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 2}));
  for (std::size_t t = 0; t < 2; ++t) {
    std::vector<double> at(a.vec().begin() + t * 12, a.vec().begin() + (t + 1) * 12);
    const auto ref = naive_matmul(at, b.vec(), 3, 4, 2);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(c.vec()[t * 6 + i], ref[i], 1e-14);
  }
}

TEST(Softmax, UniformAndClosedForm) {
  auto u = softmax(Tensor::from({3}, {1, 1, 1}));
  for (double v : u.vec()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto s = softmax(Tensor::from({2}, {0.0, std::log(2.0)}));
  EXPECT_NEAR(s.vec()[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.vec()[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 6}, rng, false, -5, 5);
    const double c = rng.uniform(-100, 100);
    auto a = softmax(x, -1);
    auto b = softmax(affine(x, 1.0, c), -1);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.vec()[i], b.vec()[i], 1e-13);
  }
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesAreZero) {
  Rng rng(5);
  auto x = random_tensor({2, 3, 5}, rng, false, -10, 10);
  Mask m{{2, 1, 5}, {1, 1, 0, 1, 0, /**/ 0, 1, 1, 1, 1}};
  auto y = softmax(x, -1, &m);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        const double w = y.at({b, r, j});
        if (!m.keep[b * 5 + j]) {
          EXPECT_EQ(w, 0.0);
        }
        s += w;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, FullyMaskedSliceIsZero) {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  Mask m{{2, 2}, {0, 0, 1, 1}};
  Tape tape;
  TapeScope scope(tape);
  auto y = softmax(x, -1, &m);
  EXPECT_EQ(y.at({0, 0}), 0.0);
  EXPECT_EQ(y.at({0, 1}), 0.0);
  tape.backward(sum(mul(y, Tensor::from({2, 2}, {1, 2, 3, 4}))));
  for (double g : x.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Softmax, NonLastAxis) {
  auto x = Tensor::from({2, 2}, {0.0, 1.0, std::log(2.0), 1.0});
  auto y = softmax(x, 0);
  EXPECT_NEAR(y.at({0, 0}), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.at({1, 0}), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.at({0, 1}), 0.5, 1e-15);
}

TEST(LayerNorm, ConstantInputGivesZeros) {
  auto x = Tensor::full({1, 4}, 3.5);
  auto y = layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-6);
  for (double v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, StandardizedInputIsFixedPoint) {
  auto y = layer_norm(Tensor::from({2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 0.0);
  EXPECT_EQ(y.vec(), (std::vector<double>{1, -1}));
}

TEST(LayerNorm, ZeroGainYieldsBeta) {
  Rng rng(2);
  auto x = random_tensor({3, 4}, rng, false);
  auto beta = Tensor::from({4}, {0.5, -1, 2, 0});
  auto y = layer_norm(x, Tensor::zeros({4}), beta, 1e-6);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y.at({r, j}), beta.vec()[j]);
}

TEST(LayerNorm, MomentsAfterNormalization) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({5, 16}, rng, false, -3, 3);
    auto y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-6);
    for (std::size_t r = 0; r < 5; ++r) {
      double var_in = 0, mu_in = 0;
      for (std::size_t j = 0; j < 16; ++j) mu_in += x.at({r, j}) / 16;
      for (std::size_t j = 0; j < 16; ++j) var_in += std::pow(x.at({r, j}) - mu_in, 2) / 16;
      if (var_in < 1e-3) continue;
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < 16; ++j) mu += y.at({r, j}) / 16;
      for (std::size_t j = 0; j < 16; ++j) var += std::pow(y.at({r, j}) - mu, 2) / 16;
      EXPECT_LT(std::abs(mu), 1e-10);
      EXPECT_LT(std::abs(var - 1.0), 1e-6);
    }
  }
}

TEST(Elementwise, Basics) {
  EXPECT_EQ(relu(Tensor::from({3}, {-1, 0, 2})).vec(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(sigmoid(Tensor::scalar(0)).item(), 0.5);
  EXPECT_EQ(msc::tanh(Tensor::scalar(0)).item(), 0.0);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), DimensionError);
  auto bias = add(Tensor::zeros({2, 3}), Tensor::from({3}, {1, 2, 3}));
  EXPECT_EQ(bias.vec(), (std::vector<double>{1, 2, 3, 1, 2, 3}));
}

TEST(Backward, AnalyticExamples) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  EXPECT_EQ(x.grad(), (std::vector<double>{1, 1, 1}));
  x.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, NonScalarLossIsContractViolation) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  TapeScope scope(tape);
  auto y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractViolation);
}

TEST(Backward, EmptyTapeIsContractViolation) {
  Tape tape;
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0, true)), ContractViolation);
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  auto loss = sum(mul(x, x));
  tape.backward(loss);
  tape.zero_grads();
  tape.backward(loss);
  EXPECT_EQ(x.grad(), (std::vector<double>{4, 8}));
}

TEST(Backward, StoppedRouteBlocksGradient) {
  auto x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  auto r1 = route(x);
  auto r2 = route(x);
  auto loss = add(sum(scale(r1, 3.0)), sum(scale(r2, 5.0)));
  set_gradient_stop(r2, true);
  tape.backward(loss);
  EXPECT_EQ(x.grad(), (std::vector<double>{3, 3}));
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(99);
    auto a = random_tensor({4, 5}, rng);
    auto b = random_tensor({5, 3}, rng);
    Tape tape;
    TapeScope scope(tape);
    auto loss = sum(sigmoid(matmul(a, b)));
    tape.backward(loss);
    auto g = a.grad();
    g.push_back(loss.item());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Embedding, OutOfRangeIdNamesPosition) {
  auto table = Tensor::zeros({4, 2});
  try {
    embedding_lookup(table, {1, 7}, {2});
    FAIL();
  } catch (const IndexError& e) {
    EXPECT_NE(std::string(e.what()).find("position 1"), std::string::npos);
  }
}

// Finite-difference agreement for every primitive, 100 seeds each.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchCentralDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  Rng rng(seed);
  GradCheckOptions opt;
  opt.seed = seed;
  auto check = [&](const std::string& name, std::function<Tensor()> f, std::vector<Tensor> in) {
    auto r = check_gradients(name, f, in, opt);
    EXPECT_TRUE(r.passed) << name << " seed " << seed << " rel err " << r.max_rel_error;
  };
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto bb = random_tensor({2, 4, 3}, rng);
  auto w35 = random_tensor({2, 3, 5}, rng, false);
  auto w33 = random_tensor({2, 3, 3}, rng, false);
  auto w34 = random_tensor({2, 3, 4}, rng, false);
  auto v4 = random_tensor({4}, rng);
  auto g4 = random_tensor({4}, rng, true, 0.5, 1.5);

  check("matmul", [&] { return probe(matmul(a, b), w35); }, {a, b});
  check("batched_matmul", [&] { return probe(matmul(a, bb), w33); }, {a, bb});
  check("add_broadcast", [&] { return probe(add(a, v4), w34); }, {a, v4});
  check("sub", [&] { return probe(sub(a, mul(a, a)), w34); }, {a});
  check("mul_broadcast", [&] { return probe(mul(a, v4), w34); }, {a, v4});
  check("affine", [&] { return probe(one_minus(scale(a, 0.3)), w34); }, {a});
  check("relu", [&] { return probe(relu(a), w34); }, {a});
  check("sigmoid", [&] { return probe(sigmoid(scale(a, 3.0)), w34); }, {a});
  check("tanh", [&] { return probe(msc::tanh(scale(a, 2.0)), w34); }, {a});
  check("softmax", [&] { return probe(softmax(scale(a, 2.0), -1), w34); }, {a});
  check("softmax_axis1", [&] { return probe(softmax(a, 1), w34); }, {a});
  Mask m{{2, 1, 4}, {1, 0, 1, 1, 0, 1, 1, 0}};
  check("softmax_masked", [&] { return probe(softmax(a, -1, &m), w34); }, {a});
  check("layer_norm", [&] { return probe(layer_norm(a, g4, v4, 1e-6), w34); }, {a, g4, v4});
  auto w53 = random_tensor({2, 5, 3}, rng, false);
  check("transpose", [&] { return probe(transpose(matmul(a, b)), w53); }, {a, b});
  check("reshape_permute",
        [&] { return probe(permute(reshape(a, {2, 3, 2, 2}), {0, 2, 1, 3}), reshape(w34, {2, 2, 3, 2})); }, {a});
  check("sum_squares", [&] { return sum_squares(a); }, {a});
  check("mean", [&] { return mean(mul(a, a)); }, {a});
  auto table = random_tensor({5, 4}, rng);
  check("embedding", [&] { return probe(embedding_lookup(table, {0, 3, 3, 1, 4, 0}, {2, 3}), w34); }, {table});
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 100));
