#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace mfa;
using mfa::testing::naive_matmul;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  std::normal_distribution<double> normal;
  for (auto& v : t.data()) v = static_cast<float>(normal(rng));
  return t;
}

std::vector<std::vector<double>> to_rows(const Tensor& t) {
  std::vector<std::vector<double>> out(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) out[i][j] = t.at(i, j);
  return out;
}

Tensor transpose(const Tensor& t) {
  Tensor out({t.dim(1), t.dim(0)});
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) out.at(j, i) = t.at(i, j);
  return out;
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor(Shape{}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), DimensionError);
  EXPECT_NO_THROW(Tensor({2, 2}, std::vector<float>(4)));
}

TEST(Tensor, EnsureFiniteFlagsNaN) {
  Tensor t({3});
  t[1] = std::nanf("");
  EXPECT_THROW(ensure_finite(t, "test"), NumericError);
}

TEST(Matmul, Identity) {
  const auto a = Tensor::matrix({{1, 0}, {0, 1}});
  const auto b = Tensor::matrix({{3, 4}, {5, 6}});
  EXPECT_EQ(matmul(a, b), b);
}

TEST(Matmul, HandProduct) {
  const auto out = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_EQ(out[0], 11.0f);
}

TEST(Matmul, MatchesTripleLoop) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto a = random_tensor({8, 8}, seed);
    const auto b = random_tensor({8, 8}, seed + 100);
    const auto ref = naive_matmul(to_rows(a), to_rows(b));
    const auto got = matmul(a, b);
    const auto got_nt = matmul_nt(a, transpose(b));
    const auto got_tn = matmul_tn(transpose(a), b);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_NEAR(got.at(i, j), ref[i][j], 1e-5);
        EXPECT_NEAR(got_nt.at(i, j), ref[i][j], 1e-5);
        EXPECT_NEAR(got_tn.at(i, j), ref[i][j], 1e-5);
      }
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
  EXPECT_THROW(matmul_nt(Tensor({2, 3}), Tensor({2, 4})), DimensionError);
  EXPECT_THROW(matmul_tn(Tensor({2, 3}), Tensor({3, 3})), DimensionError);
  EXPECT_THROW(matmul(Tensor({2}), Tensor({2, 3})), DimensionError);
}

TEST(Normalize, ThreeFourFive) {
  const auto out = l2_normalize_rows(Tensor::matrix({{3, 4}}));
  EXPECT_FLOAT_EQ(out[0], 0.6f);
  EXPECT_FLOAT_EQ(out[1], 0.8f);
}

TEST(Normalize, ZeroRowStaysZero) {
  const auto out = l2_normalize_rows(Tensor::matrix({{0, 0}}));
  EXPECT_EQ(out[0], 0.0f);
  EXPECT_EQ(out[1], 0.0f);
}

TEST(Normalize, RandomRowsHaveUnitNorm) {
  const auto out = l2_normalize_rows(random_tensor({5, 7}, 9));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (float v : out.row(i)) s += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST(CrossEntropy, UniformLogits) {
  const std::vector<std::size_t> y{0};
  EXPECT_NEAR(softmax_cross_entropy(Tensor::matrix({{0, 0}}), y).loss, std::log(2.0), 1e-12);
}

TEST(CrossEntropy, ConfidentLogits) {
  const std::vector<std::size_t> y{0};
  const double expected = std::log1p(std::exp(-20.0));
  EXPECT_NEAR(softmax_cross_entropy(Tensor::matrix({{10, -10}}), y).loss, expected, 1e-15);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  auto logits = tensor_cast<double>(random_tensor({3, 4}, 3));
  const std::vector<std::size_t> y{2, 0, 3};
  const auto analytic = softmax_cross_entropy(logits, y).grad_logits;
  const double h = 1e-3;
  double worst = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    auto plus = logits, minus = logits;
    plus[i] += h;
    minus[i] -= h;
    const double fd = (softmax_cross_entropy(plus, y).loss - softmax_cross_entropy(minus, y).loss) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-12});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  EXPECT_LE(worst, 1e-3);
}

TEST(CrossEntropy, BadTargetThrows) {
  const std::vector<std::size_t> y{2};
  EXPECT_THROW(softmax_cross_entropy(Tensor::matrix({{0, 0}}), y), IndexError);
}

TEST(Adam, ZeroGradientLeavesParam) {
  Tensor p = Tensor::matrix({{1.5f, -2.0f}});
  const Tensor before = p;
  AdamState<float> st(p.shape(), {});
  adam_step(p, Tensor(p.shape()), st);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  WideTensor p({1}, std::vector<double>{1.0});
  AdamState<double> st(p.shape(), {});
  adam_step(p, WideTensor({1}, std::vector<double>{1.0}), st);
  // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
  EXPECT_NEAR(p[0], 1.0 - 1e-4 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, DescendsQuadratic) {
  WideTensor w({1}, std::vector<double>{1.0});
  AdamState<double> st(w.shape(), {});
  double prev = std::abs(w[0]);
  for (int i = 0; i < 100; ++i) {
    adam_step(w, WideTensor({1}, std::vector<double>{2.0 * w[0]}), st);
    EXPECT_LT(std::abs(w[0]), prev);
    prev = std::abs(w[0]);
  }
}

TEST(Adam, ShapeMismatchThrows) {
  Tensor p({2});
  AdamState<float> st(p.shape(), {});
  EXPECT_THROW(adam_step(p, Tensor({3}), st), DimensionError);
}

TEST(Argmax, TiesGoToLowestIndex) {
  const std::vector<float> v{1, 3, 3, 2};
  EXPECT_EQ(argmax(std::span<const float>(v)), 1u);
}

TEST(Random, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
  EXPECT_NE(derive_seed(1, "a"), derive_seed(2, "a"));
  EXPECT_EQ(derive_seed(7, "x", 3), derive_seed(7, "x", 3));
}

TEST(Random, FisherYatesIsAPermutation) {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  Rng rng(4);
  fisher_yates(v, rng);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}
