#include <gtest/gtest.h>

#include <cmath>

#include "cta/gradcheck.hpp"

using namespace cta;

namespace {

Var<double> vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return constant(Tensor<double>({n}, std::move(v)));
}

Var<double> mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return constant(Tensor<double>({r, c}, std::move(v)));
}

Tensor<double> rnd(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  return Tensor<double>::uniform(std::move(s), lo, hi, seed);
}

// Weighted sum so that every output coordinate contributes a distinct gradient.
Var<double> probe(const Var<double>& y, std::uint64_t seed) {
  return sum_all(mul(y, constant(rnd(y.shape(), seed))));
}

}  // namespace

TEST(Elementwise, AddAndBroadcastMul) {
  EXPECT_EQ(add(vec({1, 2}), vec({3, 4})).value().vec(), (std::vector<double>{4, 6}));
  auto y = mul(mat(2, 1, {1, 2}), vec({10, 20}));
  EXPECT_EQ(y.shape(), (Shape{2, 2}));
  // brute-force broadcast oracle
  const double a[2] = {1, 2}, b[2] = {10, 20};
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(y.value().at({i, j}), a[i] * b[j]);
  EXPECT_EQ(exp(vec({0})).value()[0], 1.0);
}

TEST(Elementwise, IncompatibleShapesThrow) {
  EXPECT_THROW(add(vec({1, 2, 3}), vec({1, 2})), ShapeError);
}

TEST(Elementwise, DivisionByZeroPropagatesIeee) {
  auto y = div(vec({1, 0}), vec({0, 0}));
  EXPECT_TRUE(std::isinf(y.value()[0]));
  EXPECT_TRUE(std::isnan(y.value()[1]));
  EXPECT_FALSE(y.value().all_finite());
}

TEST(Elementwise, GradCheckAllOpsWithBroadcast) {
  for (std::uint64_t s = 1; s <= 5; ++s) {
    auto a = parameter(rnd({2, 3, 4}, s));
    auto b = parameter(rnd({3, 1}, s + 100, 0.5, 1.5));
    const ParamList<double> ins{{"a", a}, {"b", b}};
    auto check = [&](auto f) { return grad_check([&] { return probe(f(), s + 7); }, ins).max_rel_error; };
    EXPECT_LE(check([&] { return add(a, b); }), 1e-6);
    EXPECT_LE(check([&] { return sub(a, b); }), 1e-6);
    EXPECT_LE(check([&] { return mul(a, b); }), 1e-6);
    EXPECT_LE(check([&] { return div(a, b); }), 1e-6);
    EXPECT_LE(check([&] { return maximum(a, b); }), 1e-6);
    EXPECT_LE(check([&] { return exp(a); }), 1e-6);
    EXPECT_LE(check([&] { return sqrt(b); }), 1e-6);
    EXPECT_LE(check([&] { return scale(add_scalar(a, 0.3), -2.0); }), 1e-6);
  }
}

TEST(Matmul, IdentityAndDot) {
  auto i2 = mat(2, 2, {1, 0, 0, 1});
  auto m = mat(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(matmul(i2, m).value().vec(), m.value().vec());
  EXPECT_EQ(matmul(mat(1, 2, {1, 2}), mat(2, 1, {3, 4})).value().vec(), (std::vector<double>{11}));
  EXPECT_THROW(matmul(mat(1, 2, {1, 2}), mat(1, 2, {1, 2})), ShapeError);
}

TEST(Matmul, BatchedMatchesTripleLoop) {
  auto a = rnd({2, 3, 4}, 3), b = rnd({2, 4, 5}, 4);
  auto c = matmul(constant(a), constant(b)).value();
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({n, k, j});
        EXPECT_NEAR(c.at({n, i, j}), s, 1e-12);
      }
}

TEST(Matmul, BroadcastLeadingAxesAndGradient) {
  auto w = parameter(rnd({3, 4}, 5));
  auto x = parameter(rnd({2, 2, 4, 3}, 6));
  auto y = matmul(w, x);
  EXPECT_EQ(y.shape(), (Shape{2, 2, 3, 3}));
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto r = grad_check([&] { return probe(matmul(w, x), 50 + s); }, {{"w", w}, {"x", x}});
    EXPECT_LE(r.max_rel_error, 1e-6);
  }
}

TEST(Softmax, ClosedForms) {
  auto y = softmax(vec({0, 0}), 0).value();
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  y = softmax(vec({std::log(2.0), 0}), 0).value();
  EXPECT_NEAR(y[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y[1], 1.0 / 3.0, 1e-15);
  y = softmax(vec({1000, 1000}), 0).value();
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Softmax, RowsSumToOneOnAnyAxisAndGradCheck) {
  auto x = rnd({3, 4, 5}, 9, -4, 4);
  for (long axis = 0; axis < 3; ++axis) {
    auto y = softmax(constant(x), axis).value();
    auto s = sum(constant(y), axis).value();
    for (auto v : s.span()) EXPECT_NEAR(v, 1.0, 1e-12);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto r = grad_check([&](const Var<double>& v) { return probe(softmax(v, axis), seed); }, rnd({3, 4, 5}, seed));
      EXPECT_LE(r.max_rel_error, 1e-6);
    }
  }
}

TEST(Reduce, SumMeanVar) {
  auto x = vec({1, 2, 3});
  EXPECT_DOUBLE_EQ(sum(x, 0).value().item(), 6.0);
  EXPECT_DOUBLE_EQ(mean(x, 0).value().item(), 2.0);
  EXPECT_NEAR(var(x, 0).value().item(), 2.0 / 3.0, 1e-15);
  auto m = mat(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(sum(m, 1).value().vec(), (std::vector<double>{6, 15}));
  EXPECT_EQ(sum(m, 0, true).shape(), (Shape{1, 3}));
  for (std::uint64_t s = 0; s < 5; ++s)
    for (long axis = 0; axis < 3; ++axis) {
      auto r = grad_check([&](const Var<double>& v) { return probe(var(v, axis), s); }, rnd({2, 3, 4}, s + 1));
      EXPECT_LE(r.max_rel_error, 1e-6);
    }
}

TEST(Movement, ConcatPreservesOrder) {
  auto y = concat<double>({mat(1, 1, {1}), mat(1, 1, {2})}, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_EQ(y.value().vec(), (std::vector<double>{1, 2}));
  EXPECT_THROW(concat<double>({mat(1, 2, {1, 2}), mat(2, 1, {1, 2})}, 1), ShapeError);
}

TEST(Movement, PermuteAndReshapeRoundTripsAreBitwise) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto x = rnd({2, 3, 4, 5}, s);
    auto p = permute(constant(x), {2, 0, 3, 1});
    // inverse of {2,0,3,1} is {1,3,0,2}
    EXPECT_TRUE(permute(p, {1, 3, 0, 2}).value().bit_equal(x));
    EXPECT_TRUE(reshape(reshape(constant(x), {6, 20}), {2, 3, 4, 5}).value().bit_equal(x));
  }
  EXPECT_THROW(permute(constant(rnd({2, 2}, 1)), {0, 0}), ShapeError);
  EXPECT_THROW(reshape(constant(rnd({2, 2}, 1)), {3}), ShapeError);
}

TEST(Movement, ConcatOfSplitIsBitwise) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto x = rnd({3, 7, 2}, s);
    CounterRng rng(s);
    const std::size_t cut = 1 + rng.below(6);
    auto parts = split(constant(x), 1, {cut, 7 - cut});
    EXPECT_TRUE(concat(parts, 1).value().bit_equal(x));
  }
  EXPECT_THROW(slice(constant(rnd({3}, 1)), 0, 2, 2), ShapeError);
}

TEST(Movement, GradChecks) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto a = parameter(rnd({2, 3, 4}, s));
    auto b = parameter(rnd({2, 2, 4}, s + 9));
    const ParamList<double> ins{{"a", a}, {"b", b}};
    EXPECT_LE(grad_check([&] { return probe(permute(a, {1, 2, 0}), s); }, ins).max_rel_error, 1e-6);
    EXPECT_LE(grad_check([&] { return probe(reshape(a, {4, 6}), s); }, ins).max_rel_error, 1e-6);
    EXPECT_LE(grad_check([&] { return probe(concat<double>({a, b}, 1), s); }, ins).max_rel_error, 1e-6);
    EXPECT_LE(grad_check([&] { return probe(slice(a, 2, 1, 2), s); }, ins).max_rel_error, 1e-6);
    EXPECT_LE(grad_check([&] { return probe(broadcast_to(slice(b, 1, 0, 1), {2, 5, 4}), s); }, ins).max_rel_error, 1e-6);
  }
}
