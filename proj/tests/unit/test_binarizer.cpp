#include <cmath>

#include "bmt/binarizer.hpp"
#include "doctest.h"

using namespace bmt;

TEST_CASE("binarize maps to +-B/2 with zero going up") {
  Tensor x(Shape{6}, {0.3f, -0.3f, 0.0f, 5.0f, -5.0f, -1e-9f});
  Tensor y = binarize(x, Tensor::scalar(1), BinarizeSpec::fixed(1));
  CHECK(y.to_vector() == std::vector<double>{0.5, -0.5, 0.5, 0.5, -0.5, -0.5});
}

TEST_CASE("values at the bound stay on the grid") {
  Tensor x(Shape{2}, {2.0f, -2.0f});
  Tensor y = binarize(x, Tensor::scalar(2), BinarizeSpec::fixed(2));
  CHECK(y.to_vector() == std::vector<double>{1, -1});
}

TEST_CASE("dynamic bound reduces the contraction axis with a floor") {
  Tensor x(Shape{2, 3}, {1, -4, 2, 0, 0, 0});
  Tensor b = compute_bound(x, BinarizeSpec::dynamic(-1));
  CHECK(b.shape() == Shape{2, 1});
  CHECK(b[0] == 4);
  CHECK(b[1] == doctest::Approx(1e-6));
  Tensor bc = compute_bound(x, BinarizeSpec::dynamic(0));
  CHECK(bc.shape() == Shape{1, 3});
  CHECK(bc.to_vector() == std::vector<double>{1, 4, 2});
  Tensor y = binarize(x, b, BinarizeSpec::dynamic(-1));
  CHECK(y.to_vector() == std::vector<double>{2, -2, 2, 5e-7f, 5e-7f, 5e-7f});
}

TEST_CASE("binarize_ste forward equals binarize and counts calls") {
  reset_binarize_ste_calls();
  Tensor x(Shape{2, 2}, {0.1f, -3.0f, 2.0f, 0.5f});
  const auto spec = BinarizeSpec::dynamic(-1);
  Tensor y = binarize_ste(x, spec);
  CHECK(y.to_vector() == binarize(x, compute_bound(x, spec), spec).to_vector());
  CHECK(binarize_ste_calls() == 1);
}

TEST_CASE("invalid specs are rejected") {
  BinarizeSpec s;
  s.epsilon = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(BinarizeSpec::fixed(0).validate(), ConfigError);
  Tensor x(Shape{2}, {1, 2});
  CHECK_THROWS_AS(binarize(x, Tensor::scalar(-1), BinarizeSpec::fixed(1)), Error);
  CHECK_THROWS_AS(compute_bound(x, BinarizeSpec::dynamic(3)), ShapeError);
}

TEST_CASE("variance oracle agrees with B^4 D / 16 at small D") {
  auto r = variance_oracle(16, 2.0, 20000, 5);
  CHECK(r.theory_var == doctest::Approx(16.0));
  CHECK(r.float_var == doctest::Approx(1.0));
  CHECK(r.empirical_var == doctest::Approx(r.theory_var).epsilon(0.05));
  CHECK(r.inflation() == doctest::Approx(16.0));
  CHECK_THROWS_AS(variance_oracle(16, 2.0, 100, 5), ConfigError);
  CHECK_THROWS_AS(variance_oracle(0, 2.0, 20000, 5), ConfigError);
}
