#include <cmath>
#include <limits>

#include "bmt/tensor.hpp"
#include "doctest.h"

using namespace bmt;

namespace {

// Naive reference product used as the matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, size_t n, size_t d,
                                 size_t k) {
  std::vector<double> c(n * k, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < k; ++j)
      for (size_t p = 0; p < d; ++p) c[i * k + j] += a[i * d + p] * b[p * k + j];
  return c;
}

}  // namespace

TEST_CASE("matmul matches a naive triple loop") {
  const size_t n = 5, d = 7, k = 3;
  std::vector<Real> av(n * d), bv(d * k);
  for (size_t i = 0; i < av.size(); ++i) av[i] = static_cast<Real>(std::sin(0.3 * i + 0.1));
  for (size_t i = 0; i < bv.size(); ++i) bv[i] = static_cast<Real>(std::cos(0.7 * i));
  Tensor a(Shape{n, d}, av), b(Shape{d, k}, bv);
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{n, k});
  auto ref = naive_matmul(a.to_vector(), b.to_vector(), n, d, k);
  for (size_t i = 0; i < ref.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-6));
}

TEST_CASE("batched matmul treats each group independently") {
  Tensor a(Shape{2, 1, 2}, {1, 2, 3, 4});
  Tensor b(Shape{2, 2, 1}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1, 1});
  CHECK(c[0] == 17);
  CHECK(c[1] == 53);
}

TEST_CASE("matmul rejects mismatched shapes") {
  Tensor a(Shape{2, 3}), b(Shape{4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("softmax of [0, ln 3] is [0.25, 0.75]") {
  Tensor x(Shape{1, 2}, {0, static_cast<Real>(std::log(3.0))});
  Tensor y = softmax(x);
  CHECK(y[0] == doctest::Approx(0.25));
  CHECK(y[1] == doctest::Approx(0.75));
}

TEST_CASE("softmax is stable for large logits") {
  Tensor x(Shape{3}, {1000, 1000, 1000});
  Tensor y = softmax(x);
  for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(1.0 / 3));
}

TEST_CASE("masked softmax zeroes masked keys exactly") {
  Tensor x(Shape{2, 2, 3}, {1, 2, 3, 4, 5, 6, 1, 1, 1, 0, 0, 0});
  std::vector<uint8_t> keep = {1, 1, 0, 1, 0, 0};  // [1,2,3], shared by both groups
  Tensor y = masked_softmax(x, keep, 2);
  CHECK(y[2] == 0);
  CHECK(y[4] == 0);
  CHECK(y[5] == 0);
  CHECK(y[3] == 1);
  CHECK(y[0] + y[1] == doctest::Approx(1));
  CHECK(y[6] == doctest::Approx(0.5));
}

TEST_CASE("broadcast add and mul") {
  Tensor x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row(Shape{3}, {10, 20, 30});
  Tensor col(Shape{2, 1}, {2, 3});
  Tensor s = add(x, row);
  CHECK(s.to_vector() == std::vector<double>{11, 22, 33, 14, 25, 36});
  Tensor m = mul(x, col);
  CHECK(m.to_vector() == std::vector<double>{2, 4, 6, 12, 15, 18});
  CHECK_THROWS_AS(add(x, Tensor(Shape{2})), ShapeError);
}

TEST_CASE("layer norm output has zero mean and unit variance") {
  Tensor x(Shape{2, 4}, {1, 2, 3, 4, -3, 0, 5, 2});
  Tensor g(Shape{4}, Real(1)), b(Shape{4}, Real(0));
  Tensor y = layer_norm(x, g, b);
  for (size_t r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (size_t c = 0; c < 4; ++c) m += y[r * 4 + c];
    m /= 4;
    for (size_t c = 0; c < 4; ++c) v += (y[r * 4 + c] - m) * (y[r * 4 + c] - m);
    CHECK(m == doctest::Approx(0).epsilon(1e-6));
    CHECK(v / 4 == doctest::Approx(1).epsilon(1e-4));
  }
}

TEST_CASE("reductions") {
  Tensor x(Shape{2, 3}, {1, -5, 3, 4, 2, -6});
  CHECK(sum(x).item() == -1);
  Tensor m = mean(x, 1);
  CHECK(m[0] == doctest::Approx(-1.0 / 3));
  CHECK(m[1] == 0);
  Tensor ma = max_abs(x, 1, true);
  CHECK(ma.shape() == Shape{2, 1});
  CHECK(ma.to_vector() == std::vector<double>{5, 6});
  Tensor var = variance(x, 0);
  CHECK(var.to_vector() == std::vector<double>{2.25, 12.25, 20.25});
}

TEST_CASE("shape ops round-trip") {
  Tensor x(Shape{2, 3, 4});
  auto xv = x.mutable_values();
  for (size_t i = 0; i < xv.size(); ++i) xv[i] = static_cast<Real>(i);
  Tensor p = permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  CHECK(p[1] == 4);  // p[0][0][1] = x[0][1][0]
  Tensor back = permute(p, {1, 2, 0});
  CHECK(back.to_vector() == x.to_vector());
  Tensor t = transpose(x, 0, 2);
  CHECK(t.shape() == Shape{4, 3, 2});
  Tensor r = reshape(x, {6, 4});
  CHECK(r.shape() == Shape{6, 4});
  CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
  Tensor s = slice(x, 2, 1, 3);
  CHECK(s.shape() == Shape{2, 3, 2});
  CHECK(s[0] == 1);
  Tensor c = concat({s, s}, 0);
  CHECK(c.shape() == Shape{4, 3, 2});
}

TEST_CASE("embedding gathers rows and rejects bad ids") {
  Tensor table(Shape{3, 2}, {0, 1, 10, 11, 20, 21});
  std::vector<int> ids = {2, 0, 2};
  Tensor e = embedding(table, ids);
  CHECK(e.to_vector() == std::vector<double>{20, 21, 0, 1, 20, 21});
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(embedding(table, bad), Error);
}

TEST_CASE("leaf gradients accumulate, intermediates do not") {
  Tensor w = Tensor::parameter(Shape{2}, {1, 2});
  Tensor y = sum(square(w));
  backward(y);
  CHECK(w.grad()[0] == 2);
  backward(y);
  CHECK(w.grad()[0] == 4);
  w.zero_grad();
  CHECK(w.grad()[1] == 0);
}

TEST_CASE("no-grad guard records nothing") {
  Tensor w = Tensor::parameter(Shape{2}, {1, 2});
  Tensor y;
  {
    NoGradGuard ng;
    y = sum(square(w));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("non-finite forward values raise NumericError") {
  Tensor x(Shape{1}, {1000});
  CHECK_THROWS_AS(exp(x), NumericError);
  Tensor z(Shape{1}, {-1});
  CHECK_THROWS_AS(bmt::sqrt(z), NumericError);
}

TEST_CASE("custom gradient applies the supplied rule verbatim") {
  CustomOp op;
  op.name = "double_fwd_triple_bwd";
  op.forward = [](const std::vector<Tensor>& in) { return scale(in[0], 2); };
  op.backward = [](const Tensor& up, const std::vector<Tensor>&, const Tensor&) {
    return std::vector<Tensor>{scale(up, 3)};
  };
  Tensor x = Tensor::parameter(Shape{2}, {1, 1});
  Tensor y = custom_gradient(op, {x});
  CHECK(y.to_vector() == std::vector<double>{2, 2});
  backward(sum(y));
  CHECK(x.grad()[0] == 3);
}

TEST_CASE("dropout is seeded and inverted") {
  Tensor x(Shape{1000}, Real(1));
  Tensor a = dropout(x, 0.5, 42), b = dropout(x, 0.5, 42), c = dropout(x, 0.0, 42);
  CHECK(a.to_vector() == b.to_vector());
  CHECK(c.to_vector() == x.to_vector());
  double s = 0;
  for (double v : a.to_vector()) {
    CHECK((v == 0 || v == 2));
    s += v;
  }
  CHECK(s / 1000 == doctest::Approx(1).epsilon(0.15));
}
