// Built against the double-precision library.
#include <cmath>

#include "bmt/binarizer.hpp"
#include "bmt/random.hpp"
#include "bmt/tensor.hpp"
#include "bmt/trainer.hpp"
#include "doctest.h"
#include "fd.hpp"

using namespace bmt;

static_assert(std::is_same_v<Real, double>, "gradcheck tests need the f64 build");

namespace {

Tensor randp(Shape s, Rng& rng, double sd = 1.0) {
  std::vector<Real> v(shape_numel(s));
  for (auto& x : v) x = rng.normal(0, sd);
  return Tensor::parameter(std::move(s), std::move(v));
}

// Fixed random projection so every output element contributes to the loss.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<Real> w(y.numel());
  for (auto& x : w) x = rng.normal();
  return sum(mul(y, Tensor(y.shape(), std::move(w))));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("gradcheck: matmul and batched matmul") {
  Rng rng(1);
  Tensor a = randp({3, 4}, rng), b = randp({4, 5}, rng);
  CHECK(fd::check([&] { return weighted_sum(matmul(a, b)); }, {a, b}) < kTol);
  Tensor ga = randp({2, 3, 4}, rng), gb = randp({2, 4, 2}, rng);
  CHECK(fd::check([&] { return weighted_sum(matmul(ga, gb)); }, {ga, gb}) < kTol);
}

TEST_CASE("gradcheck: broadcasting elementwise ops") {
  Rng rng(2);
  Tensor x = randp({2, 3, 4}, rng), row = randp({4}, rng), col = randp({2, 1, 4}, rng);
  CHECK(fd::check([&] { return weighted_sum(add(x, row)); }, {x, row}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(sub(col, x)); }, {x, col}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(mul(x, col)); }, {x, col}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(scale(x, 0.3)); }, {x}) < kTol);
}

TEST_CASE("gradcheck: unary ops") {
  Rng rng(3);
  Tensor x = randp({3, 5}, rng);
  CHECK(fd::check([&] { return weighted_sum(exp(x)); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(square(x)); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(bmt::sqrt(add(square(x), Tensor::scalar(1)))); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(relu(x)); }, {x}) < kTol);
}

TEST_CASE("gradcheck: reductions") {
  Rng rng(4);
  Tensor x = randp({3, 4, 2}, rng);
  CHECK(fd::check([&] { return sum(square(x)); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(mean(x, 1, true)); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(variance(x, -1)); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(max_abs(x, 0)); }, {x}) < kTol);
  CHECK(fd::check([&] { return scale(mean(x), 3); }, {x}) < kTol);
}

TEST_CASE("gradcheck: shape ops") {
  Rng rng(5);
  Tensor x = randp({2, 3, 4}, rng), y = randp({2, 1, 4}, rng);
  CHECK(fd::check([&] { return weighted_sum(permute(x, {1, 2, 0})); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(transpose(x, 1, 2)); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(reshape(x, {4, 6})); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(slice(x, 1, 1, 3)); }, {x}) < kTol);
  CHECK(fd::check([&] { return weighted_sum(concat({x, y}, 1)); }, {x, y}) < kTol);
}

TEST_CASE("gradcheck: softmax, masked softmax, layer norm") {
  Rng rng(6);
  Tensor x = randp({2, 3, 4}, rng);
  CHECK(fd::check([&] { return weighted_sum(softmax(x, 1)); }, {x}) < kTol);
  std::vector<uint8_t> keep = {1, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 1};  // [1,3,4], row 2 all-but-one masked
  CHECK(fd::check([&] { return weighted_sum(masked_softmax(x, keep, 2)); }, {x}) < kTol);
  Tensor g = randp({4}, rng), b = randp({4}, rng);
  CHECK(fd::check([&] { return weighted_sum(layer_norm(x, g, b)); }, {x, g, b}) < 1e-5);
}

TEST_CASE("gradcheck: embedding with repeated ids") {
  Rng rng(7);
  Tensor table = randp({5, 3}, rng);
  std::vector<int> ids = {4, 1, 4, 0};
  CHECK(fd::check([&] { return weighted_sum(embedding(table, ids)); }, {table}) < kTol);
}

TEST_CASE("gradcheck: sequence loss with hard, smoothed and teacher targets") {
  Rng rng(9);
  Tensor logits = randp({2, 3, 5}, rng);
  const std::vector<int> targets = {3, 4, kPad, 2, kPad, kPad};
  CHECK(fd::check([&] { return sequence_loss(logits, targets).loss; }, {logits}) < kTol);
  CHECK(fd::check([&] { return sequence_loss(logits, targets, nullptr, 0.1).loss; }, {logits}) < kTol);
  Tensor teacher = randp({2, 3, 5}, rng);
  CHECK(fd::check([&] { return sequence_loss(logits, targets, &teacher).loss; }, {logits}) < kTol);
}

TEST_CASE("gradcheck: dropout with a fixed mask") {
  Rng rng(8);
  Tensor x = randp({4, 6}, rng);
  CHECK(fd::check([&] { return weighted_sum(dropout(x, 0.3, 11)); }, {x}) < kTol);
}

TEST_CASE("STE gradient is the indicator |x| <= B") {
  // Oracle: the upstream gradient passes where |x| <= B and is zero elsewhere.
  Tensor x = Tensor::parameter({2, 3}, {0.5, -1.5, 2.0, 0.0, -0.25, 0.75});
  const BinarizeSpec spec = BinarizeSpec::fixed(1.0);
  Tensor y = binarize_ste(x, spec);
  Tensor up(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  backward(sum(mul(y, up)));
  CHECK(x.grad()[0] == 1);
  CHECK(x.grad()[1] == 0);
  CHECK(x.grad()[2] == 0);
  CHECK(x.grad()[3] == 4);
  CHECK(x.grad()[4] == 5);
  CHECK(x.grad()[5] == 6);
}

TEST_CASE("STE with a dynamic bound passes every gradient and none to the bound") {
  // Every element satisfies |x| <= max|x| so the mask is all ones; a bound
  // gradient would make d/dx differ from the upstream for the maximizer.
  Tensor x = Tensor::parameter({2, 3}, {0.5, -1.5, 2.0, 0.1, -0.25, 0.75});
  Tensor y = binarize_ste(x, BinarizeSpec::dynamic(-1));
  Tensor up(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  backward(sum(mul(y, up)));
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == i + 1);
}
