#include "bmt/binarizer.hpp"
#include "bmt/bitkernel.hpp"
#include "bmt/random.hpp"
#include "doctest.h"

using namespace bmt;

TEST_CASE("pack uses LSB-first sign bits") {
  Tensor x(Shape{1, 4}, {1, -1, 1, 1});
  PackedBitMatrix m = pack(x, Tensor::scalar(2), PackOrientation::kRows);
  REQUIRE(m.words.size() == 1);
  CHECK(m.words[0] == 0b1101u);
  CHECK(unpack(m, PackOrientation::kRows).to_vector() == x.to_vector());
}

TEST_CASE("column packing stores one row per output channel") {
  Tensor w(Shape{3, 2}, {0.5f, -1, -0.5f, 1, 0.5f, 1});  // per-column bounds 1, 2
  Tensor bound(Shape{1, 2}, {1, 2});
  PackedBitMatrix m = pack(w, bound, PackOrientation::kCols);
  CHECK(m.n_rows == 2);
  CHECK(m.n_cols == 3);
  CHECK(m.words[0] == 0b101u);
  CHECK(m.words[1] == 0b110u);
  CHECK(unpack(m, PackOrientation::kCols).to_vector() == w.to_vector());
}

TEST_CASE("binary_matmul hand case") {
  Tensor a(Shape{1, 2}, {0.5f, 0.5f}), w(Shape{2, 1}, {-0.5f, -0.5f});
  Tensor out = binary_matmul(pack(a, Tensor::scalar(1), PackOrientation::kRows),
                             pack(w, Tensor::scalar(1), PackOrientation::kCols));
  CHECK(out.item() == -0.5);
}

TEST_CASE("pack rejects values off the grid") {
  Tensor x(Shape{1, 2}, {0.5f, 0.3f});
  CHECK_THROWS_AS(pack(x, Tensor::scalar(1), PackOrientation::kRows), Error);
}

TEST_CASE("pad bits are zero and validated") {
  std::vector<Real> v(65, 0.5f);
  PackedBitMatrix m = pack(Tensor(Shape{1, 65}, v), Tensor::scalar(1), PackOrientation::kRows);
  CHECK(m.words.size() == 2);
  CHECK(m.words[1] == 1u);
  CHECK_NOTHROW(m.validate());
  m.words[1] |= 2u;
  CHECK_THROWS_AS(m.validate(), Error);
  PackedBitMatrix other = pack(Tensor(Shape{1, 64}, std::vector<Real>(64, 0.5f)), Tensor::scalar(1),
                               PackOrientation::kRows);
  CHECK_THROWS_AS(binary_matmul(m, other), ShapeError);
}

TEST_CASE("packed kernel equals the float path on odd shapes") {
  for (size_t d : {1u, 2u, 63u, 64u, 65u, 130u}) CHECK(equivalence_check(3, d, 5, 2, d) < 1e-6);
}

TEST_CASE("sign_matmul equals float activations times binarized weights") {
  Rng rng(3);
  std::vector<Real> av(4 * 70), wv(70 * 3);
  for (auto& x : av) x = static_cast<Real>(rng.normal());
  for (auto& x : wv) x = static_cast<Real>(rng.normal());
  Tensor a(Shape{4, 70}, av), w(Shape{70, 3}, wv);
  const auto spec = BinarizeSpec::dynamic(0);
  Tensor bound = compute_bound(w, spec);
  Tensor wb = binarize(w, bound, spec);
  Tensor ref = matmul(a, wb);
  Tensor got = sign_matmul(a, pack(wb, bound, PackOrientation::kCols));
  CHECK(max_relative_error(got.values(), ref.values()) < 1e-6);
}

TEST_CASE("benchmark reports consistent numbers") {
  BenchResult r = benchmark(8, 256, 16, 3);
  CHECK(r.packed_gops > 0);
  CHECK(r.float_gops > 0);
  CHECK(r.max_rel_error < 1e-5);
  CHECK(bench_csv_row(r).rfind("8,256,16,", 0) == 0);
}
