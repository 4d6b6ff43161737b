#include "bmt/bitkernel.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "bmt/binarizer.hpp"
#include "bmt/random.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

namespace {

// Expands `bound` to one value per stored row.
std::vector<Real> per_row_bounds(const Tensor& bound, std::size_t rows) {
  auto bv = bound.values();
  if (bv.size() == 1) return std::vector<Real>(rows, bv[0]);
  if (bv.size() != rows)
    throw ShapeError("pack: bound has " + std::to_string(bv.size()) + " entries, expected " +
                     std::to_string(rows));
  return {bv.begin(), bv.end()};
}

}  // namespace

void PackedBitMatrix::validate(double bound_floor) const {
  const std::size_t wpr = words_per_row();
  if (words.size() != n_rows * wpr) throw Error("packed matrix: word count does not match shape");
  if (bounds.size() != n_rows) throw Error("packed matrix: bound count does not match rows");
  for (Real b : bounds)
    if (!(b >= static_cast<Real>(bound_floor))) throw Error("packed matrix: bound below floor");
  const std::size_t tail = n_cols % 64;
  if (tail == 0 || wpr == 0) return;
  const std::uint64_t pad_mask = ~((std::uint64_t{1} << tail) - 1);
  for (std::size_t r = 0; r < n_rows; ++r)
    if (words[r * wpr + wpr - 1] & pad_mask) throw Error("packed matrix: nonzero pad bits");
}

PackedBitMatrix pack(const Tensor& x_b, const Tensor& bound, PackOrientation orientation) {
  if (x_b.rank() != 2) throw ShapeError("pack: expected a matrix, got " + shape_str(x_b.shape()));
  const std::size_t src_rows = x_b.shape()[0], src_cols = x_b.shape()[1];
  const bool by_cols = orientation == PackOrientation::kCols;
  PackedBitMatrix m;
  m.n_rows = by_cols ? src_cols : src_rows;
  m.n_cols = by_cols ? src_rows : src_cols;
  m.bounds = per_row_bounds(bound, m.n_rows);
  const std::size_t wpr = m.words_per_row();
  m.words.assign(m.n_rows * wpr, 0);
  auto xv = x_b.values();
  for (std::size_t r = 0; r < m.n_rows; ++r) {
    const double half = static_cast<double>(m.bounds[r]) / 2.0;
    if (!(half > 0)) throw Error("pack: bound must be positive");
    for (std::size_t c = 0; c < m.n_cols; ++c) {
      const double v = by_cols ? xv[c * src_cols + r] : xv[r * src_cols + c];
      if (std::abs(std::abs(v) - half) > 1e-6 * half)
        throw Error("pack: element " + std::to_string(v) + " is not +-B/2 for B=" +
                    std::to_string(2 * half));
      if (v > 0) m.words[r * wpr + c / 64] |= std::uint64_t{1} << (c % 64);
    }
  }
  return m;
}

Tensor unpack(const PackedBitMatrix& m, PackOrientation orientation) {
  const bool by_cols = orientation == PackOrientation::kCols;
  const std::size_t rows = by_cols ? m.n_cols : m.n_rows;
  const std::size_t cols = by_cols ? m.n_rows : m.n_cols;
  std::vector<Real> out(rows * cols);
  for (std::size_t r = 0; r < m.n_rows; ++r) {
    const Real half = m.bounds[r] / 2;
    for (std::size_t c = 0; c < m.n_cols; ++c) {
      const Real v = m.bit(r, c) ? half : -half;
      if (by_cols)
        out[c * cols + r] = v;
      else
        out[r * cols + c] = v;
    }
  }
  return Tensor(Shape{rows, cols}, std::move(out));
}

Tensor binary_matmul(const PackedBitMatrix& a, const PackedBitMatrix& w) {
  if (a.n_cols != w.n_cols)
    throw ShapeError("binary_matmul: contraction lengths differ (" + std::to_string(a.n_cols) + " vs " +
                     std::to_string(w.n_cols) + ")");
  const std::size_t n = a.n_rows, k = w.n_rows, wpr = a.words_per_row();
  const auto d = static_cast<std::int64_t>(a.n_cols);
  std::vector<Real> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t* ar = a.words.data() + i * wpr;
    for (std::size_t j = 0; j < k; ++j) {
      const std::uint64_t* wr = w.words.data() + j * wpr;
      std::int64_t disagree = 0;
      for (std::size_t q = 0; q < wpr; ++q) disagree += std::popcount(ar[q] ^ wr[q]);
      const double s = static_cast<double>(a.bounds[i]) * static_cast<double>(w.bounds[j]) / 4.0;
      out[i * k + j] = static_cast<Real>(s * static_cast<double>(d - 2 * disagree));
    }
  }
  return Tensor(Shape{n, k}, std::move(out));
}

Tensor sign_matmul(const Tensor& a, const PackedBitMatrix& w) {
  if (a.rank() != 2 || a.shape()[1] != w.n_cols)
    throw ShapeError("sign_matmul: activation shape " + shape_str(a.shape()) +
                     " does not match contraction length " + std::to_string(w.n_cols));
  const std::size_t n = a.shape()[0], d = w.n_cols, k = w.n_rows;
  auto av = a.values();
  std::vector<Real> out(n * k);
  std::vector<double> signs(d);
  for (std::size_t j = 0; j < k; ++j) {
    const double half = static_cast<double>(w.bounds[j]) / 2.0;
    for (std::size_t c = 0; c < d; ++c) signs[c] = w.bit(j, c) ? half : -half;
    for (std::size_t i = 0; i < n; ++i) {
      const Real* ar = av.data() + i * d;
      double acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(ar[c]) * signs[c];
      out[i * k + j] = static_cast<Real>(acc);
    }
  }
  return Tensor(Shape{n, k}, std::move(out));
}

double max_relative_error(std::span<const Real> x, std::span<const Real> ref) {
  if (x.size() != ref.size()) throw ShapeError("max_relative_error: size mismatch");
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(x[i]) - ref[i]));
    scale = std::max(scale, std::abs(static_cast<double>(ref[i])));
  }
  if (diff == 0) return 0;
  return scale > 0 ? diff / scale : diff;
}

namespace {

struct BinarizedPair {
  Tensor a_b, a_bound, w_b, w_bound;
};

BinarizedPair random_binarized(std::size_t n, std::size_t d, std::size_t k, Rng& rng) {
  std::vector<Real> av(n * d), wv(d * k);
  for (Real& v : av) v = static_cast<Real>(rng.normal());
  for (Real& v : wv) v = static_cast<Real>(rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(d))));
  Tensor a(Shape{n, d}, std::move(av)), w(Shape{d, k}, std::move(wv));
  BinarizedPair p;
  const BinarizeSpec sa = BinarizeSpec::dynamic(1), sw = BinarizeSpec::dynamic(0);
  p.a_bound = compute_bound(a, sa);
  p.w_bound = compute_bound(w, sw);
  p.a_b = binarize(a, p.a_bound, sa);
  p.w_b = binarize(w, p.w_bound, sw);
  return p;
}

// Plain single-precision triple loop used as the throughput baseline.
void naive_float_gemm(const std::vector<float>& a, const std::vector<float>& b, std::vector<float>& c,
                      std::size_t n, std::size_t d, std::size_t k) {
  std::fill(c.begin(), c.end(), 0.0f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < d; ++p) {
      const float av = a[i * d + p];
      const float* br = b.data() + p * k;
      float* cr = c.data() + i * k;
      for (std::size_t j = 0; j < k; ++j) cr[j] += av * br[j];
    }
}

template <class F>
double median_seconds(int reps, F&& f) {
  std::vector<double> t(static_cast<std::size_t>(reps));
  for (double& s : t) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

}  // namespace

double equivalence_check(std::size_t n, std::size_t d, std::size_t k, int trials, std::uint64_t seed) {
  if (trials < 1) throw ConfigError("equivalence_check: trials must be >= 1");
  if (n == 0 || d == 0 || k == 0) throw ShapeError("equivalence_check: sizes must be >= 1");
  Rng rng(seed);
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    BinarizedPair p = random_binarized(n, d, k, rng);
    Tensor reference = matmul(p.a_b, p.w_b);
    Tensor packed = binary_matmul(pack(p.a_b, p.a_bound, PackOrientation::kRows),
                                  pack(p.w_b, p.w_bound, PackOrientation::kCols));
    worst = std::max(worst, max_relative_error(packed.values(), reference.values()));
  }
  return worst;
}

BenchResult benchmark(std::size_t n, std::size_t d, std::size_t k, int reps, std::uint64_t seed) {
  if (n == 0 || d == 0 || k == 0 || reps < 1) throw ConfigError("benchmark: sizes and reps must be >= 1");
  Rng rng(seed);
  BinarizedPair p = random_binarized(n, d, k, rng);
  const PackedBitMatrix pa = pack(p.a_b, p.a_bound, PackOrientation::kRows);
  const PackedBitMatrix pw = pack(p.w_b, p.w_bound, PackOrientation::kCols);
  std::vector<float> fa(p.a_b.values().begin(), p.a_b.values().end());
  std::vector<float> fw(p.w_b.values().begin(), p.w_b.values().end());
  std::vector<float> fc(n * k);

  Tensor packed_out;
  const double t_packed = median_seconds(reps, [&] { packed_out = binary_matmul(pa, pw); });
  const double t_float = median_seconds(reps, [&] { naive_float_gemm(fa, fw, fc, n, d, k); });

  BenchResult r;
  r.n = n;
  r.d = d;
  r.k = k;
  const double ops = 2.0 * static_cast<double>(n) * static_cast<double>(d) * static_cast<double>(k);
  r.packed_gops = ops / std::max(t_packed, 1e-12) / 1e9;
  r.float_gops = ops / std::max(t_float, 1e-12) / 1e9;
  r.speedup = r.packed_gops / r.float_gops;
  std::vector<Real> float_out(fc.begin(), fc.end());
  r.max_rel_error = max_relative_error(packed_out.values(), float_out);
  return r;
}

std::string bench_csv_header() { return "n,d,k,packed_gops,float_gops,speedup"; }

std::string bench_csv_row(const BenchResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%.4f,%.4f,%.3f", r.n, r.d, r.k, r.packed_gops, r.float_gops,
                r.speedup);
  return buf;
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
