#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bmt/tensor.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

/// Which axis of the source matrix carries the bound vector.
///  kRows: activations A[N,D] with per-row bounds B_A[N]; stored as-is.
///  kCols: weights W[D,K] with per-column bounds B_W[K]; stored transposed
///         so every stored row is one output channel.
enum class PackOrientation { kRows, kCols };

/// Sign bits of a binarized matrix, 64 per word, LSB-first. Each stored row
/// occupies words_per_row() words; pad bits past n_cols are zero.
struct PackedBitMatrix {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;  ///< contraction length D
  std::vector<std::uint64_t> words;
  std::vector<Real> bounds;  ///< one bound per stored row

  static std::size_t words_for(std::size_t cols) { return (cols + 63) / 64; }
  std::size_t words_per_row() const { return words_for(n_cols); }
  std::span<const std::uint64_t> row(std::size_t r) const {
    return {words.data() + r * words_per_row(), words_per_row()};
  }
  bool bit(std::size_t r, std::size_t c) const {
    return (words[r * words_per_row() + c / 64] >> (c % 64)) & 1u;
  }
  /// Throws when word count, pad bits, or bounds violate the format.
  void validate(double bound_floor = 1e-6) const;
};

/// Packs a binarized matrix. Every element must equal +-B/2 for its bound
/// (relative tolerance 1e-6); `bound` may be a scalar or a per-row/per-column
/// vector in any keepdim shape.
PackedBitMatrix pack(const Tensor& x_b, const Tensor& bound, PackOrientation orientation);

/// Inverse of pack, returned in the source orientation.
Tensor unpack(const PackedBitMatrix& m, PackOrientation orientation);

/// XNOR-popcount GEMM. `a` is packed kRows [N,D]; `w` is packed kCols (stored
/// [K,D]). out[n,k] = B_A[n] B_W[k] / 4 * (D - 2 popcount(a_n xor w_k)).
Tensor binary_matmul(const PackedBitMatrix& a, const PackedBitMatrix& w);

/// Float activations times packed binary weights: out[n,k] =
/// B_W[k]/2 * sum_d (+-1) a[n,d]. Used when only the weights are binarized.
Tensor sign_matmul(const Tensor& a, const PackedBitMatrix& w);

/// max |x - ref| / max |ref| (0 when both are identically zero).
double max_relative_error(std::span<const Real> x, std::span<const Real> ref);

/// Random float matrices are binarized with dynamic bounds and multiplied
/// both as floats and through the packed kernel; returns the worst relative
/// error over all trials.
double equivalence_check(std::size_t n, std::size_t d, std::size_t k, int trials, std::uint64_t seed);

struct BenchResult {
  std::size_t n = 0, d = 0, k = 0;
  double packed_gops = 0;
  double float_gops = 0;
  double speedup = 0;
  double max_rel_error = 0;  ///< packed vs float output on the benchmarked operands
};

/// Median-of-reps throughput of binary_matmul and a naive float GEMM of the
/// same shape. One op = one multiply-accumulate counted as two.
BenchResult benchmark(std::size_t n, std::size_t d, std::size_t k, int reps, std::uint64_t seed = 7);

std::string bench_csv_header();
std::string bench_csv_row(const BenchResult& r);

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
