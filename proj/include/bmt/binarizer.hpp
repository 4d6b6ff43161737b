#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bmt/tensor.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

enum class BoundMode { kDynamicMaxAbs, kFixed };

/// Quantizer configuration for one binarized operand.
struct BinarizeSpec {
  /// Clip margin; floor(1 - epsilon) must be 0.
  double epsilon = 1.0 / 1024.0;
  BoundMode bound_mode = BoundMode::kDynamicMaxAbs;
  /// Bound used when bound_mode == kFixed.
  double fixed_bound = 1.0;
  /// Axis reduced by the dynamic bound (the matmul contraction axis).
  int contraction_axis = -1;
  double bound_floor = 1e-6;

  static BinarizeSpec dynamic(int axis) {
    BinarizeSpec s;
    s.contraction_axis = axis;
    return s;
  }
  static BinarizeSpec fixed(double bound, int axis = -1) {
    BinarizeSpec s;
    s.bound_mode = BoundMode::kFixed;
    s.fixed_bound = bound;
    s.contraction_axis = axis;
    return s;
  }
  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

/// Per-slice max |x| along the contraction axis (kept as a size-1 axis),
/// clamped below by bound_floor. For kFixed, a scalar tensor holding the
/// bound. The result never carries gradient.
Tensor compute_bound(const Tensor& x, const BinarizeSpec& spec);

/// Forward-only quantizer: (floor(clip(x/B, -1+eps, 1-eps)) + 0.5) * B.
/// Every output is -B/2 or +B/2; zero maps to +B/2.
Tensor binarize(const Tensor& x, const Tensor& bound, const BinarizeSpec& spec);

/// Quantizer with the straight-through gradient 1{|x| <= B}. The bound is
/// computed internally and treated as a constant in backward.
Tensor binarize_ste(const Tensor& x, const BinarizeSpec& spec);

/// Number of binarize_ste calls made on this thread. Used to verify that
/// float training stages never quantize.
std::uint64_t binarize_ste_calls();
void reset_binarize_ste_calls();

struct VarianceReport {
  double empirical_var = 0;  ///< Monte Carlo variance of the binarized dot product
  double theory_var = 0;     ///< B^4 D / 16
  double float_var = 0;      ///< sigma_a^2 sigma_w^2 D with Xavier sigma_w^2 = 1/D
  double inflation() const { return theory_var / float_var; }
};

/// Draws a, w ~ N(0, sigma^2) of length D, binarizes both with the fixed bound
/// B, and measures the variance of their dot product over `trials` draws.
VarianceReport variance_oracle(int dim, double bound, int trials, std::uint64_t seed,
                               double sigma_a = 1.0, double sigma_w = 1.0);
/// Same draws binarized with each bound in turn.
std::vector<VarianceReport> variance_oracle(int dim, std::span<const double> bounds, int trials, std::uint64_t seed,
                                            double sigma_a = 1.0, double sigma_w = 1.0);

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
