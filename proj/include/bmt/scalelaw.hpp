#pragma once

#include <string>
#include <vector>

#include "bmt/common.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

struct ScalingPoint {
  double n_enc = 0;
  double n_dec = 0;
  double loss = 0;  ///< per-token eval loss
};

/// L(Ne, Nd) = alpha (nbar_e/Ne)^p_e (nbar_d/Nd)^p_d + l_inf
struct ScalingLawFit {
  double alpha = 0, p_e = 0, p_d = 0, l_inf = 0;
  double nbar_e = 1, nbar_d = 1;
  double r_squared = 0;
  double sse = 0;
  /// Set when alpha and l_inf cannot be told apart (flat exponents or
  /// constant losses).
  bool degenerate = false;
  std::vector<double> restart_sse;  ///< final SSE of every start, in grid order
};

/// Least-squares fit with Levenberg-Marquardt from a fixed 4x4 grid of
/// (p_e, p_d) starts over [0.05, 0.5]. alpha is optimized in log space;
/// p_e, p_d are boxed to [0, 1] and l_inf to [0, min loss].
ScalingLawFit fit_scaling_law(const std::vector<ScalingPoint>& points, double nbar_e, double nbar_d);

double predict(const ScalingLawFit& fit, double n_enc, double n_dec);

/// Observed minus predicted, per point.
std::vector<double> residuals(const ScalingLawFit& fit, const std::vector<ScalingPoint>& points);

/// CSV with header n_enc,n_dec,loss.
std::vector<ScalingPoint> read_scaling_points(const std::string& path);

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
