#include "bmt/binarizer.hpp"

#include <algorithm>
#include <cmath>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>

namespace bmt {
inline namespace BMT_PRECISION_NS {

namespace {

thread_local std::uint64_t g_ste_calls = 0;

inline Real quantize(Real x, Real bound, Real lo, Real hi) {
  const Real t = std::clamp(x / bound, lo, hi);
  return (std::floor(t) + Real(0.5)) * bound;
}

std::size_t resolve_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r)
    throw ShapeError("binarize: contraction axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

}  // namespace

void BinarizeSpec::validate() const {
  if (!(epsilon > 0 && epsilon < 1)) throw ConfigError("binarize: epsilon must lie in (0,1)");
  if (bound_mode == BoundMode::kFixed && !(fixed_bound > 0))
    throw ConfigError("binarize: fixed bound must be positive");
  if (!(bound_floor > 0)) throw ConfigError("binarize: bound_floor must be positive");
}

Tensor compute_bound(const Tensor& x, const BinarizeSpec& spec) {
  spec.validate();
  if (x.numel() == 0) throw ShapeError("compute_bound: empty tensor");
  if (spec.bound_mode == BoundMode::kFixed) return Tensor::scalar(static_cast<Real>(spec.fixed_bound));

  const std::size_t axis = resolve_axis(spec.contraction_axis, x.rank());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape = s;
  out_shape[axis] = 1;
  std::vector<Real> out(outer * inner, Real(0));
  auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j) {
      const Real* row = xv.data() + (o * n + j) * inner;
      Real* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] = std::max(dst[i], std::abs(row[i]));
    }
  const Real floor = static_cast<Real>(spec.bound_floor);
  for (Real& b : out) b = std::max(b, floor);
  return Tensor(std::move(out_shape), std::move(out));
}

Tensor binarize(const Tensor& x, const Tensor& bound, const BinarizeSpec& spec) {
  spec.validate();
  for (Real b : bound.values())
    if (!(b > 0)) throw Error("binarize: bound must be positive");
  const Real eps = static_cast<Real>(spec.epsilon);
  const Real lo = Real(-1) + eps, hi = Real(1) - eps;
  auto xv = x.values();
  auto bv = bound.values();
  std::vector<Real> out(xv.size());
  if (bv.size() == 1) {
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = quantize(xv[i], bv[0], lo, hi);
  } else {
    const auto off = broadcast_offsets(x.shape(), bound.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = quantize(xv[i], bv[off[i]], lo, hi);
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor binarize_ste(const Tensor& x, const BinarizeSpec& spec) {
  ++g_ste_calls;
  Tensor bound = compute_bound(x, spec);
  CustomOp op;
  op.name = "binarize_ste";
  op.forward = [bound, spec](const std::vector<Tensor>& in) { return binarize(in[0], bound, spec); };
  op.backward = [bound](const Tensor& upstream, const std::vector<Tensor>& in, const Tensor&) {
    auto xv = in[0].values();
    auto gv = upstream.values();
    auto bv = bound.values();
    std::vector<Real> g(xv.size());
    if (bv.size() == 1) {
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] = std::abs(xv[i]) <= bv[0] ? gv[i] : Real(0);
    } else {
      const auto off = broadcast_offsets(in[0].shape(), bound.shape());
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] = std::abs(xv[i]) <= bv[off[i]] ? gv[i] : Real(0);
    }
    return std::vector<Tensor>{Tensor(in[0].shape(), std::move(g))};
  };
  return custom_gradient(op, {x});
}

std::uint64_t binarize_ste_calls() { return g_ste_calls; }
void reset_binarize_ste_calls() { g_ste_calls = 0; }

std::vector<VarianceReport> variance_oracle(int dim, std::span<const double> bounds, int trials, std::uint64_t seed,
                                            double sigma_a, double sigma_w) {
  if (dim < 1) throw ConfigError("variance_oracle: D must be >= 1");
  if (trials < 10000) throw ConfigError("variance_oracle: need at least 1e4 trials");
  if (bounds.empty()) throw ConfigError("variance_oracle: no bounds");
  for (double b : bounds)
    if (!(b > 0)) throw ConfigError("variance_oracle: bound must be positive");
  if (!(sigma_a > 0 && sigma_w > 0)) throw ConfigError("variance_oracle: sigmas must be positive");

  boost::random::mt19937_64 rng(seed);
  boost::random::normal_distribution<double> na(0.0, sigma_a), nw(0.0, sigma_w);
  const double eps = BinarizeSpec{}.epsilon, lo = -1.0 + eps, hi = 1.0 - eps;
  auto q = [&](double v, double bound) { return (std::floor(std::clamp(v / bound, lo, hi)) + 0.5) * bound; };

  // Every bound sees the same draws; Welford accumulation per bound.
  const std::size_t nb = bounds.size();
  std::vector<double> dot(nb), mean(nb, 0.0), m2(nb, 0.0);
  for (int t = 0; t < trials; ++t) {
    std::fill(dot.begin(), dot.end(), 0.0);
    for (int i = 0; i < dim; ++i) {
      const double a = na(rng), w = nw(rng);
      for (std::size_t j = 0; j < nb; ++j) dot[j] += q(a, bounds[j]) * q(w, bounds[j]);
    }
    for (std::size_t j = 0; j < nb; ++j) {
      const double delta = dot[j] - mean[j];
      mean[j] += delta / (t + 1);
      m2[j] += delta * (dot[j] - mean[j]);
    }
  }
  std::vector<VarianceReport> out(nb);
  for (std::size_t j = 0; j < nb; ++j) {
    out[j].empirical_var = m2[j] / (trials - 1);
    out[j].theory_var = std::pow(bounds[j], 4) / 16.0 * dim;
    out[j].float_var = sigma_a * sigma_a * (1.0 / dim) * dim;
  }
  return out;
}

VarianceReport variance_oracle(int dim, double bound, int trials, std::uint64_t seed, double sigma_a, double sigma_w) {
  return variance_oracle(dim, std::span<const double>(&bound, 1), trials, seed, sigma_a, sigma_w).front();
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
