#include "bmt/scalelaw.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <Eigen/Dense>

namespace bmt {
inline namespace BMT_PRECISION_NS {

namespace {

// theta = (log alpha, p_e, p_d, l_inf)
using Vec4 = Eigen::Matrix<double, 4, 1>;

struct Problem {
  std::vector<double> log_xe, log_xd, loss;
  double l_max = 0;  ///< upper bound on l_inf

  double sse(const Vec4& th, Eigen::VectorXd* r = nullptr, Eigen::Matrix<double, Eigen::Dynamic, 4>* j = nullptr) const {
    const auto n = static_cast<Eigen::Index>(loss.size());
    if (r) r->resize(n);
    if (j) j->resize(n, 4);
    double s = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double red = std::exp(th[0] + th[1] * log_xe[k] + th[2] * log_xd[k]);
      const double res = red + th[3] - loss[k];
      s += res * res;
      if (r) (*r)[i] = res;
      if (j) {
        (*j)(i, 0) = red;
        (*j)(i, 1) = red * log_xe[k];
        (*j)(i, 2) = red * log_xd[k];
        (*j)(i, 3) = 1.0;
      }
    }
    return s;
  }

  void clamp(Vec4& th) const {
    th[0] = std::clamp(th[0], -50.0, 50.0);
    th[1] = std::clamp(th[1], 0.0, 1.0);
    th[2] = std::clamp(th[2], 0.0, 1.0);
    th[3] = std::clamp(th[3], 0.0, l_max);
  }

  // alpha and l_inf by linear least squares for fixed exponents.
  Vec4 start(double pe, double pd) const {
    const std::size_t n = loss.size();
    double sf = 0, sff = 0, sl = 0, sfl = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double f = std::exp(pe * log_xe[i] + pd * log_xd[i]);
      sf += f;
      sff += f * f;
      sl += loss[i];
      sfl += f * loss[i];
    }
    const double dn = static_cast<double>(n);
    const double det = dn * sff - sf * sf;
    double alpha = det > 0 ? (dn * sfl - sf * sl) / det : sl / dn;
    double linf = (sl - alpha * sf) / dn;
    if (linf < 0 || linf > l_max) {
      linf = std::clamp(linf, 0.0, l_max);
      alpha = (sfl - linf * sf) / sff;
    }
    Vec4 th{std::log(std::max(alpha, 1e-12)), pe, pd, linf};
    clamp(th);
    return th;
  }

  Vec4 levenberg_marquardt(Vec4 th) const {
    Eigen::VectorXd r;
    Eigen::Matrix<double, Eigen::Dynamic, 4> j;
    double cur = sse(th, &r, &j);
    double lambda = 1e-3;
    for (int it = 0; it < 500; ++it) {
      const Eigen::Matrix4d jtj = j.transpose() * j;
      const Vec4 g = j.transpose() * r;
      Eigen::Matrix4d a = jtj;
      for (int d = 0; d < 4; ++d) a(d, d) += lambda * std::max(jtj(d, d), 1e-12);
      Vec4 cand = th - a.ldlt().solve(g);
      clamp(cand);
      const double next = sse(cand);
      if (std::isfinite(next) && next < cur) {
        const double gain = cur - next;
        th = cand;
        cur = sse(th, &r, &j);
        lambda = std::max(lambda / 3, 1e-12);
        if (gain <= 1e-15 * std::max(cur, 1e-300) || cur == 0) break;
      } else {
        lambda *= 4;
        if (lambda > 1e12) break;
      }
    }
    return th;
  }
};

}  // namespace

ScalingLawFit fit_scaling_law(const std::vector<ScalingPoint>& points, double nbar_e, double nbar_d) {
  if (points.size() < 5) throw ConfigError("fit_scaling_law: need at least 5 points");
  if (!(nbar_e > 0) || !(nbar_d > 0)) throw ConfigError("fit_scaling_law: nbar constants must be positive");
  std::set<double> enc, dec;
  std::set<std::array<double, 3>> distinct;
  Problem pb;
  double mean = 0;
  for (const auto& p : points) {
    if (!(p.n_enc > 0) || !(p.n_dec > 0) || !(p.loss > 0) || !std::isfinite(p.loss))
      throw ConfigError("fit_scaling_law: counts and losses must be positive");
    enc.insert(p.n_enc);
    dec.insert(p.n_dec);
    distinct.insert({p.n_enc, p.n_dec, p.loss});
    pb.log_xe.push_back(std::log(nbar_e / p.n_enc));
    pb.log_xd.push_back(std::log(nbar_d / p.n_dec));
    pb.loss.push_back(p.loss);
    mean += p.loss;
  }
  if (distinct.size() == 1) throw ConfigError("fit_scaling_law: all points are identical");
  if (enc.size() < 2 || dec.size() < 2)
    throw ConfigError("fit_scaling_law: points must vary both encoder and decoder size");
  mean /= static_cast<double>(points.size());
  pb.l_max = *std::min_element(pb.loss.begin(), pb.loss.end());

  ScalingLawFit best;
  best.sse = std::numeric_limits<double>::infinity();
  Vec4 best_th = Vec4::Zero();
  constexpr std::array<double, 4> kGrid{0.05, 0.2, 0.35, 0.5};
  for (double pe : kGrid)
    for (double pd : kGrid) {
      const Vec4 th = pb.levenberg_marquardt(pb.start(pe, pd));
      const double s = pb.sse(th);
      best.restart_sse.push_back(s);
      if (s < best.sse) {
        best.sse = s;
        best_th = th;
      }
    }

  best.alpha = std::exp(best_th[0]);
  best.p_e = best_th[1];
  best.p_d = best_th[2];
  best.l_inf = best_th[3];
  best.nbar_e = nbar_e;
  best.nbar_d = nbar_d;
  double sst = 0;
  for (double l : pb.loss) sst += (l - mean) * (l - mean);
  const bool flat_losses = sst <= 1e-24 * std::max(1.0, mean * mean);
  best.r_squared = flat_losses ? (best.sse <= 1e-24 ? 1.0 : -std::numeric_limits<double>::infinity())
                               : 1.0 - best.sse / sst;
  best.degenerate = flat_losses || (best.p_e < 1e-6 && best.p_d < 1e-6);
  return best;
}

double predict(const ScalingLawFit& fit, double n_enc, double n_dec) {
  if (!(n_enc > 0) || !(n_dec > 0)) throw ConfigError("predict: counts must be positive");
  return fit.alpha * std::pow(fit.nbar_e / n_enc, fit.p_e) * std::pow(fit.nbar_d / n_dec, fit.p_d) + fit.l_inf;
}

std::vector<double> residuals(const ScalingLawFit& fit, const std::vector<ScalingPoint>& points) {
  std::vector<double> out;
  for (const auto& p : points) out.push_back(p.loss - predict(fit, p.n_enc, p.n_dec));
  return out;
}

std::vector<ScalingPoint> read_scaling_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "n_enc,n_dec,loss") throw ConfigError(path + ": expected header n_enc,n_dec,loss");
  std::vector<ScalingPoint> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, c, extra;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c, ',') ||
        std::getline(ss, extra, ','))
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 3 columns");
    try {
      out.push_back({std::stod(a), std::stod(b), std::stod(c)});
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": not a number");
    }
  }
  return out;
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
