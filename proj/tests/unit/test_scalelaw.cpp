#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "bmt/random.hpp"
#include "bmt/scalelaw.hpp"
#include "doctest.h"

using namespace bmt;

namespace {

constexpr double kNbarE = 1e6, kNbarD = 2e6;

double law(double alpha, double pe, double pd, double linf, double ne, double nd) {
  return alpha * std::pow(kNbarE / ne, pe) * std::pow(kNbarD / nd, pd) + linf;
}

std::vector<ScalingPoint> grid(double alpha, double pe, double pd, double linf, double noise = 0,
                               std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<ScalingPoint> pts;
  // Sizes from nbar/4 to 256 nbar, six per axis.
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) {
      const double ne = kNbarE * std::exp2(-2.0 + 2.0 * i), nd = kNbarD * std::exp2(-2.0 + 2.0 * j);
      double l = law(alpha, pe, pd, linf, ne, nd);
      if (noise > 0) l *= 1.0 + noise * rng.normal();
      pts.push_back({ne, nd, l});
    }
  return pts;
}

double rel(double got, double want) { return std::abs(got - want) / std::abs(want); }

}  // namespace

TEST_CASE("noise-free data is recovered") {
  const ScalingLawFit f = fit_scaling_law(grid(2, 0.18, 0.31, 1), kNbarE, kNbarD);
  CHECK(rel(f.alpha, 2) < 1e-3);
  CHECK(rel(f.p_e, 0.18) < 1e-3);
  CHECK(rel(f.p_d, 0.31) < 1e-3);
  CHECK(rel(f.l_inf, 1) < 1e-3);
  CHECK(f.r_squared > 0.9999);
  CHECK(f.r_squared <= 1.0);
  CHECK_FALSE(f.degenerate);
  REQUIRE(f.restart_sse.size() >= 8);
  for (double s : f.restart_sse) CHECK(f.sse <= s);
}

TEST_CASE("one percent noise stays within five percent") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const ScalingLawFit f = fit_scaling_law(grid(2, 0.18, 0.31, 1, 0.01, seed), kNbarE, kNbarD);
    INFO("seed ", seed);
    CHECK(rel(f.alpha, 2) < 0.05);
    CHECK(rel(f.p_e, 0.18) < 0.05);
    CHECK(rel(f.p_d, 0.31) < 0.05);
    CHECK(rel(f.l_inf, 1) < 0.05);
    CHECK(f.r_squared >= 0.99);
  }
}

TEST_CASE("predict at the normalization point and under doubling") {
  ScalingLawFit f;
  f.alpha = 2;
  f.p_e = 0.18;
  f.p_d = 0.31;
  f.l_inf = 1;
  f.nbar_e = kNbarE;
  f.nbar_d = kNbarD;
  CHECK(predict(f, kNbarE, kNbarD) == doctest::Approx(3.0));
  const double red = predict(f, 3e5, 7e5) - f.l_inf;
  CHECK(predict(f, 6e5, 7e5) - f.l_inf == doctest::Approx(red * std::pow(2.0, -0.18)));
  CHECK(predict(f, 1e30, 1e30) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK_THROWS_AS(predict(f, 0, 1), ConfigError);
}

TEST_CASE("fit ignores point order") {
  auto pts = grid(1.5, 0.25, 0.1, 0.5, 0.01, 4);
  const ScalingLawFit a = fit_scaling_law(pts, kNbarE, kNbarD);
  Rng rng(6);
  rng.shuffle(pts);
  const ScalingLawFit b = fit_scaling_law(pts, kNbarE, kNbarD);
  CHECK(b.alpha == doctest::Approx(a.alpha).epsilon(1e-6));
  CHECK(b.p_e == doctest::Approx(a.p_e).epsilon(1e-6));
  CHECK(b.p_d == doctest::Approx(a.p_d).epsilon(1e-6));
  CHECK(b.l_inf == doctest::Approx(a.l_inf).epsilon(1e-6));
}

TEST_CASE("rescaled normalization constants leave predictions unchanged") {
  const auto pts = grid(2, 0.18, 0.31, 1, 0.01, 7);
  const ScalingLawFit a = fit_scaling_law(pts, kNbarE, kNbarD);
  const ScalingLawFit b = fit_scaling_law(pts, kNbarE * 3, kNbarD / 5);
  CHECK(b.p_e == doctest::Approx(a.p_e).epsilon(1e-5));
  CHECK(b.p_d == doctest::Approx(a.p_d).epsilon(1e-5));
  for (const auto& p : pts) CHECK(predict(b, p.n_enc, p.n_dec) == doctest::Approx(predict(a, p.n_enc, p.n_dec)));
  const auto r = residuals(a, pts);
  REQUIRE(r.size() == pts.size());
  CHECK(r[0] == doctest::Approx(pts[0].loss - predict(a, pts[0].n_enc, pts[0].n_dec)));
}

TEST_CASE("flat exponents are flagged as degenerate") {
  const ScalingLawFit f = fit_scaling_law(grid(0.7, 0, 0, 1.3), kNbarE, kNbarD);
  CHECK(f.degenerate);
  CHECK(f.alpha + f.l_inf == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(predict(f, 123, 456) == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("invalid point sets are rejected") {
  std::vector<ScalingPoint> same(6, {1e6, 1e6, 2.0});
  CHECK_THROWS_AS(fit_scaling_law(same, kNbarE, kNbarD), ConfigError);
  auto pts = grid(2, 0.18, 0.31, 1);
  CHECK_THROWS_AS(fit_scaling_law({pts.begin(), pts.begin() + 4}, kNbarE, kNbarD), ConfigError);
  std::vector<ScalingPoint> one_axis;
  for (int i = 1; i <= 6; ++i) one_axis.push_back({1e5 * i, 1e6, 1.0 + 1.0 / i});
  CHECK_THROWS_AS(fit_scaling_law(one_axis, kNbarE, kNbarD), ConfigError);
  pts[2].loss = -1;
  CHECK_THROWS_AS(fit_scaling_law(pts, kNbarE, kNbarD), ConfigError);
}

TEST_CASE("points CSV parsing") {
  const auto path = (std::filesystem::temp_directory_path() / ("bmt_points_" + std::to_string(::getpid()))).string();
  {
    std::ofstream out(path);
    out << "n_enc,n_dec,loss\n100,200,1.5\n300,400,1.25\n\n";
  }
  const auto pts = read_scaling_points(path);
  REQUIRE(pts.size() == 2);
  CHECK(pts[1].n_dec == 400);
  CHECK(pts[1].loss == 1.25);
  {
    std::ofstream out(path);
    out << "a,b,c\n";
  }
  CHECK_THROWS_AS(read_scaling_points(path), ConfigError);
  {
    std::ofstream out(path);
    out << "n_enc,n_dec,loss\n1,2\n";
  }
  CHECK_THROWS_AS(read_scaling_points(path), ConfigError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_scaling_points(path), Error);
}
