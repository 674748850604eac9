#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "pfcm/pfkernel.hpp"

using namespace pfcm;

TEST_CASE("align_r formula") {
  CHECK(align_r(380.0, 128.0) ==
        doctest::Approx(4299.2092296142091).epsilon(1e-14));
  CHECK(align_r(0.0, 2048.0) == 0.0);
  CHECK(align_r(3.25, 1.0) == 3.25);
  CHECK_THROWS_AS(align_r(-1.0, 8.0), Error);
}

TEST_CASE("radius sampler matches the Beta-moment identity") {
  // E[R^2]/r^2 = N/(D-2); for N=4, D=6, r=2 -> E[R^2] = 4
  Rng rng(101);
  const double r = 2.0;
  double acc = 0.0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const double radius = sample_radius(r, 4, 6.0, rng);
    acc += radius * radius;
  }
  CHECK(acc / draws == doctest::Approx(4.0).epsilon(0.03));
}

TEST_CASE("radius sampler matches the numerically integrated CDF") {
  struct Config {
    int n;
    double d, r;
  };
  for (const Config c : {Config{16, 128.0, 1.0}, Config{64, 2048.0, 10.0}}) {
    const RadiusGrid grid = RadiusGrid::build(c.r, c.n, c.d);
    Rng rng(derive_seed(55, "ks", static_cast<std::uint64_t>(c.n)));
    std::vector<double> draws(100000);
    for (auto& v : draws) v = sample_radius(c.r, c.n, c.d, rng);
    const double ks = oracles::ks_statistic(
        draws, [&grid](double x) { return grid.cdf_at(x); });
    CHECK(ks < 0.01);
  }
}

TEST_CASE("radius draws form a scale family in r") {
  // same seed, scaled r: draws scale exactly
  const double a = sample_radius(1.5, 16, 128.0, std::uint64_t{77});
  const double b = sample_radius(3.0, 16, 128.0, std::uint64_t{77});
  CHECK(b == doctest::Approx(2.0 * a).epsilon(1e-12));

  // distributional check with independent seeds
  Rng r1(1), r2(2);
  const RadiusGrid grid = RadiusGrid::build(1.0, 16, 128.0);
  std::vector<double> scaled(100000);
  for (auto& v : scaled) v = sample_radius(5.0, 16, 128.0, r2) / 5.0;
  const double ks = oracles::ks_statistic(
      scaled, [&grid](double x) { return grid.cdf_at(x); });
  CHECK(ks < 0.01);
}

TEST_CASE("radius sampler rejects the infinite-variance regime") {
  Rng rng(1);
  CHECK_THROWS_AS(sample_radius(1.0, 16, 2.0, rng), Error);
  CHECK_THROWS_AS(sample_radius(1.0, 16, 1.5, rng), Error);
  CHECK_THROWS_AS(sample_radius(0.0, 16, 128.0, rng), Error);
}

TEST_CASE("angles are unit norm and isotropic") {
  Rng rng(202);
  const int n = 16;
  std::vector<double> comp_mean(n, 0.0), comp_sq(n, 0.0);
  const int draws = 100000;
  std::vector<float> v(n);
  for (int k = 0; k < draws; ++k) {
    sample_angle(v, rng);
    double norm = 0.0;
    for (int i = 0; i < n; ++i) {
      norm += static_cast<double>(v[static_cast<std::size_t>(i)]) *
              v[static_cast<std::size_t>(i)];
      comp_mean[static_cast<std::size_t>(i)] += v[static_cast<std::size_t>(i)];
      comp_sq[static_cast<std::size_t>(i)] +=
          static_cast<double>(v[static_cast<std::size_t>(i)]) *
          v[static_cast<std::size_t>(i)];
    }
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);
  }
  for (int i = 0; i < n; ++i) {
    CHECK(std::abs(comp_mean[static_cast<std::size_t>(i)] / draws) < 0.01);
    CHECK(comp_sq[static_cast<std::size_t>(i)] / draws ==
          doctest::Approx(1.0 / n).epsilon(0.05));
  }
}

TEST_CASE("perturb: small sigma limit and radius consistency") {
  ImageTensor x(16, 0.3f);
  CHECK(perturb(x, 0.0, 128.0, std::uint64_t{5}).data == x.data);

  // replay the same stream: x_sigma == x + R v exactly
  Rng rng_a(derive_seed(9, "perturb"));
  const ImageTensor xs = perturb(x, 2.5, 128.0, rng_a);
  Rng rng_b(derive_seed(9, "perturb"));
  const int n_dim = static_cast<int>(x.pixels());
  const double r = align_r(2.5, 128.0);
  const double radius = sample_radius(r, n_dim, 128.0, rng_b);
  std::vector<float> v(x.pixels());
  sample_angle(v, rng_b);
  double norm = 0.0;
  for (std::size_t i = 0; i < x.pixels(); ++i) {
    CHECK(xs.data[i] ==
          doctest::Approx(x.data[i] + radius * v[i]).epsilon(1e-6));
    const double d = static_cast<double>(xs.data[i]) - x.data[i];
    norm += d * d;
  }
  CHECK(std::sqrt(norm) == doctest::Approx(radius).epsilon(1e-5));
}

TEST_CASE("perturbation matches the Gaussian limit moments at large D") {
  // E[||x_sigma - x||^2]/N = sigma^2 D/(D-2)
  const double sigma = 0.7;
  const double d = 1e6;
  ImageTensor x(8, 0.5f);
  const int n_dim = static_cast<int>(x.pixels());
  Rng rng(404);
  double acc = 0.0;
  const int draws = 4000;
  for (int k = 0; k < draws; ++k) {
    const ImageTensor xs = perturb(x, sigma, d, rng);
    double nrm = 0.0;
    for (std::size_t i = 0; i < x.pixels(); ++i) {
      const double dv = static_cast<double>(xs.data[i]) - x.data[i];
      nrm += dv * dv;
    }
    acc += nrm / n_dim;
  }
  const double expected = sigma * sigma * d / (d - 2.0);
  CHECK(acc / draws == doctest::Approx(expected).epsilon(0.01));
}

TEST_CASE("perturbation noise is isotropic across pixel pairs") {
  ImageTensor x(8, 0.0f);
  Rng rng(17);
  const int draws = 20000;
  // accumulate covariance between a few fixed pixel pairs
  const std::pair<int, int> pairs[3] = {{0, 1}, {5, 40}, {12, 61}};
  double cov[3] = {0, 0, 0};
  double var0 = 0.0;
  for (int k = 0; k < draws; ++k) {
    const ImageTensor xs = perturb(x, 1.0, 64.0, rng);
    for (int p = 0; p < 3; ++p) {
      cov[p] += static_cast<double>(xs.data[static_cast<std::size_t>(pairs[p].first)]) *
                xs.data[static_cast<std::size_t>(pairs[p].second)];
    }
    var0 += static_cast<double>(xs.data[0]) * xs.data[0];
  }
  var0 /= draws;
  for (int p = 0; p < 3; ++p) {
    CHECK(std::abs(cov[p] / draws) / var0 < 3.0 / std::sqrt(double(draws)));
  }
}

TEST_CASE("gaussian-limit marginal: std within 2% and normality accepted") {
  const double sigma = 0.5;
  const double d = 1e6;
  ImageTensor x(8, 0.0f);
  Rng rng(31);
  const int draws = 20000;
  std::vector<double> pixel0(static_cast<std::size_t>(draws));
  for (int k = 0; k < draws; ++k) {
    const ImageTensor xs = perturb(x, sigma, d, rng);
    pixel0[static_cast<std::size_t>(k)] = xs.data[0];
  }
  const double sd = oracles::stddev(pixel0);
  CHECK(std::abs(sd - sigma) / sigma < 0.02);
  const double exact_sd = sigma * std::sqrt(d / (d - 2.0));
  const double ks = oracles::ks_statistic(pixel0, [exact_sd](double v) {
    return oracles::normal_cdf(v, 0.0, exact_sd);
  });
  // 1% KS critical value
  CHECK(ks < 1.63 / std::sqrt(static_cast<double>(draws)));
}

TEST_CASE("prior draws live on the r_max cylinder radial law") {
  Rng rng(606);
  const double sigma_max = 380.0;
  const double d = 128.0;
  const int n = 8;
  const RadiusGrid grid =
      RadiusGrid::build(align_r(sigma_max, d), n * n, d);
  std::vector<double> radii(100000);
  for (auto& v : radii) {
    const ImageTensor p = sample_prior(sigma_max, d, n, rng);
    double acc = 0.0;
    for (float px : p.data) acc += static_cast<double>(px) * px;
    v = std::sqrt(acc);
  }
  const double ks = oracles::ks_statistic(
      radii, [&grid](double x) { return grid.cdf_at(x); });
  CHECK(ks < 0.01);

  const ImageTensor a = sample_prior(sigma_max, d, n, std::uint64_t{1});
  const ImageTensor b = sample_prior(sigma_max, d, n, std::uint64_t{2});
  CHECK(a.data != b.data);
}

TEST_CASE("radial pdf: zero at origin, correct mode, unit mass") {
  CHECK(radius_pdf(0.0, 1.0, 16, 128.0) == 0.0);

  const int n = 16;
  const double d = 128.0, r = 2.0;
  const RadiusGrid grid = RadiusGrid::build(r, n, d);
  // numeric argmax vs closed-form mode R* = r sqrt((N-1)/(D+1))
  double best_x = 0.0, best_p = -1.0;
  for (std::size_t i = 0; i < grid.radii.size(); ++i) {
    if (grid.pdf[i] > best_p) {
      best_p = grid.pdf[i];
      best_x = grid.radii[i];
    }
  }
  const double mode = r * std::sqrt((n - 1.0) / (d + 1.0));
  CHECK(best_x == doctest::Approx(mode).epsilon(0.01));

  // trapezoid mass over the grid
  double mass = 0.0;
  for (std::size_t i = 1; i < grid.radii.size(); ++i) {
    mass += 0.5 * (grid.pdf[i] + grid.pdf[i - 1]) *
            (grid.radii[i] - grid.radii[i - 1]);
  }
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(grid.cdf.back() == doctest::Approx(1.0).epsilon(1e-9));

  // pdf evaluation agrees with the grid interpolation route
  const double at = mode * 1.1;
  CHECK(radius_pdf(at, r, n, d) == doctest::Approx(grid.pdf_at(at)).epsilon(1e-12));
}

TEST_CASE("radial grid handles the paper-scale (N, D) extremes") {
  // N+D ~ 2.6e5 exponents must not overflow the normalization
  const RadiusGrid grid = RadiusGrid::build(5.0, 256, 262144.0);
  CHECK(grid.cdf.back() == doctest::Approx(1.0).epsilon(1e-9));
  Rng rng(9090);
  std::vector<double> draws(50000);
  for (auto& v : draws) v = sample_radius(5.0, 256, 262144.0, rng);
  const double ks = oracles::ks_statistic(
      draws, [&grid](double x) { return grid.cdf_at(x); });
  CHECK(ks < 0.01);
}
