#include "pfcm/metrics.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace pfcm {

double psnr(const ImageTensor& a, const ImageTensor& b, double data_range) {
  if (a.n != b.n) throw Error(ErrorKind::Config, "psnr: resolution mismatch");
  if (!(data_range > 0.0)) {
    throw Error(ErrorKind::Usage, "psnr: data_range must be positive");
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < a.pixels(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.pixels());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kK1 = 0.01;
constexpr double kK2 = 0.03;
constexpr double kRange = 1.0;

// Separable valid-mode Gaussian filter; horizontal pass then vertical pass.
void gaussian_valid(const std::vector<double>& in, int n,
                    const std::vector<double>& taps, std::vector<double>& out) {
  const int m = n - kWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(n) * m);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < m; ++x) {
      double acc = 0.0;
      for (int t = 0; t < kWindow; ++t) {
        acc += taps[static_cast<std::size_t>(t)] *
               in[static_cast<std::size_t>(y) * n + x + t];
      }
      tmp[static_cast<std::size_t>(y) * m + x] = acc;
    }
  }
  out.resize(static_cast<std::size_t>(m) * m);
  for (int y = 0; y < m; ++y) {
    for (int x = 0; x < m; ++x) {
      double acc = 0.0;
      for (int t = 0; t < kWindow; ++t) {
        acc += taps[static_cast<std::size_t>(t)] *
               tmp[static_cast<std::size_t>(y + t) * m + x];
      }
      out[static_cast<std::size_t>(y) * m + x] = acc;
    }
  }
}

}  // namespace

double ssim(const ImageTensor& a, const ImageTensor& b) {
  if (a.n != b.n) throw Error(ErrorKind::Config, "ssim: resolution mismatch");
  if (a.n < kWindow) {
    throw Error(ErrorKind::Config, "ssim: image smaller than the 11x11 window");
  }
  const int n = a.n;
  const std::size_t total = a.pixels();

  std::vector<double> taps(kWindow);
  double sum = 0.0;
  for (int t = 0; t < kWindow; ++t) {
    const double d = t - (kWindow - 1) / 2.0;
    taps[static_cast<std::size_t>(t)] =
        std::exp(-0.5 * d * d / (kWindowSigma * kWindowSigma));
    sum += taps[static_cast<std::size_t>(t)];
  }
  for (auto& t : taps) t /= sum;

  std::vector<double> av(total), bv(total), aav(total), bbv(total), abv(total);
  for (std::size_t i = 0; i < total; ++i) {
    av[i] = a.data[i];
    bv[i] = b.data[i];
    aav[i] = av[i] * av[i];
    bbv[i] = bv[i] * bv[i];
    abv[i] = av[i] * bv[i];
  }
  std::vector<double> mu_a, mu_b, m_aa, m_bb, m_ab;
  gaussian_valid(av, n, taps, mu_a);
  gaussian_valid(bv, n, taps, mu_b);
  gaussian_valid(aav, n, taps, m_aa);
  gaussian_valid(bbv, n, taps, m_bb);
  gaussian_valid(abv, n, taps, m_ab);

  const double c1 = (kK1 * kRange) * (kK1 * kRange);
  const double c2 = (kK2 * kRange) * (kK2 * kRange);
  double acc = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = m_aa[i] - ma * ma;
    const double vb = m_bb[i] - mb * mb;
    const double cov = m_ab[i] - ma * mb;
    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(mu_a.size());
}

}  // namespace pfcm
