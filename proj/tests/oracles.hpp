#pragma once

// Test-side numeric oracles, kept independent of the library paths they
// check: KS statistics against an explicit CDF, a chi-square tail via the
// regularized incomplete gamma, and central finite differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracles {

inline double ks_statistic(std::vector<double> draws,
                           const std::function<double(double)>& cdf) {
  std::sort(draws.begin(), draws.end());
  const double n = static_cast<double>(draws.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    const double f = cdf(draws[i]);
    worst = std::max(worst, std::abs(f - static_cast<double>(i) / n));
    worst = std::max(worst, std::abs(static_cast<double>(i + 1) / n - f));
  }
  return worst;
}

// Regularized lower incomplete gamma P(a, x); series for x < a+1,
// continued fraction otherwise.
inline double gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw std::invalid_argument("gamma_p domain");
  if (x == 0.0) return 0.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return 1.0 - std::exp(-x + a * std::log(x) - gln) * h;
}

// Upper-tail p-value of a chi-square statistic with dof degrees of freedom.
inline double chi_square_p(double stat, int dof) {
  return 1.0 - gamma_p(0.5 * dof, 0.5 * stat);
}

// Central finite difference of loss() w.r.t. params[idx].
inline double central_fd(std::vector<float>& params, std::size_t idx,
                         double eps, const std::function<double()>& loss) {
  const float saved = params[idx];
  params[idx] = static_cast<float>(saved + eps);
  const double hi = loss();
  params[idx] = static_cast<float>(saved - eps);
  const double lo = loss();
  params[idx] = saved;
  return (hi - lo) / (2.0 * eps);
}

inline double mean(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

inline double stddev(const std::vector<double>& v) {
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

inline double normal_cdf(double x, double mu, double sigma) {
  return 0.5 * std::erfc(-(x - mu) / (sigma * std::sqrt(2.0)));
}

}  // namespace oracles
