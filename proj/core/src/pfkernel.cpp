#include "pfcm/pfkernel.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pfcm {

namespace {

void check_radial_args(double r, int n_dim, double d) {
  if (!(r > 0.0)) {
    throw Error(ErrorKind::Usage, "radial law needs r > 0");
  }
  if (n_dim < 1) {
    throw Error(ErrorKind::Usage, "radial law needs N >= 1");
  }
  if (!(d > 2.0)) {
    throw Error(ErrorKind::Config,
                "d must be > 2 (infinite-variance radial regime excluded)");
  }
}

// Series approximation of trigamma, good enough for sizing the oracle grid.
double trigamma_approx(double a) {
  double acc = 0.0;
  while (a < 6.0) {  // recurrence psi'(a) = psi'(a+1) + 1/a^2
    acc += 1.0 / (a * a);
    a += 1.0;
  }
  const double inv = 1.0 / a;
  const double inv2 = inv * inv;
  return acc + inv * (1.0 + 0.5 * inv + inv2 / 6.0 - inv2 * inv2 / 30.0);
}

}  // namespace

double align_r(double sigma, double d) {
  if (sigma < 0.0) throw Error(ErrorKind::Usage, "align_r: sigma must be >= 0");
  if (!(d > 0.0)) throw Error(ErrorKind::Usage, "align_r: d must be > 0");
  return sigma * std::sqrt(d);
}

double sample_radius(double r, int n_dim, double d, Rng& rng) {
  check_radial_args(r, n_dim, d);
  // R = r sqrt(B/(1-B)) with B ~ Beta(N/2, D/2); taking the gamma ratio
  // directly avoids cancellation when B is close to 0 or 1.
  const double ga = rng.gamma(0.5 * n_dim);
  const double gb = rng.gamma(0.5 * d);
  return r * std::sqrt(ga / gb);
}

double sample_radius(double r, int n_dim, double d, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "radius"));
  return sample_radius(r, n_dim, d, rng);
}

void sample_angle(std::span<float> v, Rng& rng) {
  if (v.empty()) throw Error(ErrorKind::Usage, "sample_angle: N >= 1");
  double norm_sq = 0.0;
  for (float& c : v) {
    const double g = rng.normal();
    c = static_cast<float>(g);
    norm_sq += g * g;
  }
  if (norm_sq == 0.0) {
    // Probability-zero event; retry keeps the unit-norm contract.
    sample_angle(v, rng);
    return;
  }
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (float& c : v) c = static_cast<float>(c * inv);
}

std::vector<float> sample_angle(int n_dim, std::uint64_t seed) {
  std::vector<float> v(static_cast<size_t>(n_dim));
  Rng rng(derive_seed(seed, "angle"));
  sample_angle(v, rng);
  return v;
}

AugmentedNoiseDraw sample_augmented(double r, int n_dim, double d, Rng& rng) {
  AugmentedNoiseDraw draw;
  draw.r = r;
  draw.d = d;
  draw.radius = sample_radius(r, n_dim, d, rng);
  draw.direction.resize(static_cast<size_t>(n_dim));
  sample_angle(draw.direction, rng);
  return draw;
}

ImageTensor perturb(const ImageTensor& x, double sigma, double d, Rng& rng) {
  x.require_finite("perturb input");
  if (sigma < 0.0) throw Error(ErrorKind::Usage, "perturb: sigma must be >= 0");
  if (sigma == 0.0) return x;

  const double r = align_r(sigma, d);
  const int n_dim = static_cast<int>(x.pixels());
  const double radius = sample_radius(r, n_dim, d, rng);

  ImageTensor out(x.n);
  sample_angle(out.data, rng);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = static_cast<float>(x.data[i] + radius * out.data[i]);
  }
  out.require_finite("perturb");
  return out;
}

ImageTensor perturb(const ImageTensor& x, double sigma, double d,
                    std::uint64_t seed) {
  Rng rng(derive_seed(seed, "perturb"));
  return perturb(x, sigma, d, rng);
}

ImageTensor sample_prior(double sigma_max, double d, int n, Rng& rng) {
  validate_resolution(n);
  const double r = align_r(sigma_max, d);
  const int n_dim = n * n;
  const double radius = sample_radius(r, n_dim, d, rng);

  ImageTensor out(n);
  sample_angle(out.data, rng);
  for (float& v : out.data) v = static_cast<float>(v * radius);
  out.require_finite("sample_prior");
  return out;
}

ImageTensor sample_prior(double sigma_max, double d, int n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "prior"));
  return sample_prior(sigma_max, d, n, rng);
}

RadiusGrid RadiusGrid::build(double r, int n_dim, double d, int points) {
  check_radial_args(r, n_dim, d);
  if (points < 16) throw Error(ErrorKind::Usage, "RadiusGrid: points >= 16");

  // Work in u = ln R where the density is a smooth bump: center near the
  // mode, width from the log-gamma variances of the two Beta halves.
  double center;
  if (n_dim >= 2) {
    center = std::log(r) + 0.5 * std::log((n_dim - 1.0) / (d + 1.0));
  } else {
    center = std::log(r) - 0.5 * std::log(d);
  }
  const double width =
      0.5 * std::sqrt(trigamma_approx(0.5 * n_dim) + trigamma_approx(0.5 * d));
  const double lo = center - 18.0 * width - 2.0;
  const double hi = center + 18.0 * width + 2.0;

  RadiusGrid g;
  g.radii.resize(static_cast<size_t>(points));
  g.pdf.resize(static_cast<size_t>(points));
  g.cdf.resize(static_cast<size_t>(points));

  // Unnormalized log-density in u-space: extra +u from the Jacobian R du.
  std::vector<double> logp(static_cast<size_t>(points));
  const double half_exp = 0.5 * (n_dim + d);
  double max_logp = -1e300;
  for (int i = 0; i < points; ++i) {
    const double u = lo + (hi - lo) * i / (points - 1);
    const double radius = std::exp(u);
    g.radii[static_cast<size_t>(i)] = radius;
    // log(R^(N-1) / (R^2+r^2)^((N+D)/2)) + u, with the quotient folded into
    // logs to survive N + D ~ 3e5.
    double log_r2p;
    if (radius > r) {
      log_r2p = 2.0 * u + std::log1p((r / radius) * (r / radius));
    } else {
      log_r2p = 2.0 * std::log(r) + std::log1p((radius / r) * (radius / r));
    }
    const double lp = n_dim * u - half_exp * log_r2p;  // (N-1)u - ... + u
    logp[static_cast<size_t>(i)] = lp;
    max_logp = std::max(max_logp, lp);
  }

  double integral = 0.0;
  for (int i = 0; i < points; ++i) {
    g.pdf[static_cast<size_t>(i)] = std::exp(logp[static_cast<size_t>(i)] - max_logp);
  }
  // Trapezoid in u-space, then convert back to an R-space density.
  const double du = (hi - lo) / (points - 1);
  for (int i = 1; i < points; ++i) {
    integral += 0.5 * (g.pdf[static_cast<size_t>(i)] + g.pdf[static_cast<size_t>(i) - 1]) * du;
  }
  if (!(integral > 0.0) || !std::isfinite(integral)) {
    throw Error(ErrorKind::Numeric, "radial grid normalization failed");
  }
  const double inv = 1.0 / integral;
  double run = 0.0;
  g.cdf[0] = 0.0;
  for (int i = 1; i < points; ++i) {
    run += 0.5 * (g.pdf[static_cast<size_t>(i)] + g.pdf[static_cast<size_t>(i) - 1]) * du * inv;
    g.cdf[static_cast<size_t>(i)] = std::min(run, 1.0);
  }
  for (int i = 0; i < points; ++i) {
    // p(R) = p(u) / R.
    g.pdf[static_cast<size_t>(i)] *= inv / g.radii[static_cast<size_t>(i)];
  }
  return g;
}

double RadiusGrid::cdf_at(double radius) const {
  if (radius <= radii.front()) return 0.0;
  if (radius >= radii.back()) return 1.0;
  const auto it = std::upper_bound(radii.begin(), radii.end(), radius);
  const size_t j = static_cast<size_t>(it - radii.begin());
  const double x0 = radii[j - 1], x1 = radii[j];
  const double t = (radius - x0) / (x1 - x0);
  return cdf[j - 1] + t * (cdf[j] - cdf[j - 1]);
}

double RadiusGrid::pdf_at(double radius) const {
  if (radius <= radii.front() || radius >= radii.back()) return 0.0;
  const auto it = std::upper_bound(radii.begin(), radii.end(), radius);
  const size_t j = static_cast<size_t>(it - radii.begin());
  const double x0 = radii[j - 1], x1 = radii[j];
  const double t = (radius - x0) / (x1 - x0);
  return pdf[j - 1] + t * (pdf[j] - pdf[j - 1]);
}

double radius_pdf(double radius, double r, int n_dim, double d) {
  check_radial_args(r, n_dim, d);
  if (radius < 0.0) throw Error(ErrorKind::Usage, "radius_pdf: R >= 0");
  if (radius == 0.0) {
    if (n_dim >= 2) return 0.0;
    // N == 1 has a finite density at the origin; fall through via the grid.
  }
  const RadiusGrid g = RadiusGrid::build(r, n_dim, d);
  return g.pdf_at(radius);
}

}  // namespace pfcm
