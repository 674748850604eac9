#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pfcm/rng.hpp"
#include "pfcm/types.hpp"

namespace pfcm {

// Augmented-space perturbation machinery. Noise states live on the
// r = sigma * sqrt(D) hyper-cylinder; a draw decomposes into a radius R from
// the heavy-tailed radial law
//   p_r(R) proportional to R^(N-1) / (R^2 + r^2)^((N+D)/2)
// and a uniform direction on the unit (N-1)-sphere.

struct AugmentedNoiseDraw {
  double radius = 0.0;          // R = ||x_sigma - x||
  std::vector<float> direction; // unit vector, length N
  double r = 0.0;               // augmented-norm coordinate
  double d = 0.0;
};

// r = sigma * sqrt(D).
double align_r(double sigma, double d);

// Exact draw from p_r(R) via the change of variables
// B = R^2/(R^2 + r^2) ~ Beta(N/2, D/2), i.e. R = r * sqrt(G_a / G_b) with
// independent gammas. Requires d > 2 (finite second moment).
double sample_radius(double r, int n_dim, double d, Rng& rng);
double sample_radius(double r, int n_dim, double d, std::uint64_t seed);

// Uniform direction on the unit sphere in R^n_dim.
void sample_angle(std::span<float> v, Rng& rng);
std::vector<float> sample_angle(int n_dim, std::uint64_t seed);

AugmentedNoiseDraw sample_augmented(double r, int n_dim, double d, Rng& rng);

// x_sigma = x + R v at r = align_r(sigma, d). sigma == 0 returns x.
ImageTensor perturb(const ImageTensor& x, double sigma, double d, Rng& rng);
ImageTensor perturb(const ImageTensor& x, double sigma, double d,
                    std::uint64_t seed);

// Pure-noise state on the r_max = sigma_max * sqrt(D) hyper-cylinder,
// flattened to an n x n image.
ImageTensor sample_prior(double sigma_max, double d, int n, Rng& rng);
ImageTensor sample_prior(double sigma_max, double d, int n, std::uint64_t seed);

// Numerically normalized radial density. Independent of the Beta sampling
// route above; serves as the oracle side of the pair.
double radius_pdf(double radius, double r, int n_dim, double d);

// Log-spaced grid carrying the numerically integrated pdf/cdf of p_r(R).
// cdf is trapezoidal over the grid; pdf integrates to 1 on it by
// construction.
struct RadiusGrid {
  std::vector<double> radii;
  std::vector<double> pdf;
  std::vector<double> cdf;

  static RadiusGrid build(double r, int n_dim, double d, int points = 4096);
  double cdf_at(double radius) const;  // linear interpolation, clamped
  double pdf_at(double radius) const;
};

}  // namespace pfcm
