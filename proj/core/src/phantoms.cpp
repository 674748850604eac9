#include "pfcm/phantoms.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace pfcm {

void PhantomSpec::validate() const {
  validate_resolution(n);
  if (min_ellipses < 0 || max_ellipses < min_ellipses) {
    throw Error(ErrorKind::Config, "bad ellipse count range");
  }
  if (!(0.f <= intensity_lo && intensity_lo <= intensity_hi)) {
    throw Error(ErrorKind::Config, "bad intensity range");
  }
  if (background < 0.f || background > 1.f) {
    throw Error(ErrorKind::Config, "background must lie in [0, 1]");
  }
}

void DoseModel::validate() const {
  if (!(dose_factor > 0.0)) {
    throw Error(ErrorKind::Config, "dose_factor must be positive");
  }
  if (!(texture_kernel_width > 0.0)) {
    throw Error(ErrorKind::Config, "texture_kernel_width must be positive");
  }
  if (base_std < 0.0) {
    throw Error(ErrorKind::Config, "base_std must be >= 0");
  }
}

double DoseModel::noise_std() const {
  if (std::isinf(dose_factor)) return 0.0;
  return base_std / std::sqrt(dose_factor);
}

namespace {

struct Ellipse {
  double cx, cy;     // center in [0,1]^2
  double a, b;       // semi-axes in the same units
  double angle;      // radians
  double intensity;  // additive
};

inline bool inside(const Ellipse& e, double x, double y) {
  const double dx = x - e.cx;
  const double dy = y - e.cy;
  const double c = std::cos(e.angle);
  const double s = std::sin(e.angle);
  const double u = (dx * c + dy * s) / e.a;
  const double v = (-dx * s + dy * c) / e.b;
  return u * u + v * v <= 1.0;
}

}  // namespace

ImageTensor generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, "phantom"));

  const int k = rng.uniform_int(spec.min_ellipses, spec.max_ellipses);
  std::vector<Ellipse> ellipses;
  ellipses.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    Ellipse e;
    if (i == 0) {
      // First ellipse guaranteed fully inside the field of view: its
      // bounding circle of radius max(a, b) stays within [0, 1]^2.
      e.a = rng.uniform(0.10, 0.25);
      e.b = rng.uniform(0.10, 0.25);
      const double m = std::max(e.a, e.b);
      e.cx = rng.uniform(m, 1.0 - m);
      e.cy = rng.uniform(m, 1.0 - m);
    } else {
      e.a = rng.uniform(0.05, 0.35);
      e.b = rng.uniform(0.05, 0.35);
      e.cx = rng.uniform(0.05, 0.95);
      e.cy = rng.uniform(0.05, 0.95);
    }
    e.angle = rng.uniform(0.0, 3.14159265358979323846);
    e.intensity = rng.uniform(spec.intensity_lo, spec.intensity_hi);
    ellipses.push_back(e);
  }

  ImageTensor img(spec.n, spec.background);
  for (int row = 0; row < spec.n; ++row) {
    const double y = (row + 0.5) / spec.n;
    for (int col = 0; col < spec.n; ++col) {
      const double x = (col + 0.5) / spec.n;
      double v = spec.background;
      for (const auto& e : ellipses) {
        if (inside(e, x, y)) v += e.intensity;
      }
      img.at(row, col) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  img.require_finite("generate_phantom");
  return img;
}

ImageTensor degrade(const ImageTensor& x, const DoseModel& dose,
                    std::uint64_t seed) {
  dose.validate();
  x.require_finite("degrade input");
  const double std_dev = dose.noise_std();

  ImageTensor y(x.n);
  if (std_dev == 0.0) {
    for (size_t i = 0; i < x.data.size(); ++i) {
      y.data[i] = std::clamp(x.data[i], 0.0f, 1.0f);
    }
    return y;
  }

  const int n = x.n;
  Rng rng(derive_seed(seed, "degrade"));
  std::vector<float> white(static_cast<size_t>(n) * n);
  rng.fill_normal(white);

  // Separable Gaussian smoothing with wrap-around so the field stays
  // stationary; each 1D kernel is L2-normalized, keeping the marginal
  // variance at exactly std_dev^2.
  const double kw = dose.texture_kernel_width;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * kw)));
  std::vector<double> taps(static_cast<size_t>(2 * radius + 1));
  double sq = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    const double g = std::exp(-0.5 * (t * t) / (kw * kw));
    taps[static_cast<size_t>(t + radius)] = g;
    sq += g * g;
  }
  const double inv_l2 = 1.0 / std::sqrt(sq);
  for (auto& g : taps) g *= inv_l2;

  std::vector<float> tmp(white.size());
  auto wrap = [n](int i) { return ((i % n) + n) % n; };
  for (int row = 0; row < n; ++row) {
    for (int col = 0; col < n; ++col) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        acc += taps[static_cast<size_t>(t + radius)] *
               white[static_cast<size_t>(row) * n + wrap(col + t)];
      }
      tmp[static_cast<size_t>(row) * n + col] = static_cast<float>(acc);
    }
  }
  for (int row = 0; row < n; ++row) {
    for (int col = 0; col < n; ++col) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        acc += taps[static_cast<size_t>(t + radius)] *
               tmp[static_cast<size_t>(wrap(row + t)) * n + col];
      }
      const double v = x.data[static_cast<size_t>(row) * n + col] + std_dev * acc;
      y.at(row, col) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  y.require_finite("degrade");
  return y;
}

PairedSample extract_patch(const ImageTensor& clean, const ImageTensor& noisy,
                           int patch_n, Rng& rng) {
  if (clean.n != noisy.n) {
    throw Error(ErrorKind::Config, "extract_patch: pair resolution mismatch");
  }
  if (patch_n > clean.n) {
    throw Error(ErrorKind::Config,
                "patch " + std::to_string(patch_n) + " larger than image " +
                    std::to_string(clean.n));
  }
  validate_resolution(patch_n);
  const int max_off = clean.n - patch_n;
  const int ox = max_off == 0 ? 0 : rng.uniform_int(0, max_off);
  const int oy = max_off == 0 ? 0 : rng.uniform_int(0, max_off);

  PairedSample out;
  out.clean = ImageTensor(patch_n);
  out.noisy = ImageTensor(patch_n);
  for (int row = 0; row < patch_n; ++row) {
    for (int col = 0; col < patch_n; ++col) {
      out.clean.at(row, col) = clean.at(row + oy, col + ox);
      out.noisy.at(row, col) = noisy.at(row + oy, col + ox);
    }
  }
  return out;
}

PairedSample extract_patch(const ImageTensor& clean, const ImageTensor& noisy,
                           int patch_n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "patch"));
  return extract_patch(clean, noisy, patch_n, rng);
}

ImageTensor apply_dihedral(const ImageTensor& img, int transform) {
  if (transform < 0 || transform > 7) {
    throw Error(ErrorKind::Usage, "dihedral transform id must be in [0, 7]");
  }
  const int n = img.n;
  ImageTensor out(n);
  for (int row = 0; row < n; ++row) {
    for (int col = 0; col < n; ++col) {
      int r = row, c = col;
      switch (transform) {
        case 0: break;
        case 1: r = col; c = n - 1 - row; break;          // rot90
        case 2: r = n - 1 - row; c = n - 1 - col; break;  // rot180
        case 3: r = n - 1 - col; c = row; break;          // rot270
        case 4: c = n - 1 - col; break;                   // mirror x
        case 5: r = n - 1 - row; break;                   // mirror y
        case 6: r = col; c = row; break;                  // transpose
        case 7: r = n - 1 - col; c = n - 1 - row; break;  // anti-transpose
      }
      out.at(r, c) = img.at(row, col);
    }
  }
  return out;
}

PairedSample augment(const PairedSample& s, Rng& rng) {
  s.validate();
  const int t = rng.uniform_int(0, 7);
  PairedSample out;
  out.clean = apply_dihedral(s.clean, t);
  out.noisy = apply_dihedral(s.noisy, t);
  out.meta = s.meta;
  out.meta.transform = t;
  return out;
}

PairedSample augment(const PairedSample& s, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "augment"));
  return augment(s, rng);
}

}  // namespace pfcm
