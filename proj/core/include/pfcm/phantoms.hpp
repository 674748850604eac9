#pragma once

#include <cstdint>

#include "pfcm/rng.hpp"
#include "pfcm/types.hpp"

namespace pfcm {

// Ellipse-phantom generator settings. Intensities are additive on top of the
// background and the result is clipped to [0, 1].
struct PhantomSpec {
  int n = 32;
  int min_ellipses = 3;
  int max_ellipses = 6;
  float intensity_lo = 0.15f;
  float intensity_hi = 0.6f;
  float background = 0.1f;

  void validate() const;
};

// Dose-dependent degradation: stationary zero-mean Gaussian noise, spatially
// correlated by a Gaussian kernel, with std = base_std / sqrt(dose_factor).
struct DoseModel {
  double dose_factor = 0.25;
  double texture_kernel_width = 1.2;  // pixels
  double base_std = 0.10;             // noise std at full dose

  void validate() const;
  double noise_std() const;
};

// Deterministic under seed; at least one ellipse lies fully inside the field
// of view whenever the spec allows one.
ImageTensor generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

// y = clip(x + eta); eta is mean-preserving before the clip.
ImageTensor degrade(const ImageTensor& x, const DoseModel& dose,
                    std::uint64_t seed);

// Cuts the same patch_n x patch_n window from both images; offsets uniform
// over the valid range.
PairedSample extract_patch(const ImageTensor& clean, const ImageTensor& noisy,
                           int patch_n, std::uint64_t seed);
PairedSample extract_patch(const ImageTensor& clean, const ImageTensor& noisy,
                           int patch_n, Rng& rng);

// One of the 8 dihedral transforms, drawn uniformly and applied identically
// to both members of the pair.
PairedSample augment(const PairedSample& s, std::uint64_t seed);
PairedSample augment(const PairedSample& s, Rng& rng);

// transform ids: 0 identity, 1..3 rotations by 90/180/270, 4 horizontal
// mirror, 5 vertical mirror, 6 transpose, 7 anti-transpose.
ImageTensor apply_dihedral(const ImageTensor& img, int transform);

}  // namespace pfcm
