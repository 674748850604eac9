#include "pfcm/types.hpp"

#include <cmath>

namespace pfcm {

ImageTensor::ImageTensor(int n_, float fill) : n(n_) {
  validate_resolution(n_);
  data.assign(static_cast<size_t>(n_) * n_, fill);
}

bool ImageTensor::all_finite() const {
  for (float v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void ImageTensor::require_finite(const char* where) const {
  if (!all_finite()) {
    throw Error(ErrorKind::Numeric,
                std::string("non-finite pixel value in ") + where);
  }
}

void validate_resolution(int n) {
  if (n < 8 || !is_pow2(n)) {
    throw Error(ErrorKind::Config,
                "image resolution must be a power of two >= 8, got " +
                    std::to_string(n));
  }
}

void PairedSample::validate() const {
  if (clean.n != noisy.n) {
    throw Error(ErrorKind::Config, "paired sample resolution mismatch: " +
                                       std::to_string(clean.n) + " vs " +
                                       std::to_string(noisy.n));
  }
  clean.require_finite("PairedSample.clean");
  noisy.require_finite("PairedSample.noisy");
}

}  // namespace pfcm
