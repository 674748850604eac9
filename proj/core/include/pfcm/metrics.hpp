#pragma once

#include "pfcm/types.hpp"

namespace pfcm {

// 10 log10(range^2 / MSE) in dB; +infinity when the images are identical.
double psnr(const ImageTensor& a, const ImageTensor& b, double data_range);

// Mean local SSIM, 11x11 Gaussian window (std 1.5), K1 = 0.01, K2 = 0.03,
// data range 1.0, windows fully inside the image. Requires n >= 11.
double ssim(const ImageTensor& a, const ImageTensor& b);

}  // namespace pfcm
