#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfcm {

// Error categories map 1:1 onto CLI exit codes (see tools/).
enum class ErrorKind {
  Usage,    // bad arguments / flag combinations
  Config,   // config or checkpoint metadata mismatch
  Numeric,  // NaN/Inf where finiteness is required
  Io,       // missing or malformed files
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

// Square grid of normalized intensities, row-major float32.
// Plays every image role in the pipeline: clean target, low-dose input,
// perturbed state, denoised output.
struct ImageTensor {
  int n = 0;
  std::vector<float> data;

  ImageTensor() = default;
  explicit ImageTensor(int n_, float fill = 0.0f);

  float& at(int row, int col) { return data[static_cast<size_t>(row) * n + col]; }
  float at(int row, int col) const { return data[static_cast<size_t>(row) * n + col]; }
  std::size_t pixels() const { return data.size(); }

  bool all_finite() const;
  // Throws Error(Numeric) when a NaN/Inf slipped in.
  void require_finite(const char* where) const;
};

// Throws Error(Config) when n is not a power of two >= 8.
void validate_resolution(int n);

struct SampleMeta {
  std::uint64_t seed = 0;
  double dose_factor = 1.0;
  int transform = 0;  // dihedral transform id, 0 = identity
};

// Matched clean/low-dose pair; windows and transforms are always applied to
// both members identically.
struct PairedSample {
  ImageTensor clean;
  ImageTensor noisy;
  SampleMeta meta;

  void validate() const;  // same resolution, both finite
};

}  // namespace pfcm
