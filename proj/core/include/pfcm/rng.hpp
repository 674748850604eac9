#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace pfcm {

// Deterministic draws on top of mt19937_64. The standard <random>
// distributions are implementation-defined, so every transform we rely on is
// spelled out here; two builds fed the same seed produce the same streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer on [lo, hi], inclusive, unbiased.
  int uniform_int(int lo, int hi);
  // Standard normal via Box-Muller (no cached spare, so the stream position
  // is a simple function of the draw count).
  double normal();
  // Gamma(shape, 1) via Marsaglia-Tsang; shape > 0.
  double gamma(double shape);
  // Beta(a, b) from two gamma draws.
  double beta(double a, double b);

  void fill_normal(std::span<float> out);

 private:
  std::mt19937_64 gen_;
};

// Splits one base seed into independent task streams. label picks the
// purpose ("pretrain-step", "phantom", ...), index the step or item.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label,
                          std::uint64_t index = 0);

}  // namespace pfcm
