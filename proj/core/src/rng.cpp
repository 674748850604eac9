#include "pfcm/rng.hpp"

#include <cmath>

namespace pfcm {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi) - lo + 1;
  // Rejection sampling over the largest multiple of span below 2^64.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return lo + static_cast<int>(v % span);
}

double Rng::normal() {
  // u1 in (0, 1] so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

double Rng::gamma(double shape) {
  if (shape < 1.0) {
    // Boost by one and correct with u^(1/shape).
    const double g = gamma(shape + 1.0);
    const double u = 1.0 - uniform();
    return g * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
      return d * v;
    }
  }
}

double Rng::beta(double a, double b) {
  const double ga = gamma(a);
  const double gb = gamma(b);
  return ga / (ga + gb);
}

void Rng::fill_normal(std::span<float> out) {
  for (float& v : out) v = static_cast<float>(normal());
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label,
                          std::uint64_t index) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ base;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  h ^= index;
  return splitmix64(h);
}

}  // namespace pfcm
