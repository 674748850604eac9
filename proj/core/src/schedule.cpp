#include "pfcm/schedule.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "pfcm/types.hpp"

namespace pfcm {

namespace {

std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                      std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

double NoiseSchedule::sigma_at(int i) const {
  if (i < 1 || i > n_steps) {
    throw Error(ErrorKind::Usage, "schedule index " + std::to_string(i) +
                                      " outside [1, " + std::to_string(n_steps) +
                                      "]");
  }
  return sigmas[static_cast<size_t>(i) - 1];
}

double NoiseSchedule::sigma_ascending(int i) const {
  return sigma_at(n_steps - i + 1);
}

std::uint64_t NoiseSchedule::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a64(&sigma_min, sizeof(sigma_min), h);
  h = fnv1a64(&sigma_max, sizeof(sigma_max), h);
  h = fnv1a64(&rho, sizeof(rho), h);
  h = fnv1a64(&n_steps, sizeof(n_steps), h);
  return h;
}

NoiseSchedule build_schedule(double sigma_min, double sigma_max, double rho,
                             int n_steps) {
  if (!(sigma_min > 0.0) || !(sigma_max > 0.0)) {
    throw Error(ErrorKind::Config, "sigma bounds must be positive");
  }
  if (!(sigma_min < sigma_max)) {
    throw Error(ErrorKind::Config, "requires sigma_min < sigma_max");
  }
  if (!(rho > 0.0)) {
    throw Error(ErrorKind::Config, "rho must be positive");
  }
  if (n_steps < 2) {
    throw Error(ErrorKind::Config, "n_steps must be >= 2");
  }

  NoiseSchedule s;
  s.sigma_min = sigma_min;
  s.sigma_max = sigma_max;
  s.rho = rho;
  s.n_steps = n_steps;
  s.sigmas.resize(static_cast<size_t>(n_steps));

  const double inv_rho = 1.0 / rho;
  const double hi = std::pow(sigma_max, inv_rho);
  const double lo = std::pow(sigma_min, inv_rho);
  for (int i = 0; i < n_steps; ++i) {
    const double u = static_cast<double>(i) / (n_steps - 1);
    s.sigmas[static_cast<size_t>(i)] = std::pow(hi + u * (lo - hi), rho);
  }
  // Endpoints exact regardless of pow() rounding.
  s.sigmas.front() = sigma_max;
  s.sigmas.back() = sigma_min;

  for (int i = 1; i < n_steps; ++i) {
    if (!(s.sigmas[static_cast<size_t>(i)] < s.sigmas[static_cast<size_t>(i) - 1])) {
      throw Error(ErrorKind::Numeric, "schedule is not strictly decreasing");
    }
  }
  return s;
}

double index_to_sigma(const NoiseSchedule& sched, int i) {
  return sched.sigma_at(i);
}

}  // namespace pfcm
