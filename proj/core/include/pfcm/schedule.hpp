#pragma once

#include <cstdint>
#include <vector>

namespace pfcm {

// Discretized noise-scale grid, stored descending: sigma_at(1) == sigma_max,
// sigma_at(n_steps) == sigma_min. Distillation indexes the same grid
// ascending through sigma_ascending().
struct NoiseSchedule {
  double sigma_min = 0.0;
  double sigma_max = 0.0;
  double rho = 0.0;
  int n_steps = 0;
  std::vector<double> sigmas;  // descending, size n_steps

  // 1-based, descending convention.
  double sigma_at(int i) const;
  // 1-based, ascending convention (1 -> sigma_min, n_steps -> sigma_max).
  double sigma_ascending(int i) const;

  // Stable content hash over (sigma_min, sigma_max, rho, n_steps); used to
  // refuse teacher/student metadata mismatches.
  std::uint64_t hash() const;

  bool same_grid(const NoiseSchedule& other) const {
    return hash() == other.hash();
  }
};

// rho-warped power grid between sigma_max and sigma_min:
//   sigma(u) = (sigma_max^(1/rho) + u * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho
// with u running uniformly over [0, 1] across the indices. Endpoints are
// pinned exactly. Rejects non-positive or non-monotone inputs.
NoiseSchedule build_schedule(double sigma_min, double sigma_max, double rho,
                             int n_steps);

double index_to_sigma(const NoiseSchedule& sched, int i);

}  // namespace pfcm
