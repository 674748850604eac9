#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "pfcm/field.hpp"
#include "pfcm/schedule.hpp"
#include "pfcm/types.hpp"

namespace pfcm {

// Hijack noise level (by descending grid index or directly) and the
// regularization weight of the task-specific sampler.
struct TaskSamplerConfig {
  int hijack_index = 0;     // 1-based into the descending grid; 0 = use sigma_hat
  double sigma_hat = 0.0;   // used when hijack_index == 0
  double w = 0.7;

  double resolve_sigma(const NoiseSchedule& sched) const;
  void validate(const NoiseSchedule& sched) const;
};

struct SampleReport {
  ImageTensor output;
  int nfe = 0;              // exact network forward evaluations
  std::string sampler;
  std::string config_echo;  // JSON text
};

// Algorithm: draw the prior state on the r_max hyper-cylinder and map it
// through f in one step. nfe == 1.
SampleReport pfcm_sample(const Denoiser& theta, const ImageTensor& y,
                         std::uint64_t seed);

// Task-specific sampler: hijack the process with x <- y, denoise at
// sigma_hat, then mix x_hat <- w x_hat + (1-w) x. Deterministic (no RNG);
// nfe == 1.
SampleReport task_specific_sample(const Denoiser& theta, const ImageTensor& y,
                                  const TaskSamplerConfig& cfg);

// Second-order Heun integration of the probability-flow ODE over the
// descending grid with a final Euler step onto sigma == 0; the last step has
// no corrector, giving exactly 2*(n_steps - 1) + 1 evaluations (79 at 40
// scales). This convention is normative for NFE accounting.
SampleReport heun_sample(const Denoiser& phi, const ImageTensor& y,
                         const NoiseSchedule& sched, std::uint64_t seed);

// Same integrator over an arbitrary drift (e.g. the closed-form single-point
// field); nfe counts the drift evaluations.
using DriftFn = std::function<ImageTensor(const ImageTensor& x_sigma,
                                          double sigma, const ImageTensor& y)>;
SampleReport heun_integrate(const DriftFn& drift, ImageTensor x_start,
                            const ImageTensor& y, const NoiseSchedule& sched);

// Ablation rows: hijack-only is task-specific sampling at w == 1;
// regularize-only runs the vanilla sampler and mixes the result with y.
SampleReport hijack_only(const Denoiser& theta, const ImageTensor& y,
                         double sigma_hat);
SampleReport regularize_only(const Denoiser& theta, const ImageTensor& y,
                             double w, std::uint64_t seed);

}  // namespace pfcm
