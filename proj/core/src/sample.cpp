#include "pfcm/sample.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "pfcm/pfkernel.hpp"

namespace pfcm {

using nlohmann::json;

double TaskSamplerConfig::resolve_sigma(const NoiseSchedule& sched) const {
  if (hijack_index != 0) return sched.sigma_at(hijack_index);
  return sigma_hat;
}

void TaskSamplerConfig::validate(const NoiseSchedule& sched) const {
  if (w < 0.0 || w > 1.0) {
    throw Error(ErrorKind::Config, "w must lie in [0, 1]");
  }
  const double sig = resolve_sigma(sched);
  if (sig < sched.sigma_min || sig > sched.sigma_max) {
    throw Error(ErrorKind::Config, "sigma_hat outside [sigma_min, sigma_max]");
  }
}

SampleReport pfcm_sample(const Denoiser& theta, const ImageTensor& y,
                         std::uint64_t seed) {
  theta.require_stage(Stage::pfcm);
  y.require_finite("pfcm_sample condition");
  const auto& sched = theta.meta.schedule;

  const std::uint64_t before = theta.eval_count();
  Rng rng(derive_seed(seed, "pfcm-sample"));
  const ImageTensor prior = sample_prior(sched.sigma_max, theta.meta.d, y.n, rng);
  ImageTensor out = f_apply(theta, prior, sched.sigma_max, y);

  SampleReport rep;
  rep.output = std::move(out);
  rep.nfe = static_cast<int>(theta.eval_count() - before);
  rep.sampler = "vanilla";
  rep.config_echo = json{{"seed", seed}, {"d", theta.meta.d}}.dump();
  return rep;
}

SampleReport task_specific_sample(const Denoiser& theta, const ImageTensor& y,
                                  const TaskSamplerConfig& cfg) {
  theta.require_stage(Stage::pfcm);
  y.require_finite("task sampler input");
  const auto& sched = theta.meta.schedule;
  cfg.validate(sched);
  const double sigma_hat = cfg.resolve_sigma(sched);

  const std::uint64_t before = theta.eval_count();
  // x <- y (hijack), denoise, then the convex mix with the hijacked state.
  ImageTensor x_hat = f_apply(theta, y, sigma_hat, y);
  const float w = static_cast<float>(cfg.w);
  const float wc = static_cast<float>(1.0 - cfg.w);
  for (std::size_t i = 0; i < x_hat.data.size(); ++i) {
    x_hat.data[i] = w * x_hat.data[i] + wc * y.data[i];
  }

  SampleReport rep;
  rep.output = std::move(x_hat);
  rep.nfe = static_cast<int>(theta.eval_count() - before);
  rep.sampler = "task";
  rep.config_echo = json{{"sigma_hat", sigma_hat},
                         {"i", cfg.hijack_index},
                         {"w", cfg.w}}
                        .dump();
  return rep;
}

SampleReport heun_integrate(const DriftFn& drift, ImageTensor x,
                            const ImageTensor& y, const NoiseSchedule& sched) {
  x.require_finite("heun start");
  const std::size_t n_px = x.pixels();
  int evals = 0;
  // Grid intervals sigma_1 -> ... -> sigma_N, then a final Euler step onto
  // sigma == 0 with no corrector there.
  for (int i = 1; i <= sched.n_steps; ++i) {
    const double s_cur = sched.sigma_at(i);
    const double s_next = i < sched.n_steps ? sched.sigma_at(i + 1) : 0.0;
    const double dt = s_next - s_cur;

    const ImageTensor d1 = drift(x, s_cur, y);
    ++evals;
    if (s_next == 0.0) {
      for (std::size_t j = 0; j < n_px; ++j) {
        x.data[j] = static_cast<float>(x.data[j] + dt * d1.data[j]);
      }
      break;
    }
    ImageTensor x_pred(x.n);
    for (std::size_t j = 0; j < n_px; ++j) {
      x_pred.data[j] = static_cast<float>(x.data[j] + dt * d1.data[j]);
    }
    const ImageTensor d2 = drift(x_pred, s_next, y);
    ++evals;
    for (std::size_t j = 0; j < n_px; ++j) {
      x.data[j] = static_cast<float>(x.data[j] +
                                     dt * 0.5 * (d1.data[j] + d2.data[j]));
    }
  }
  x.require_finite("heun_integrate");

  SampleReport rep;
  rep.output = std::move(x);
  rep.nfe = evals;
  rep.sampler = "heun";
  rep.config_echo = json{{"n_steps", sched.n_steps}}.dump();
  return rep;
}

SampleReport heun_sample(const Denoiser& phi, const ImageTensor& y,
                         const NoiseSchedule& sched, std::uint64_t seed) {
  phi.require_stage(Stage::pfgmpp);
  y.require_finite("heun condition");

  const std::uint64_t before = phi.eval_count();
  Rng rng(derive_seed(seed, "heun-prior"));
  ImageTensor x = sample_prior(sched.sigma_max, phi.meta.d, y.n, rng);

  SampleReport rep = heun_integrate(
      [&phi](const ImageTensor& xs, double sigma, const ImageTensor& cond) {
        return phi_pfgmpp(phi, xs, sigma, cond);
      },
      std::move(x), y, sched);
  // report the instrumented counter delta, which must agree with the
  // integrator's own count
  rep.nfe = static_cast<int>(phi.eval_count() - before);
  rep.config_echo = json{{"seed", seed},
                         {"n_steps", sched.n_steps},
                         {"d", phi.meta.d}}
                        .dump();
  return rep;
}

SampleReport hijack_only(const Denoiser& theta, const ImageTensor& y,
                         double sigma_hat) {
  TaskSamplerConfig cfg;
  cfg.sigma_hat = sigma_hat;
  cfg.w = 1.0;
  SampleReport rep = task_specific_sample(theta, y, cfg);
  rep.sampler = "hijack";
  return rep;
}

SampleReport regularize_only(const Denoiser& theta, const ImageTensor& y,
                             double w, std::uint64_t seed) {
  if (w < 0.0 || w > 1.0) {
    throw Error(ErrorKind::Config, "w must lie in [0, 1]");
  }
  SampleReport rep = pfcm_sample(theta, y, seed);
  const float wf = static_cast<float>(w);
  const float wc = static_cast<float>(1.0 - w);
  for (std::size_t i = 0; i < rep.output.data.size(); ++i) {
    rep.output.data[i] = wf * rep.output.data[i] + wc * y.data[i];
  }
  rep.sampler = "reg";
  rep.config_echo = json{{"seed", seed}, {"w", w}}.dump();
  return rep;
}

}  // namespace pfcm
