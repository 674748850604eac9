#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pfcm/config.hpp"
#include "pfcm/field.hpp"
#include "pfcm/types.hpp"

namespace pfcm {

enum class MetricKind { L2, PseudoHuber, External };

MetricKind metric_from_name(const std::string& name);
std::string metric_name(MetricKind m);

// Seam for an external feature distance (e.g. a perceptual metric served by
// another process). Must return d(a, b) and, when grad_a is non-null, fill
// it with the gradient w.r.t. a. No implementation is bundled.
using ExternalMetric = std::function<double(
    const ImageTensor& a, const ImageTensor& b, ImageTensor* grad_a)>;

struct DistillConfig {
  double mu = 0.95;                     // EMA decay of the target network
  MetricKind metric = MetricKind::PseudoHuber;
  double huber_c_scale = 0.00054;       // c = scale * sqrt(N)
  ExternalMetric external_metric;       // required iff metric == External
  // weighting lambda(sigma_i) is the constant 1
  int n_steps = 40;
  double d = 128.0;
  double lr = 1e-5;
  int iters = 20000;
  int batch = 4;
  std::uint64_t seed = 1;
  std::string optimizer = "radam";      // "adam" accepted as a fallback
  double dropout = 0.0;
  bool init_from_teacher = true;
  int patch = 16;
  int checkpoint_every = 0;             // 0 = final only
  int probe_every = 0;                  // consistency self-error cadence, 0 = endpoints only

  void validate() const;
};

// Rectified Adam (with plain Adam as the configurable fallback).
class Optimizer {
 public:
  Optimizer(const std::string& kind, double lr, std::size_t n_params);

  void step(std::span<float> params, std::span<const float> grads);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long iteration() const { return t_; }

  // Raw state access for resume blobs.
  std::vector<float>& m() { return m_; }
  std::vector<float>& v() { return v_; }
  void set_iteration(long t) { t_ = t; }
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
  double lr_;
  long t_ = 0;
  std::vector<float> m_, v_;
};

double metric_distance(MetricKind kind, double huber_c,
                       const ExternalMetric* ext, const ImageTensor& a,
                       const ImageTensor& b, ImageTensor* grad_a);

// Perturbation-matching objective for one explicit perturbed state:
// || (x_sigma - f)/sigma - (x_sigma - clean)/sigma ||^2 averaged over pixels.
// Accumulates parameter gradients when with_grads is set.
double pfgmpp_residual_loss(Denoiser& phi, const ImageTensor& clean,
                            const ImageTensor& y, double sigma,
                            const ImageTensor& x_sigma, bool with_grads,
                            float dropout, Rng& rng);

// Draws sigma from the training distribution (log-normal in ln sigma,
// clamped to the schedule range), perturbs through the augmented kernel and
// returns the mean residual loss over the batch. Gradients are accumulated
// into phi's network.
double pfgmpp_loss(Denoiser& phi, std::span<const PairedSample> batch,
                   double d, Rng& rng, float dropout = 0.0f);
double pfgmpp_loss(Denoiser& phi, std::span<const PairedSample> batch,
                   double d, std::uint64_t seed, float dropout = 0.0f);

// Consistency-matching loss for one adjacent pair with explicit noise levels.
// The target branch runs inference only: no gradient reaches theta_minus.
double consistency_pair_loss(Denoiser& theta, const Denoiser& theta_minus,
                             const ImageTensor& x_hi, double sigma_hi,
                             const ImageTensor& x_lo, double sigma_lo,
                             const ImageTensor& y, const DistillConfig& cfg,
                             bool with_grads, Rng& rng);

// Probability-flow drift supplied by a teacher; matches phi_pfgmpp for a
// trained network and the closed-form field for the one-point oracle.
using TeacherDrift = std::function<ImageTensor(
    const ImageTensor& x_sigma, double sigma, const ImageTensor& y)>;

// One student update on one sample at ascending grid index i (Algorithm
// step): perturb at sigma_{i+1}, take the teacher's reverse Euler step to
// sigma_i, match the two f evaluations, step theta, EMA theta_minus.
double distill_step(Denoiser& theta, Denoiser& theta_minus,
                    const Denoiser& phi, const PairedSample& sample, int i,
                    const DistillConfig& cfg, Optimizer& opt, Rng& rng);

struct TrainOutput {
  Denoiser model;
  std::vector<double> losses;
  double consistency_error_init = 0.0;
  double consistency_error_final = 0.0;
};

// Stage 1: trains the PFGM++ denoiser. Writes <out_dir>/pfgmpp.ckpt,
// loss_trace.csv and periodic checkpoints when out_dir is non-empty.
// A non-finite loss aborts with the last good checkpoint on disk.
TrainOutput pretrain(const std::vector<PairedSample>& dataset,
                     const RunConfig& cfg,
                     const std::filesystem::path& out_dir = {},
                     const std::filesystem::path& resume_from = {});

// Stage 2: consistency distillation against a frozen pretrained teacher.
// Refuses metadata mismatches between teacher and config.
TrainOutput distill(const Denoiser& teacher,
                    const std::vector<PairedSample>& dataset,
                    const DistillConfig& cfg,
                    const std::filesystem::path& out_dir = {},
                    const std::filesystem::path& resume_from = {});

// Distillation against an arbitrary drift (used with the single-point
// closed-form teacher). student_init supplies the starting weights.
TrainOutput distill_custom(const TeacherDrift& drift, DenoiserMeta meta,
                           std::unique_ptr<FreeFormNet> student_init,
                           const std::vector<PairedSample>& dataset,
                           const DistillConfig& cfg,
                           const std::filesystem::path& out_dir = {},
                           const std::filesystem::path& resume_from = {});

}  // namespace pfcm
