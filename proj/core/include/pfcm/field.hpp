#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "pfcm/net.hpp"
#include "pfcm/schedule.hpp"
#include "pfcm/types.hpp"

namespace pfcm {

// c_skip/c_out vanish/saturate so that f(x, sigma_min) == x exactly;
// c_in/c_noise normalize the network input.
struct Precond {
  double c_skip = 0.0;
  double c_out = 0.0;
  double c_in = 0.0;
  double c_noise = 0.0;
};

Precond precondition(double sigma, double sigma_data, double sigma_min);

enum class Stage { pfgmpp, pfcm };

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct DenoiserMeta {
  double d = 128.0;
  double sigma_data = 0.5;
  NoiseSchedule schedule;
  std::string conditioning = "lowdose-concat";  // or "none"
  Stage stage = Stage::pfgmpp;
};

// Weights of the free-form network plus the metadata every sampling call is
// checked against. Inference is const; the eval counter backs the exact NFE
// accounting in SampleReport.
struct Denoiser {
  DenoiserMeta meta;
  std::unique_ptr<FreeFormNet> net;
  mutable std::atomic<std::uint64_t> evals{0};

  Denoiser() = default;
  Denoiser(DenoiserMeta m, std::unique_ptr<FreeFormNet> n)
      : meta(std::move(m)), net(std::move(n)) {}
  Denoiser(Denoiser&& other) noexcept
      : meta(std::move(other.meta)),
        net(std::move(other.net)),
        evals(other.evals.load()) {}
  Denoiser& operator=(Denoiser&& other) noexcept {
    meta = std::move(other.meta);
    net = std::move(other.net);
    evals.store(other.evals.load());
    return *this;
  }

  Denoiser clone() const;
  std::uint64_t eval_count() const { return evals.load(); }

  void require_stage(Stage expected) const;
  void require_d(double d) const;
};

// f(x, sigma, y) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x, c_noise, y).
// At sigma_min this returns x regardless of the weights.
ImageTensor f_apply(const Denoiser& den, const ImageTensor& x_sigma,
                    double sigma, const ImageTensor& y);

// Probability-flow drift dx/dt realized through the denoising
// parameterization: (x_sigma - f(x_sigma)) / sigma. phi_edm is the
// Gaussian-limit (large D) configuration of the same code path.
ImageTensor phi_pfgmpp(const Denoiser& den, const ImageTensor& x_sigma,
                       double sigma, const ImageTensor& y);
ImageTensor phi_edm(const Denoiser& den, const ImageTensor& x_sigma,
                    double sigma, const ImageTensor& y);

// Exact drift for a one-point dataset: the augmented field of a single
// charge collapses to (x_sigma - x0) / sigma after alignment.
ImageTensor ideal_field_single_point(const ImageTensor& x_sigma, double sigma,
                                     const ImageTensor& x0);

// Checkpoint container: 8-byte magic, u32 JSON header length, JSON header,
// raw little-endian float32 weights. Loaders refuse stage or metadata
// mismatches.
void save_checkpoint(const std::filesystem::path& file, const Denoiser& den);
Denoiser load_checkpoint(const std::filesystem::path& file,
                         std::optional<Stage> expect_stage = std::nullopt);

}  // namespace pfcm
