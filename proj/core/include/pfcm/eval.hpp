#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pfcm/field.hpp"
#include "pfcm/sample.hpp"
#include "pfcm/types.hpp"

namespace pfcm {

// Optional external perceptual distance (values only); nothing is bundled.
using PerceptualDistance =
    std::function<double(const ImageTensor& a, const ImageTensor& b)>;

enum class Criterion { NegPsnr, NegSsim, ExternalPerceptual };

Criterion criterion_from_name(const std::string& name);
std::string criterion_name(Criterion c);

struct ImageMetrics {
  int image = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> perceptual;
};

struct MetricsReport {
  std::string sampler;
  std::string config_echo;  // JSON text
  int nfe = 0;
  std::vector<ImageMetrics> rows;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
  std::optional<double> perceptual_mean, perceptual_std;

  void recompute_aggregates();
};

// CSV: one row per image; JSON summary carries the aggregates. load_report
// recomputes the aggregates from the rows and refuses mismatches.
void save_report_csv(const std::filesystem::path& file,
                     const std::vector<MetricsReport>& reports);
void save_report_json(const std::filesystem::path& file,
                      const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> load_report_json(const std::filesystem::path& file);

// Evaluates one sampler over a validation set of (clean, noisy) pairs.
using SamplerFn =
    std::function<SampleReport(const ImageTensor& noisy, std::uint64_t seed)>;
MetricsReport evaluate_sampler(const SamplerFn& sampler,
                               const std::vector<PairedSample>& valset,
                               std::uint64_t seed, const std::string& name,
                               const PerceptualDistance& perceptual = {});

struct GridCell {
  int i = 0;
  double w = 0.0;
  double criterion_value = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct GridSearchResult {
  TaskSamplerConfig best;
  double best_value = 0.0;
  std::vector<GridCell> table;  // |i_grid| x |w_grid| rows
};

// Exhaustive search over the (i, w) grid; best cell is the lowest criterion
// value, ties broken by smaller i, then larger w.
GridSearchResult grid_search(const Denoiser& theta,
                             const std::vector<PairedSample>& valset,
                             const std::vector<int>& i_grid,
                             const std::vector<double>& w_grid,
                             Criterion criterion = Criterion::NegPsnr,
                             const PerceptualDistance& perceptual = {});

void save_grid_csv(const std::filesystem::path& file,
                   const GridSearchResult& result);

// The four-sampler ablation (vanilla, +hijack, +regularization,
// +hijack+regularization) with shared per-image seeds.
std::vector<MetricsReport> ablation(const Denoiser& theta,
                                    const std::vector<PairedSample>& valset,
                                    const TaskSamplerConfig& cfg,
                                    std::uint64_t seed,
                                    const PerceptualDistance& perceptual = {});

}  // namespace pfcm
