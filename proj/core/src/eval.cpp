#include "pfcm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pfcm/config.hpp"
#include "pfcm/metrics.hpp"
#include "pfcm/rng.hpp"

namespace pfcm {

using nlohmann::json;

Criterion criterion_from_name(const std::string& name) {
  if (name == "psnr") return Criterion::NegPsnr;
  if (name == "ssim") return Criterion::NegSsim;
  if (name == "perceptual") return Criterion::ExternalPerceptual;
  throw Error(ErrorKind::Config, "unknown criterion '" + name + "'");
}

std::string criterion_name(Criterion c) {
  switch (c) {
    case Criterion::NegPsnr: return "psnr";
    case Criterion::NegSsim: return "ssim";
    default: return "perceptual";
  }
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0.0;
  sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  sd = std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

void MetricsReport::recompute_aggregates() {
  std::vector<double> ps, ss, pc;
  for (const auto& r : rows) {
    ps.push_back(r.psnr);
    ss.push_back(r.ssim);
    if (r.perceptual) pc.push_back(*r.perceptual);
  }
  mean_std(ps, psnr_mean, psnr_std);
  mean_std(ss, ssim_mean, ssim_std);
  if (!pc.empty() && pc.size() == rows.size()) {
    double m, s;
    mean_std(pc, m, s);
    perceptual_mean = m;
    perceptual_std = s;
  } else {
    perceptual_mean.reset();
    perceptual_std.reset();
  }
}

MetricsReport evaluate_sampler(const SamplerFn& sampler,
                               const std::vector<PairedSample>& valset,
                               std::uint64_t seed, const std::string& name,
                               const PerceptualDistance& perceptual) {
  if (valset.empty()) {
    throw Error(ErrorKind::Config, "evaluate: empty validation set");
  }
  MetricsReport rep;
  rep.sampler = name;
  for (std::size_t k = 0; k < valset.size(); ++k) {
    const auto& pair = valset[k];
    SampleReport sr = sampler(pair.noisy, derive_seed(seed, "eval-image", k));
    ImageMetrics im;
    im.image = static_cast<int>(k);
    im.psnr = psnr(sr.output, pair.clean, 1.0);
    im.ssim = ssim(sr.output, pair.clean);
    if (perceptual) im.perceptual = perceptual(sr.output, pair.clean);
    rep.rows.push_back(im);
    if (k == 0) {
      rep.nfe = sr.nfe;
      rep.config_echo = sr.config_echo;
    }
  }
  rep.recompute_aggregates();
  return rep;
}

namespace {

json report_to_json(const MetricsReport& r) {
  json rows = json::array();
  for (const auto& im : r.rows) {
    json row{{"image", im.image}, {"psnr", im.psnr}, {"ssim", im.ssim}};
    if (im.perceptual) row["perceptual"] = *im.perceptual;
    rows.push_back(row);
  }
  json j{{"sampler", r.sampler},
         {"nfe", r.nfe},
         {"config", r.config_echo.empty() ? json() : json::parse(r.config_echo)},
         {"rows", rows},
         {"psnr_mean", r.psnr_mean},
         {"psnr_std", r.psnr_std},
         {"ssim_mean", r.ssim_mean},
         {"ssim_std", r.ssim_std}};
  if (r.perceptual_mean) {
    j["perceptual_mean"] = *r.perceptual_mean;
    j["perceptual_std"] = *r.perceptual_std;
  }
  return j;
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.sampler = j.at("sampler").get<std::string>();
  r.nfe = j.at("nfe").get<int>();
  if (!j.at("config").is_null()) r.config_echo = j.at("config").dump();
  for (const auto& row : j.at("rows")) {
    ImageMetrics im;
    im.image = row.at("image").get<int>();
    im.psnr = row.at("psnr").get<double>();
    im.ssim = row.at("ssim").get<double>();
    if (row.contains("perceptual")) {
      im.perceptual = row.at("perceptual").get<double>();
    }
    r.rows.push_back(im);
  }
  const double psnr_mean = j.at("psnr_mean").get<double>();
  const double ssim_mean = j.at("ssim_mean").get<double>();
  r.recompute_aggregates();
  if (std::abs(psnr_mean - r.psnr_mean) > 1e-9 ||
      std::abs(ssim_mean - r.ssim_mean) > 1e-9) {
    throw Error(ErrorKind::Io,
                "report aggregates do not match the per-image rows");
  }
  return r;
}

}  // namespace

void save_report_csv(const std::filesystem::path& file,
                     const std::vector<MetricsReport>& reports) {
  std::ofstream out(file);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + file.string());
  out << "sampler,image,psnr,ssim,perceptual,nfe\n";
  for (const auto& r : reports) {
    for (const auto& im : r.rows) {
      out << r.sampler << "," << im.image << "," << format_double(im.psnr)
          << "," << format_double(im.ssim) << ",";
      if (im.perceptual) out << format_double(*im.perceptual);
      out << "," << r.nfe << "\n";
    }
  }
}

void save_report_json(const std::filesystem::path& file,
                      const std::vector<MetricsReport>& reports) {
  json j = json::array();
  for (const auto& r : reports) j.push_back(report_to_json(r));
  std::ofstream out(file);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + file.string());
  out << j.dump(2) << "\n";
}

std::vector<MetricsReport> load_report_json(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("malformed report: ") + e.what());
  }
  std::vector<MetricsReport> out;
  for (const auto& item : j) out.push_back(report_from_json(item));
  return out;
}

GridSearchResult grid_search(const Denoiser& theta,
                             const std::vector<PairedSample>& valset,
                             const std::vector<int>& i_grid,
                             const std::vector<double>& w_grid,
                             Criterion criterion,
                             const PerceptualDistance& perceptual) {
  theta.require_stage(Stage::pfcm);
  if (valset.empty()) {
    throw Error(ErrorKind::Config, "grid_search: empty validation set");
  }
  if (i_grid.empty() || w_grid.empty()) {
    throw Error(ErrorKind::Config, "grid_search: empty grid");
  }
  if (criterion == Criterion::ExternalPerceptual && !perceptual) {
    throw Error(ErrorKind::Config,
                "perceptual criterion requires an external adapter");
  }

  GridSearchResult result;
  result.table.reserve(i_grid.size() * w_grid.size());
  bool have_best = false;
  for (int i : i_grid) {
    for (double w : w_grid) {
      TaskSamplerConfig cfg;
      cfg.hijack_index = i;
      cfg.w = w;
      cfg.validate(theta.meta.schedule);

      double psum = 0.0, ssum = 0.0, csum = 0.0;
      for (const auto& pair : valset) {
        const SampleReport sr = task_specific_sample(theta, pair.noisy, cfg);
        const double p = psnr(sr.output, pair.clean, 1.0);
        const double s = ssim(sr.output, pair.clean);
        psum += p;
        ssum += s;
        switch (criterion) {
          case Criterion::NegPsnr: csum += -p; break;
          case Criterion::NegSsim: csum += -s; break;
          case Criterion::ExternalPerceptual:
            csum += perceptual(sr.output, pair.clean);
            break;
        }
      }
      const double inv = 1.0 / static_cast<double>(valset.size());
      GridCell cell;
      cell.i = i;
      cell.w = w;
      cell.psnr = psum * inv;
      cell.ssim = ssum * inv;
      cell.criterion_value = csum * inv;
      result.table.push_back(cell);

      const bool better =
          !have_best || cell.criterion_value < result.best_value ||
          (cell.criterion_value == result.best_value &&
           (i < result.best.hijack_index ||
            (i == result.best.hijack_index && w > result.best.w)));
      if (better) {
        have_best = true;
        result.best = cfg;
        result.best_value = cell.criterion_value;
      }
    }
  }
  return result;
}

void save_grid_csv(const std::filesystem::path& file,
                   const GridSearchResult& result) {
  std::ofstream out(file);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + file.string());
  out << "i,w,criterion,psnr,ssim\n";
  for (const auto& c : result.table) {
    out << c.i << "," << format_double(c.w) << ","
        << format_double(c.criterion_value) << "," << format_double(c.psnr)
        << "," << format_double(c.ssim) << "\n";
  }
}

std::vector<MetricsReport> ablation(const Denoiser& theta,
                                    const std::vector<PairedSample>& valset,
                                    const TaskSamplerConfig& cfg,
                                    std::uint64_t seed,
                                    const PerceptualDistance& perceptual) {
  theta.require_stage(Stage::pfcm);
  cfg.validate(theta.meta.schedule);
  const double sigma_hat = cfg.resolve_sigma(theta.meta.schedule);

  std::vector<MetricsReport> reports;
  reports.push_back(evaluate_sampler(
      [&theta](const ImageTensor& y, std::uint64_t s) {
        return pfcm_sample(theta, y, s);
      },
      valset, seed, "vanilla", perceptual));
  reports.push_back(evaluate_sampler(
      [&theta, sigma_hat](const ImageTensor& y, std::uint64_t) {
        return hijack_only(theta, y, sigma_hat);
      },
      valset, seed, "hijack", perceptual));
  reports.push_back(evaluate_sampler(
      [&theta, &cfg](const ImageTensor& y, std::uint64_t s) {
        return regularize_only(theta, y, cfg.w, s);
      },
      valset, seed, "reg", perceptual));
  reports.push_back(evaluate_sampler(
      [&theta, &cfg](const ImageTensor& y, std::uint64_t) {
        return task_specific_sample(theta, y, cfg);
      },
      valset, seed, "task", perceptual));
  return reports;
}

}  // namespace pfcm
