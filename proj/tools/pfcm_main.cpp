// pfcm: end-to-end driver for the Poisson-flow consistency pipeline.
// Subcommands: phantom-gen, pretrain, distill, denoise, gridsearch,
// evaluate, ablate. Every invocation appends one manifest record under the
// output directory. Exit codes: 0 ok, 2 usage, 3 config/metadata mismatch,
// 4 numeric failure, 5 I/O.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pfcm/config.hpp"
#include "pfcm/eval.hpp"
#include "pfcm/field.hpp"
#include "pfcm/io.hpp"
#include "pfcm/metrics.hpp"
#include "pfcm/phantoms.hpp"
#include "pfcm/sample.hpp"
#include "pfcm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pfcm;

namespace {

constexpr const char* kVersion = "pfcm 0.1.0";

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return 2;
    case ErrorKind::Config: return 3;
    case ErrorKind::Numeric: return 4;
    case ErrorKind::Io: return 5;
  }
  return 1;
}

// Deterministic artifact hash: loss traces carry a wallclock column, which
// is stripped before hashing so reruns of the same seed hash identically.
std::uint64_t artifact_hash(const fs::path& file) {
  if (file.filename() == "loss_trace.csv" ||
      file.filename() == "consistency_trace.csv") {
    std::ifstream in(file);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + file.string());
    std::string line, keep;
    while (std::getline(in, line)) {
      const auto pos = line.rfind(',');
      keep += (pos == std::string::npos) ? line : line.substr(0, pos);
      keep += '\n';
    }
    return fnv1a64_bytes(keep.data(), keep.size());
  }
  return fnv1a64_file(file);
}

struct ManifestScribe {
  std::string command;
  std::vector<std::string> argv;
  json config_echo;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<fs::path> outputs;
  fs::path out_dir;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

  void write() const {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    json m{{"command", command},
           {"argv", argv},
           {"config", config_echo},
           {"seed", seed},
           {"inputs", inputs},
           {"version", kVersion}};
    json outs = json::array();
    for (const auto& p : outputs) {
      outs.push_back({{"path", p.string()}, {"fnv64", hex64(artifact_hash(p))}});
    }
    m["outputs"] = outs;
    m["wallclock_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    std::ofstream out(out_dir / "manifests.jsonl", std::ios::app);
    if (!out) {
      throw Error(ErrorKind::Io, "cannot append manifest in " + out_dir.string());
    }
    out << m.dump() << "\n";
  }
};

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("PFCM_SEED");
  if (!v) return std::nullopt;
  try {
    return static_cast<std::uint64_t>(std::stoull(v));
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, "PFCM_SEED is not an integer");
  }
}

// flag > env (PFCM_SEED) > config file > default
struct CommonOpts {
  std::string config_file;
  std::string out_dir;
  std::optional<std::uint64_t> seed_flag;

  RunConfig resolve(CLI::App* cmd) const {
    RunConfig cfg;
    if (!config_file.empty()) cfg = load_run_config(config_file);
    if (auto es = env_seed()) cfg.seed = *es;
    if (seed_flag) cfg.seed = *seed_flag;
    apply_flag_overrides(cmd, cfg);
    cfg.validate();
    return cfg;
  }

  static void apply_flag_overrides(CLI::App* cmd, RunConfig& cfg) {
    auto set_d = [&](const char* flag, double& dst) {
      if (cmd->count(flag)) dst = cmd->get_option(flag)->as<double>();
    };
    auto set_i = [&](const char* flag, int& dst) {
      if (cmd->count(flag)) dst = cmd->get_option(flag)->as<int>();
    };
    set_d("--d", cfg.d);
    set_d("--sigma-min", cfg.sigma_min);
    set_d("--sigma-max", cfg.sigma_max);
    set_d("--rho", cfg.rho);
    set_i("--n-steps", cfg.n_steps);
    set_d("--sigma-data", cfg.sigma_data);
    set_d("--lr", cfg.lr);
    set_i("--iters", cfg.iters);
    set_i("--batch", cfg.batch);
    set_d("--dropout", cfg.dropout);
    set_i("--patch", cfg.patch);
    set_i("--width", cfg.net.base_width);
    set_i("--levels", cfg.net.levels);
    set_i("--blocks", cfg.net.blocks_per_level);
    set_i("--emb-dim", cfg.net.emb_dim);
  }
};

void add_run_config_flags(CLI::App* cmd) {
  cmd->add_option("--d", "augmentation dimension D");
  cmd->add_option("--sigma-min", "lowest noise scale");
  cmd->add_option("--sigma-max", "highest noise scale");
  cmd->add_option("--rho", "schedule warp exponent");
  cmd->add_option("--n-steps", "number of noise scales");
  cmd->add_option("--sigma-data", "data std used by the preconditioner");
  cmd->add_option("--lr", "learning rate");
  cmd->add_option("--iters", "training iterations");
  cmd->add_option("--batch", "batch size");
  cmd->add_option("--dropout", "dropout rate");
  cmd->add_option("--patch", "training patch size");
  cmd->add_option("--width", "network base width");
  cmd->add_option("--levels", "network resolution levels");
  cmd->add_option("--blocks", "res blocks per level");
  cmd->add_option("--emb-dim", "noise embedding width");
}

json run_config_json(const RunConfig& c) {
  return json{{"d", c.d},
              {"sigma_min", c.sigma_min},
              {"sigma_max", c.sigma_max},
              {"rho", c.rho},
              {"n_steps", c.n_steps},
              {"sigma_data", c.sigma_data},
              {"seed", c.seed},
              {"lr", c.lr},
              {"iters", c.iters},
              {"batch", c.batch},
              {"dropout", c.dropout},
              {"patch", c.patch},
              {"width", c.net.base_width},
              {"levels", c.net.levels},
              {"blocks", c.net.blocks_per_level},
              {"emb_dim", c.net.emb_dim}};
}

std::vector<int> parse_int_grid(const std::string& text) {
  std::vector<int> out;
  if (text.find(':') != std::string::npos) {
    int lo, hi;
    if (std::sscanf(text.c_str(), "%d:%d", &lo, &hi) != 2 || hi < lo) {
      throw Error(ErrorKind::Usage, "bad integer grid '" + text + "'");
    }
    for (int v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  if (out.empty()) throw Error(ErrorKind::Usage, "empty grid '" + text + "'");
  return out;
}

std::vector<double> parse_double_grid(const std::string& text) {
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    double lo, hi, step;
    if (std::sscanf(text.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3 ||
        step <= 0.0) {
      throw Error(ErrorKind::Usage,
                  "bad grid '" + text + "', expected lo:hi:step");
    }
    for (double v = lo; v <= hi + 1e-12; v += step) out.push_back(v);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  if (out.empty()) throw Error(ErrorKind::Usage, "empty grid '" + text + "'");
  return out;
}

// ---- subcommand bodies -------------------------------------------------------

struct PhantomGenArgs {
  CommonOpts common;
  int count = 16;
  int n = 32;
  double dose = 0.25;
  double kernel_width = 1.2;
  double base_std = 0.10;
  int min_ellipses = 3;
  int max_ellipses = 6;
  double intensity_lo = 0.15;
  double intensity_hi = 0.6;
  double background = 0.1;
};

void run_phantom_gen(const PhantomGenArgs& a, ManifestScribe& ms) {
  RunConfig cfg;
  if (!a.common.config_file.empty()) cfg = load_run_config(a.common.config_file);
  if (auto es = env_seed()) cfg.seed = *es;
  if (a.common.seed_flag) cfg.seed = *a.common.seed_flag;

  PhantomSpec spec;
  spec.n = a.n;
  spec.min_ellipses = a.min_ellipses;
  spec.max_ellipses = a.max_ellipses;
  spec.intensity_lo = static_cast<float>(a.intensity_lo);
  spec.intensity_hi = static_cast<float>(a.intensity_hi);
  spec.background = static_cast<float>(a.background);
  DoseModel dose;
  dose.dose_factor = a.dose;
  dose.texture_kernel_width = a.kernel_width;
  dose.base_std = a.base_std;
  dose.validate();

  const fs::path dir(a.common.out_dir);
  fs::create_directories(dir);
  std::vector<DatasetEntry> entries;
  char stem[64];
  for (int k = 0; k < a.count; ++k) {
    const std::uint64_t gseed =
        derive_seed(cfg.seed, "phantom-image", static_cast<std::uint64_t>(k));
    const ImageTensor clean = generate_phantom(spec, gseed);
    const std::uint64_t dseed =
        derive_seed(cfg.seed, "phantom-dose", static_cast<std::uint64_t>(k));
    const ImageTensor noisy = degrade(clean, dose, dseed);

    std::snprintf(stem, sizeof(stem), "clean_%04d", k);
    save_image(dir / stem, clean, {spec.n, "clean", gseed, a.dose, 0});
    entries.push_back({stem, ""});
    std::snprintf(stem, sizeof(stem), "noisy_%04d", k);
    save_image(dir / stem, noisy, {spec.n, "noisy", dseed, a.dose, 0});
    entries.back().noisy_stem = stem;

    ms.outputs.push_back(dir / (entries.back().clean_stem + ".bin"));
    ms.outputs.push_back(dir / (entries.back().noisy_stem + ".bin"));
  }
  save_dataset_manifest(dir, entries);
  ms.outputs.push_back(dir / "manifest.json");
  ms.seed = cfg.seed;
  ms.config_echo = json{{"count", a.count},
                        {"n", a.n},
                        {"dose_factor", a.dose},
                        {"kernel_width", a.kernel_width},
                        {"base_std", a.base_std},
                        {"ellipses", {a.min_ellipses, a.max_ellipses}},
                        {"seed", cfg.seed}};
  std::cout << "wrote " << a.count << " pairs to " << dir << "\n";
}

void run_pretrain(CLI::App* cmd, const CommonOpts& common,
                  const std::string& data_dir, const std::string& resume,
                  ManifestScribe& ms) {
  const RunConfig cfg = common.resolve(cmd);
  const auto dataset = load_dataset(data_dir);
  const fs::path out(common.out_dir);

  std::cout << "pretraining PFGM++ (D=" << cfg.d << ", iters=" << cfg.iters
            << ") on " << dataset.size() << " pairs\n";
  TrainOutput res = pretrain(dataset, cfg, out, resume);
  if (!res.losses.empty()) {
    std::cout << "final loss " << res.losses.back() << "\n";
  }
  ms.seed = cfg.seed;
  ms.config_echo = run_config_json(cfg);
  ms.inputs.push_back(data_dir);
  ms.outputs.push_back(out / "pfgmpp.ckpt");
  if (fs::exists(out / "loss_trace.csv")) {
    ms.outputs.push_back(out / "loss_trace.csv");
  }
}

void run_distill(CLI::App* cmd, const CommonOpts& common,
                 const std::string& teacher_path, const std::string& data_dir,
                 const std::string& metric, const std::string& optimizer,
                 double mu, const std::string& init_mode,
                 const std::string& resume, ManifestScribe& ms) {
  RunConfig rc = common.resolve(cmd);
  const Denoiser teacher = load_checkpoint(teacher_path, Stage::pfgmpp);

  DistillConfig cfg;
  cfg.mu = mu;
  cfg.metric = metric_from_name(metric);
  cfg.optimizer = optimizer;
  cfg.init_from_teacher = init_mode != "random";
  // teacher metadata rules unless explicitly overridden (mismatches are
  // refused downstream)
  cfg.d = cmd->count("--d") ? rc.d : teacher.meta.d;
  cfg.n_steps = cmd->count("--n-steps") ? rc.n_steps
                                        : teacher.meta.schedule.n_steps;
  cfg.lr = cmd->count("--lr") ? rc.lr : 1e-5;
  cfg.iters = rc.iters;
  cfg.batch = rc.batch;
  cfg.seed = rc.seed;
  cfg.dropout = cmd->count("--dropout") ? rc.dropout : 0.0;
  cfg.patch = rc.patch;

  const auto dataset = load_dataset(data_dir);
  const fs::path out(common.out_dir);
  std::cout << "distilling PFCM (D=" << cfg.d << ", iters=" << cfg.iters
            << ", metric=" << metric_name(cfg.metric) << ")\n";
  TrainOutput res = distill(teacher, dataset, cfg, out, resume);
  std::cout << "consistency self-error " << res.consistency_error_init
            << " -> " << res.consistency_error_final << "\n";

  ms.seed = cfg.seed;
  ms.config_echo = json{{"mu", cfg.mu},
                        {"metric", metric_name(cfg.metric)},
                        {"n_steps", cfg.n_steps},
                        {"d", cfg.d},
                        {"lr", cfg.lr},
                        {"iters", cfg.iters},
                        {"batch", cfg.batch},
                        {"seed", cfg.seed},
                        {"optimizer", cfg.optimizer},
                        {"dropout", cfg.dropout},
                        {"init", init_mode},
                        {"patch", cfg.patch}};
  ms.inputs.push_back(teacher_path);
  ms.inputs.push_back(data_dir);
  ms.outputs.push_back(out / "pfcm.ckpt");
  if (fs::exists(out / "loss_trace.csv")) {
    ms.outputs.push_back(out / "loss_trace.csv");
  }
}

struct SamplerArgs {
  std::string sampler = "task";
  double w = 0.7;
  int hijack_i = 0;
  double sigma_hat = 0.0;
  std::uint64_t seed = 1;
};

SampleReport dispatch_sampler(const Denoiser& model, const ImageTensor& y,
                              const SamplerArgs& sa) {
  if (sa.sampler == "vanilla") return pfcm_sample(model, y, sa.seed);
  if (sa.sampler == "heun") {
    return heun_sample(model, y, model.meta.schedule, sa.seed);
  }
  TaskSamplerConfig cfg;
  cfg.hijack_index = sa.hijack_i;
  cfg.sigma_hat = sa.sigma_hat;
  cfg.w = sa.w;
  if (sa.sampler == "task") return task_specific_sample(model, y, cfg);
  if (sa.sampler == "hijack") {
    return hijack_only(model, y, cfg.resolve_sigma(model.meta.schedule));
  }
  if (sa.sampler == "reg") return regularize_only(model, y, sa.w, sa.seed);
  throw Error(ErrorKind::Usage, "unknown sampler '" + sa.sampler + "'");
}

void run_denoise(const CommonOpts& common, const std::string& ckpt,
                 const std::string& input, const SamplerArgs& sa_in,
                 bool dump_diff, ManifestScribe& ms) {
  SamplerArgs sa = sa_in;
  if (auto es = env_seed()) sa.seed = *es;
  if (common.seed_flag) sa.seed = *common.seed_flag;

  const Denoiser model = load_checkpoint(
      ckpt, sa.sampler == "heun" ? Stage::pfgmpp : Stage::pfcm);
  ImageSidecar meta;
  const ImageTensor y = load_image(input, &meta);

  const SampleReport rep = dispatch_sampler(model, y, sa);
  const fs::path out(common.out_dir);
  fs::create_directories(out);
  save_image(out / "denoised", rep.output,
             {rep.output.n, "denoised", sa.seed, meta.dose_factor, 0});
  {
    json j{{"sampler", rep.sampler},
           {"nfe", rep.nfe},
           {"config", json::parse(rep.config_echo)},
           {"input", input},
           {"checkpoint", ckpt}};
    std::ofstream rj(out / "report.json");
    rj << j.dump(2) << "\n";
  }
  if (dump_diff) {
    ImageTensor diff(y.n);
    for (std::size_t i = 0; i < diff.data.size(); ++i) {
      diff.data[i] = std::abs(rep.output.data[i] - y.data[i]);
    }
    save_image(out / "diff", diff, {y.n, "diff", sa.seed, meta.dose_factor, 0});
    ms.outputs.push_back(out / "diff.bin");
  }

  ms.seed = sa.seed;
  ms.config_echo = json::parse(rep.config_echo);
  ms.config_echo["sampler"] = rep.sampler;
  ms.inputs = {ckpt, input};
  ms.outputs.push_back(out / "denoised.bin");
  ms.outputs.push_back(out / "report.json");
  std::cout << rep.sampler << " sampler, nfe=" << rep.nfe << "\n";
}

void run_gridsearch(const CommonOpts& common, const std::string& ckpt,
                    const std::string& data_dir, const std::string& i_text,
                    const std::string& w_text, const std::string& criterion,
                    ManifestScribe& ms) {
  const Denoiser model = load_checkpoint(ckpt, Stage::pfcm);
  const auto valset = load_dataset(data_dir);
  const auto i_grid = parse_int_grid(i_text);
  const auto w_grid = parse_double_grid(w_text);

  const GridSearchResult res =
      grid_search(model, valset, i_grid, w_grid, criterion_from_name(criterion));

  const fs::path out(common.out_dir);
  fs::create_directories(out);
  save_grid_csv(out / "grid.csv", res);
  {
    json j{{"best_i", res.best.hijack_index},
           {"best_w", res.best.w},
           {"best_sigma", res.best.resolve_sigma(model.meta.schedule)},
           {"criterion", criterion},
           {"best_value", res.best_value}};
    std::ofstream bj(out / "best.json");
    bj << j.dump(2) << "\n";
  }
  ms.config_echo = json{{"i_grid", i_text},
                        {"w_grid", w_text},
                        {"criterion", criterion}};
  ms.inputs = {ckpt, data_dir};
  ms.outputs = {out / "grid.csv", out / "best.json"};
  std::cout << "best cell: i=" << res.best.hijack_index << " w=" << res.best.w
            << " (" << criterion << "=" << res.best_value << ")\n";
}

void run_evaluate(const CommonOpts& common, const std::string& ckpt,
                  const std::string& data_dir, const SamplerArgs& sa_in,
                  bool dump_diff, ManifestScribe& ms) {
  SamplerArgs sa = sa_in;
  if (auto es = env_seed()) sa.seed = *es;
  if (common.seed_flag) sa.seed = *common.seed_flag;

  const Denoiser model = load_checkpoint(
      ckpt, sa.sampler == "heun" ? Stage::pfgmpp : Stage::pfcm);
  const auto valset = load_dataset(data_dir);

  const fs::path out(common.out_dir);
  fs::create_directories(out);
  std::size_t image_idx = 0;
  const MetricsReport rep = evaluate_sampler(
      [&](const ImageTensor& y, std::uint64_t s) {
        SamplerArgs per = sa;
        per.seed = s;
        SampleReport r = dispatch_sampler(model, y, per);
        if (dump_diff) {
          ImageTensor diff(y.n);
          const auto& clean = valset[image_idx].clean;
          for (std::size_t i = 0; i < diff.data.size(); ++i) {
            diff.data[i] = std::abs(r.output.data[i] - clean.data[i]);
          }
          char stem[32];
          std::snprintf(stem, sizeof(stem), "diff_%04zu", image_idx);
          save_image(out / stem, diff, {y.n, "diff", s, 1.0, 0});
        }
        ++image_idx;
        return r;
      },
      valset, sa.seed, sa.sampler);

  save_report_csv(out / "metrics.csv", {rep});
  save_report_json(out / "metrics.json", {rep});
  ms.seed = sa.seed;
  ms.config_echo =
      json{{"sampler", sa.sampler}, {"w", sa.w}, {"i", sa.hijack_i}};
  ms.inputs = {ckpt, data_dir};
  ms.outputs = {out / "metrics.csv", out / "metrics.json"};
  std::cout << sa.sampler << ": PSNR " << rep.psnr_mean << " +- "
            << rep.psnr_std << " dB, SSIM " << rep.ssim_mean << " +- "
            << rep.ssim_std << ", NFE " << rep.nfe << "\n";
}

void run_ablate(const CommonOpts& common, const std::string& ckpt,
                const std::string& data_dir, int hijack_i, double sigma_hat,
                double w, ManifestScribe& ms) {
  std::uint64_t seed = 1;
  if (auto es = env_seed()) seed = *es;
  if (common.seed_flag) seed = *common.seed_flag;

  const Denoiser model = load_checkpoint(ckpt, Stage::pfcm);
  const auto valset = load_dataset(data_dir);

  TaskSamplerConfig cfg;
  cfg.hijack_index = hijack_i;
  cfg.sigma_hat = sigma_hat;
  cfg.w = w;
  const auto reports = ablation(model, valset, cfg, seed);

  const fs::path out(common.out_dir);
  fs::create_directories(out);
  save_report_csv(out / "ablation.csv", reports);
  save_report_json(out / "ablation.json", reports);

  ms.seed = seed;
  ms.config_echo = json{{"i", hijack_i}, {"sigma_hat", sigma_hat}, {"w", w}};
  ms.inputs = {ckpt, data_dir};
  ms.outputs = {out / "ablation.csv", out / "ablation.json"};
  for (const auto& r : reports) {
    std::cout << r.sampler << ": PSNR " << r.psnr_mean << " +- " << r.psnr_std
              << " dB, SSIM " << r.ssim_mean << ", NFE " << r.nfe << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Poisson-flow consistency model pipeline"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // phantom-gen
  auto* pg = app.add_subcommand("phantom-gen", "generate paired phantom data");
  PhantomGenArgs pga;
  pg->add_option("--out", pga.common.out_dir, "output directory")->required();
  pg->add_option("--config", pga.common.config_file, "config file");
  pg->add_option("--seed", pga.common.seed_flag, "base seed");
  pg->add_option("--count", pga.count, "number of pairs");
  pg->add_option("--n", pga.n, "image resolution");
  pg->add_option("--dose", pga.dose, "relative dose factor");
  pg->add_option("--kernel-width", pga.kernel_width, "noise texture width (px)");
  pg->add_option("--base-std", pga.base_std, "noise std at full dose");
  pg->add_option("--min-ellipses", pga.min_ellipses);
  pg->add_option("--max-ellipses", pga.max_ellipses);
  pg->add_option("--intensity-lo", pga.intensity_lo);
  pg->add_option("--intensity-hi", pga.intensity_hi);
  pg->add_option("--background", pga.background);

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "train the PFGM++ denoiser");
  CommonOpts pt_common;
  std::string pt_data, pt_resume;
  pt->add_option("--data", pt_data, "dataset directory")->required();
  pt->add_option("--out", pt_common.out_dir, "output directory")->required();
  pt->add_option("--config", pt_common.config_file, "config file");
  pt->add_option("--seed", pt_common.seed_flag, "base seed");
  pt->add_option("--resume", pt_resume, "checkpoint to resume from");
  add_run_config_flags(pt);

  // distill
  auto* di = app.add_subcommand("distill", "consistency-distill into a PFCM");
  CommonOpts di_common;
  std::string di_teacher, di_data, di_metric = "pseudo-huber",
              di_opt = "radam", di_init = "teacher", di_resume;
  double di_mu = 0.95;
  di->add_option("--teacher", di_teacher, "pretrained pfgmpp checkpoint")
      ->required();
  di->add_option("--data", di_data, "dataset directory")->required();
  di->add_option("--out", di_common.out_dir, "output directory")->required();
  di->add_option("--config", di_common.config_file, "config file");
  di->add_option("--seed", di_common.seed_flag, "base seed");
  di->add_option("--metric", di_metric, "l2 | pseudo-huber");
  di->add_option("--optimizer", di_opt, "radam | adam");
  di->add_option("--mu", di_mu, "EMA decay of the target network");
  di->add_option("--init", di_init, "teacher | random");
  di->add_option("--resume", di_resume, "checkpoint to resume from");
  add_run_config_flags(di);

  // denoise
  auto* dn = app.add_subcommand("denoise", "denoise one image");
  CommonOpts dn_common;
  std::string dn_ckpt, dn_input;
  SamplerArgs dn_sa;
  bool dn_diff = false;
  dn->add_option("--ckpt", dn_ckpt, "checkpoint")->required();
  dn->add_option("--input", dn_input, "input image stem (foo -> foo.bin/.json)")
      ->required();
  dn->add_option("--out", dn_common.out_dir, "output directory")->required();
  dn->add_option("--sampler", dn_sa.sampler, "vanilla|task|heun|hijack|reg");
  dn->add_option("--w", dn_sa.w, "regularization weight");
  dn->add_option("--i", dn_sa.hijack_i, "hijack index (descending grid)");
  dn->add_option("--sigma-hat", dn_sa.sigma_hat, "hijack noise level");
  dn->add_option("--seed", dn_common.seed_flag, "sampler seed");
  dn->add_flag("--dump-diff", dn_diff, "also write |out - input|");

  // gridsearch
  auto* gs = app.add_subcommand("gridsearch", "search the (i, w) grid");
  CommonOpts gs_common;
  std::string gs_ckpt, gs_data, gs_igrid = "30:40", gs_wgrid = "0.5:1.0:0.1",
              gs_criterion = "psnr";
  gs->add_option("--ckpt", gs_ckpt, "pfcm checkpoint")->required();
  gs->add_option("--data", gs_data, "validation set directory")->required();
  gs->add_option("--out", gs_common.out_dir, "output directory")->required();
  gs->add_option("--i-grid", gs_igrid, "lo:hi or comma list");
  gs->add_option("--w-grid", gs_wgrid, "lo:hi:step or comma list");
  gs->add_option("--criterion", gs_criterion, "psnr | ssim");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "metrics over a validation set");
  CommonOpts ev_common;
  std::string ev_ckpt, ev_data;
  SamplerArgs ev_sa;
  bool ev_diff = false;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  ev->add_option("--data", ev_data, "validation set directory")->required();
  ev->add_option("--out", ev_common.out_dir, "output directory")->required();
  ev->add_option("--sampler", ev_sa.sampler, "vanilla|task|heun|hijack|reg");
  ev->add_option("--w", ev_sa.w, "regularization weight");
  ev->add_option("--i", ev_sa.hijack_i, "hijack index");
  ev->add_option("--sigma-hat", ev_sa.sigma_hat, "hijack noise level");
  ev->add_option("--seed", ev_common.seed_flag, "sampler seed");
  ev->add_flag("--dump-diff", ev_diff, "write |out - clean| images");

  // ablate
  auto* ab = app.add_subcommand("ablate", "four-way sampler ablation");
  CommonOpts ab_common;
  std::string ab_ckpt, ab_data;
  int ab_i = 0;
  double ab_sigma = 0.0, ab_w = 0.7;
  ab->add_option("--ckpt", ab_ckpt, "pfcm checkpoint")->required();
  ab->add_option("--data", ab_data, "validation set directory")->required();
  ab->add_option("--out", ab_common.out_dir, "output directory")->required();
  ab->add_option("--i", ab_i, "hijack index");
  ab->add_option("--sigma-hat", ab_sigma, "hijack noise level");
  ab->add_option("--w", ab_w, "regularization weight");
  ab->add_option("--seed", ab_common.seed_flag, "shared sampler seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  ManifestScribe ms;
  for (int i = 0; i < argc; ++i) ms.argv.push_back(argv[i]);

  try {
    if (pg->parsed()) {
      ms.command = "phantom-gen";
      ms.out_dir = pga.common.out_dir;
      run_phantom_gen(pga, ms);
    } else if (pt->parsed()) {
      ms.command = "pretrain";
      ms.out_dir = pt_common.out_dir;
      run_pretrain(pt, pt_common, pt_data, pt_resume, ms);
    } else if (di->parsed()) {
      ms.command = "distill";
      ms.out_dir = di_common.out_dir;
      run_distill(di, di_common, di_teacher, di_data, di_metric, di_opt, di_mu,
                  di_init, di_resume, ms);
    } else if (dn->parsed()) {
      ms.command = "denoise";
      ms.out_dir = dn_common.out_dir;
      run_denoise(dn_common, dn_ckpt, dn_input, dn_sa, dn_diff, ms);
    } else if (gs->parsed()) {
      ms.command = "gridsearch";
      ms.out_dir = gs_common.out_dir;
      run_gridsearch(gs_common, gs_ckpt, gs_data, gs_igrid, gs_wgrid,
                     gs_criterion, ms);
    } else if (ev->parsed()) {
      ms.command = "evaluate";
      ms.out_dir = ev_common.out_dir;
      run_evaluate(ev_common, ev_ckpt, ev_data, ev_sa, ev_diff, ms);
    } else if (ab->parsed()) {
      ms.command = "ablate";
      ms.out_dir = ab_common.out_dir;
      run_ablate(ab_common, ab_ckpt, ab_data, ab_i, ab_sigma, ab_w, ms);
    }
    ms.write();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
