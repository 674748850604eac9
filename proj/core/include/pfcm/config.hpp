#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "pfcm/schedule.hpp"

namespace pfcm {

// Network size knobs. The free-form network is a small conv encoder/decoder;
// widths here are deliberately desk-scale.
struct NetConfig {
  int in_channels = 2;  // perturbed state + low-dose condition channel
  int base_width = 16;
  int levels = 2;
  int blocks_per_level = 1;
  int emb_dim = 32;
};

// One flat bag of run settings shared by dataset generation, pretraining and
// distillation. All fields have working defaults; the config file and CLI
// flags override them (flag > file > default).
struct RunConfig {
  double d = 128.0;          // augmentation dimension, must stay > 2
  double sigma_min = 0.002;
  double sigma_max = 380.0;
  double rho = 7.0;
  int n_steps = 40;
  double sigma_data = 0.5;
  std::uint64_t seed = 1;
  double lr = 1e-4;
  int iters = 20000;
  int batch = 4;
  double dropout = 0.1;

  // Extras beyond the base key set (all documented in the README).
  int patch = 16;            // training patch size
  NetConfig net;

  NoiseSchedule schedule() const {
    return build_schedule(sigma_min, sigma_max, rho, n_steps);
  }

  void validate() const;  // throws Error(Config)
};

// Flat "key = value" text file. Unknown keys are rejected; '#' starts a
// comment. Floats are written with enough digits to round-trip exactly.
RunConfig load_run_config(const std::filesystem::path& file);
void save_run_config(const std::filesystem::path& file, const RunConfig& cfg);

// Applies a single "key value" pair onto cfg; shared by the file parser and
// the CLI override path. Throws Error(Config) on unknown key or bad value.
void apply_config_key(RunConfig& cfg, const std::string& key,
                      const std::string& value);

std::string format_double(double v);  // >= 9 significant digits

}  // namespace pfcm
