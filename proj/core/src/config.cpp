#include "pfcm/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pfcm/types.hpp"

namespace pfcm {

void RunConfig::validate() const {
  if (!(d > 2.0)) {
    throw Error(ErrorKind::Config,
                "d must be > 2 (finite-variance radial regime), got " +
                    format_double(d));
  }
  if (!(sigma_data > 0.0)) {
    throw Error(ErrorKind::Config, "sigma_data must be positive");
  }
  if (batch < 1) throw Error(ErrorKind::Config, "batch must be >= 1");
  if (iters < 0) throw Error(ErrorKind::Config, "iters must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw Error(ErrorKind::Config, "dropout must lie in [0, 1)");
  }
  if (patch < 8 || !is_pow2(patch)) {
    throw Error(ErrorKind::Config, "patch must be a power of two >= 8");
  }
  if (net.base_width < 1 || net.levels < 1 || net.blocks_per_level < 1 ||
      net.emb_dim < 1) {
    throw Error(ErrorKind::Config, "network dimensions must be positive");
  }
  build_schedule(sigma_min, sigma_max, rho, n_steps);  // validates the grid
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, "bad value for " + key + ": '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, "bad value for " + key + ": '" + v + "'");
  }
}

}  // namespace

void apply_config_key(RunConfig& cfg, const std::string& key,
                      const std::string& value) {
  if (key == "d") cfg.d = parse_double(key, value);
  else if (key == "sigma_min") cfg.sigma_min = parse_double(key, value);
  else if (key == "sigma_max") cfg.sigma_max = parse_double(key, value);
  else if (key == "rho") cfg.rho = parse_double(key, value);
  else if (key == "n_steps") cfg.n_steps = static_cast<int>(parse_int(key, value));
  else if (key == "sigma_data") cfg.sigma_data = parse_double(key, value);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "lr") cfg.lr = parse_double(key, value);
  else if (key == "iters") cfg.iters = static_cast<int>(parse_int(key, value));
  else if (key == "batch") cfg.batch = static_cast<int>(parse_int(key, value));
  else if (key == "dropout") cfg.dropout = parse_double(key, value);
  else if (key == "patch") cfg.patch = static_cast<int>(parse_int(key, value));
  else if (key == "width") cfg.net.base_width = static_cast<int>(parse_int(key, value));
  else if (key == "levels") cfg.net.levels = static_cast<int>(parse_int(key, value));
  else if (key == "blocks") cfg.net.blocks_per_level = static_cast<int>(parse_int(key, value));
  else if (key == "emb_dim") cfg.net.emb_dim = static_cast<int>(parse_int(key, value));
  else {
    throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
  }
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) {
    throw Error(ErrorKind::Io, "cannot open config file " + file.string());
  }
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key, eq, value;
    if (!(ls >> key)) continue;  // blank line
    if (!(ls >> eq)) {
      throw Error(ErrorKind::Config, file.string() + ":" +
                                         std::to_string(lineno) +
                                         ": expected 'key = value'");
    }
    if (eq == "=") {
      ls >> value;
    } else {
      value = eq;  // "key value" form
    }
    if (value.empty()) {
      throw Error(ErrorKind::Config, file.string() + ":" +
                                         std::to_string(lineno) +
                                         ": missing value for '" + key + "'");
    }
    apply_config_key(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

void save_run_config(const std::filesystem::path& file, const RunConfig& cfg) {
  std::ofstream out(file);
  if (!out) {
    throw Error(ErrorKind::Io, "cannot write config file " + file.string());
  }
  out << "d = " << format_double(cfg.d) << "\n";
  out << "sigma_min = " << format_double(cfg.sigma_min) << "\n";
  out << "sigma_max = " << format_double(cfg.sigma_max) << "\n";
  out << "rho = " << format_double(cfg.rho) << "\n";
  out << "n_steps = " << cfg.n_steps << "\n";
  out << "sigma_data = " << format_double(cfg.sigma_data) << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "lr = " << format_double(cfg.lr) << "\n";
  out << "iters = " << cfg.iters << "\n";
  out << "batch = " << cfg.batch << "\n";
  out << "dropout = " << format_double(cfg.dropout) << "\n";
  out << "patch = " << cfg.patch << "\n";
  out << "width = " << cfg.net.base_width << "\n";
  out << "levels = " << cfg.net.levels << "\n";
  out << "blocks = " << cfg.net.blocks_per_level << "\n";
  out << "emb_dim = " << cfg.net.emb_dim << "\n";
}

}  // namespace pfcm
