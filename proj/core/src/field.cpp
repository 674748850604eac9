#include "pfcm/field.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

namespace pfcm {

using nlohmann::json;

Precond precondition(double sigma, double sigma_data, double sigma_min) {
  if (sigma < sigma_min) {
    throw Error(ErrorKind::Usage, "precondition: sigma below sigma_min");
  }
  const double sd2 = sigma_data * sigma_data;
  const double shifted = sigma - sigma_min;
  Precond p;
  p.c_skip = sd2 / (shifted * shifted + sd2);
  p.c_out = sigma_data * shifted / std::sqrt(sd2 + sigma * sigma);
  p.c_in = 1.0 / std::sqrt(sigma * sigma + sd2);
  p.c_noise = std::log(sigma) / 4.0;
  return p;
}

std::string stage_name(Stage s) {
  return s == Stage::pfgmpp ? "pfgmpp" : "pfcm";
}

Stage stage_from_name(const std::string& name) {
  if (name == "pfgmpp") return Stage::pfgmpp;
  if (name == "pfcm") return Stage::pfcm;
  throw Error(ErrorKind::Config, "unknown training stage '" + name + "'");
}

Denoiser Denoiser::clone() const {
  Denoiser copy;
  copy.meta = meta;
  copy.net = net->clone();
  return copy;
}

void Denoiser::require_stage(Stage expected) const {
  if (meta.stage != expected) {
    throw Error(ErrorKind::Config, "checkpoint stage is " +
                                       stage_name(meta.stage) + ", expected " +
                                       stage_name(expected));
  }
}

void Denoiser::require_d(double d) const {
  if (meta.d != d) {
    throw Error(ErrorKind::Config,
                "metadata D mismatch: checkpoint has D=" +
                    std::to_string(meta.d) + ", caller expects D=" +
                    std::to_string(d));
  }
}

namespace {

// Assembles [1, C, n, n] network input: channel 0 is c_in * x_sigma,
// channel 1 the condition image when conditioning is enabled.
void assemble_input(const Denoiser& den, const ImageTensor& x_sigma,
                    double c_in, const ImageTensor& y,
                    std::vector<float>& buf) {
  const int channels = den.net->in_channels();
  const std::size_t plane = x_sigma.pixels();
  buf.resize(static_cast<std::size_t>(channels) * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    buf[i] = static_cast<float>(c_in * x_sigma.data[i]);
  }
  if (channels == 2) {
    if (y.n != x_sigma.n) {
      throw Error(ErrorKind::Config, "condition image resolution mismatch");
    }
    std::memcpy(buf.data() + plane, y.data.data(), plane * sizeof(float));
  }
}

}  // namespace

ImageTensor f_apply(const Denoiser& den, const ImageTensor& x_sigma,
                    double sigma, const ImageTensor& y) {
  x_sigma.require_finite("f_apply input");
  const auto& sched = den.meta.schedule;
  const Precond p = precondition(sigma, den.meta.sigma_data, sched.sigma_min);

  std::vector<float> in;
  assemble_input(den, x_sigma, p.c_in, y, in);
  const float cn = static_cast<float>(p.c_noise);

  ImageTensor f_out(x_sigma.n);
  den.net->infer(in.data(), &cn, 1, x_sigma.n, f_out.data.data());
  den.evals.fetch_add(1, std::memory_order_relaxed);

  for (std::size_t i = 0; i < f_out.data.size(); ++i) {
    f_out.data[i] = static_cast<float>(p.c_skip * x_sigma.data[i] +
                                       p.c_out * f_out.data[i]);
  }
  f_out.require_finite("f_apply");
  return f_out;
}

ImageTensor phi_pfgmpp(const Denoiser& den, const ImageTensor& x_sigma,
                       double sigma, const ImageTensor& y) {
  if (!(sigma > 0.0)) {
    throw Error(ErrorKind::Usage, "drift undefined at sigma == 0");
  }
  const ImageTensor denoised = f_apply(den, x_sigma, sigma, y);
  ImageTensor drift(x_sigma.n);
  const double inv = 1.0 / sigma;
  for (std::size_t i = 0; i < drift.data.size(); ++i) {
    drift.data[i] =
        static_cast<float>((x_sigma.data[i] - denoised.data[i]) * inv);
  }
  drift.require_finite("phi_pfgmpp");
  return drift;
}

ImageTensor phi_edm(const Denoiser& den, const ImageTensor& x_sigma,
                    double sigma, const ImageTensor& y) {
  // Shared parameterization: the Gaussian-limit drift is the same
  // denoiser-form expression.
  return phi_pfgmpp(den, x_sigma, sigma, y);
}

ImageTensor ideal_field_single_point(const ImageTensor& x_sigma, double sigma,
                                     const ImageTensor& x0) {
  if (!(sigma > 0.0)) {
    throw Error(ErrorKind::Usage, "ideal field undefined at sigma == 0");
  }
  if (x_sigma.n != x0.n) {
    throw Error(ErrorKind::Config, "ideal field: resolution mismatch");
  }
  ImageTensor drift(x_sigma.n);
  const double inv = 1.0 / sigma;
  for (std::size_t i = 0; i < drift.data.size(); ++i) {
    drift.data[i] = static_cast<float>((x_sigma.data[i] - x0.data[i]) * inv);
  }
  return drift;
}

namespace {
constexpr char kMagic[8] = {'P', 'F', 'C', 'M', 'C', 'K', 'P', '1'};
}

void save_checkpoint(const std::filesystem::path& file, const Denoiser& den) {
  json header{
      {"stage", stage_name(den.meta.stage)},
      {"d", den.meta.d},
      {"sigma_data", den.meta.sigma_data},
      {"conditioning", den.meta.conditioning},
      {"schedule",
       {{"sigma_min", den.meta.schedule.sigma_min},
        {"sigma_max", den.meta.schedule.sigma_max},
        {"rho", den.meta.schedule.rho},
        {"n_steps", den.meta.schedule.n_steps}}},
      {"schedule_hash", den.meta.schedule.hash()},
      {"arch", json::parse(den.net->arch_json())},
      {"param_count", den.net->param_count()},
  };
  const std::string htext = header.dump();

  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write checkpoint " + file.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t hlen = static_cast<std::uint32_t>(htext.size());
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  const auto& w = den.net->params();
  out.write(reinterpret_cast<const char*>(w.data()),
            static_cast<std::streamsize>(w.size() * sizeof(float)));
  if (!out) throw Error(ErrorKind::Io, "short write to " + file.string());
}

Denoiser load_checkpoint(const std::filesystem::path& file,
                         std::optional<Stage> expect_stage) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open checkpoint " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) {
    throw Error(ErrorKind::Io, file.string() + " is not a checkpoint");
  }
  std::uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), hlen);
  if (in.gcount() != static_cast<std::streamsize>(hlen)) {
    throw Error(ErrorKind::Io, "truncated checkpoint header");
  }
  json header;
  try {
    header = json::parse(htext);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("bad checkpoint header: ") + e.what());
  }

  Denoiser den;
  den.meta.stage = stage_from_name(header.at("stage").get<std::string>());
  den.meta.d = header.at("d").get<double>();
  den.meta.sigma_data = header.at("sigma_data").get<double>();
  den.meta.conditioning = header.at("conditioning").get<std::string>();
  const auto& js = header.at("schedule");
  den.meta.schedule = build_schedule(
      js.at("sigma_min").get<double>(), js.at("sigma_max").get<double>(),
      js.at("rho").get<double>(), js.at("n_steps").get<int>());
  if (header.at("schedule_hash").get<std::uint64_t>() !=
      den.meta.schedule.hash()) {
    throw Error(ErrorKind::Config, "checkpoint schedule hash mismatch");
  }

  den.net = net_from_arch_json(header.at("arch").dump(), 0);
  const std::size_t count = header.at("param_count").get<std::size_t>();
  if (count != den.net->param_count()) {
    throw Error(ErrorKind::Config, "checkpoint parameter count mismatch");
  }
  auto& w = den.net->params();
  in.read(reinterpret_cast<char*>(w.data()),
          static_cast<std::streamsize>(w.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(w.size() * sizeof(float))) {
    throw Error(ErrorKind::Io, "truncated checkpoint weights");
  }

  if (expect_stage && den.meta.stage != *expect_stage) {
    throw Error(ErrorKind::Config,
                "checkpoint stage " + stage_name(den.meta.stage) +
                    " does not match required stage " +
                    stage_name(*expect_stage));
  }
  return den;
}

}  // namespace pfcm
