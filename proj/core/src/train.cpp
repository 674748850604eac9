#include "pfcm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "pfcm/io.hpp"
#include "pfcm/pfkernel.hpp"
#include "pfcm/phantoms.hpp"

namespace pfcm {

using nlohmann::json;

MetricKind metric_from_name(const std::string& name) {
  if (name == "l2") return MetricKind::L2;
  if (name == "pseudo-huber" || name == "huber") return MetricKind::PseudoHuber;
  if (name == "external") return MetricKind::External;
  throw Error(ErrorKind::Config, "unknown metric '" + name + "'");
}

std::string metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::L2: return "l2";
    case MetricKind::PseudoHuber: return "pseudo-huber";
    default: return "external";
  }
}

void DistillConfig::validate() const {
  if (mu < 0.0 || mu > 1.0) {
    throw Error(ErrorKind::Config, "mu must lie in [0, 1]");
  }
  if (!(d > 2.0)) throw Error(ErrorKind::Config, "d must be > 2");
  if (n_steps < 2) throw Error(ErrorKind::Config, "n_steps must be >= 2");
  if (batch < 1) throw Error(ErrorKind::Config, "batch must be >= 1");
  if (iters < 0) throw Error(ErrorKind::Config, "iters must be >= 0");
  if (metric == MetricKind::External && !external_metric) {
    throw Error(ErrorKind::Config,
                "metric 'external' requires an adapter implementation");
  }
  if (optimizer != "radam" && optimizer != "adam") {
    throw Error(ErrorKind::Config, "optimizer must be radam or adam");
  }
}

// ---- optimizer --------------------------------------------------------------

Optimizer::Optimizer(const std::string& kind, double lr, std::size_t n_params)
    : kind_(kind), lr_(lr) {
  if (kind_ != "radam" && kind_ != "adam") {
    throw Error(ErrorKind::Config, "optimizer must be radam or adam");
  }
  m_.assign(n_params, 0.0f);
  v_.assign(n_params, 0.0f);
}

void Optimizer::step(std::span<float> params, std::span<const float> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw Error(ErrorKind::Config, "optimizer/parameter size mismatch");
  }
  ++t_;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double b1t = std::pow(b1, static_cast<double>(t_));
  const double b2t = std::pow(b2, static_cast<double>(t_));
  const double m_corr = 1.0 / (1.0 - b1t);
  const double v_corr = 1.0 / (1.0 - b2t);

  bool rectified = true;
  double rect = 1.0;
  if (kind_ == "radam") {
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t =
        rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);
    if (rho_t > 4.0) {
      rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    } else {
      rectified = false;  // warmup: un-adapted SGD with momentum
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = b1 * m_[i] + (1.0 - b1) * g;
    const double v = b2 * v_[i] + (1.0 - b2) * g * g;
    m_[i] = static_cast<float>(m);
    v_[i] = static_cast<float>(v);
    const double mhat = m * m_corr;
    double delta;
    if (kind_ == "adam") {
      delta = lr_ * mhat / (std::sqrt(v * v_corr) + eps);
    } else if (rectified) {
      delta = lr_ * rect * mhat / (std::sqrt(v * v_corr) + eps);
    } else {
      delta = lr_ * mhat;
    }
    params[i] = static_cast<float>(params[i] - delta);
  }
}

// ---- metric -----------------------------------------------------------------

double metric_distance(MetricKind kind, double huber_c,
                       const ExternalMetric* ext, const ImageTensor& a,
                       const ImageTensor& b, ImageTensor* grad_a) {
  if (a.n != b.n) {
    throw Error(ErrorKind::Config, "metric: resolution mismatch");
  }
  const std::size_t n = a.pixels();
  switch (kind) {
    case MetricKind::L2: {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dv = static_cast<double>(a.data[i]) - b.data[i];
        acc += dv * dv;
      }
      const double inv = 1.0 / static_cast<double>(n);
      if (grad_a) {
        *grad_a = ImageTensor(a.n);
        for (std::size_t i = 0; i < n; ++i) {
          grad_a->data[i] = static_cast<float>(
              2.0 * (static_cast<double>(a.data[i]) - b.data[i]) * inv);
        }
      }
      return acc * inv;
    }
    case MetricKind::PseudoHuber: {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dv = static_cast<double>(a.data[i]) - b.data[i];
        acc += dv * dv;
      }
      if (acc == 0.0) {  // identical arguments: exactly zero distance
        if (grad_a) *grad_a = ImageTensor(a.n, 0.0f);
        return 0.0;
      }
      const double root = std::sqrt(acc + huber_c * huber_c);
      if (grad_a) {
        *grad_a = ImageTensor(a.n);
        const double inv = 1.0 / root;
        for (std::size_t i = 0; i < n; ++i) {
          grad_a->data[i] = static_cast<float>(
              (static_cast<double>(a.data[i]) - b.data[i]) * inv);
        }
      }
      return root - huber_c;
    }
    case MetricKind::External:
      if (!ext || !*ext) {
        throw Error(ErrorKind::Config, "external metric not provided");
      }
      return (*ext)(a, b, grad_a);
  }
  throw Error(ErrorKind::Config, "unreachable metric kind");
}

// ---- batched denoiser evaluation ---------------------------------------------

namespace {

struct FBatch {
  std::vector<float> in;
  std::vector<float> cnoise;
  std::vector<float> F;       // raw network output
  std::vector<Precond> pc;
  int nb = 0, s = 0;
};

void assemble(const Denoiser& den, std::span<const ImageTensor* const> xs,
              std::span<const double> sigmas,
              std::span<const ImageTensor* const> ys, FBatch& fb) {
  const int nb = static_cast<int>(xs.size());
  const int s = xs[0]->n;
  const int channels = den.net->in_channels();
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  fb.nb = nb;
  fb.s = s;
  fb.in.resize(static_cast<std::size_t>(nb) * channels * plane);
  fb.cnoise.resize(static_cast<std::size_t>(nb));
  fb.F.resize(static_cast<std::size_t>(nb) * plane);
  fb.pc.resize(static_cast<std::size_t>(nb));
  for (int b = 0; b < nb; ++b) {
    fb.pc[static_cast<std::size_t>(b)] = precondition(
        sigmas[b], den.meta.sigma_data, den.meta.schedule.sigma_min);
    fb.cnoise[static_cast<std::size_t>(b)] =
        static_cast<float>(fb.pc[static_cast<std::size_t>(b)].c_noise);
    float* row = fb.in.data() + static_cast<std::size_t>(b) * channels * plane;
    // same double-precision product as the inference-side input assembly,
    // so student and target branches see bit-identical inputs
    const double c_in = fb.pc[static_cast<std::size_t>(b)].c_in;
    const auto& xd = xs[b]->data;
    for (std::size_t i = 0; i < plane; ++i) {
      row[i] = static_cast<float>(c_in * xd[i]);
    }
    if (channels == 2) {
      if (ys[b]->n != s) {
        throw Error(ErrorKind::Config, "condition image resolution mismatch");
      }
      std::memcpy(row + plane, ys[b]->data.data(), plane * sizeof(float));
    }
  }
}

// f[b] = c_skip x[b] + c_out F[b], written into out[b] (size nb*plane).
void combine(const FBatch& fb, std::span<const ImageTensor* const> xs,
             std::vector<float>& out) {
  const std::size_t plane = static_cast<std::size_t>(fb.s) * fb.s;
  out.resize(static_cast<std::size_t>(fb.nb) * plane);
  for (int b = 0; b < fb.nb; ++b) {
    const auto& p = fb.pc[static_cast<std::size_t>(b)];
    const float* Fb = fb.F.data() + static_cast<std::size_t>(b) * plane;
    const auto& xd = xs[b]->data;
    float* ob = out.data() + static_cast<std::size_t>(b) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      ob[i] = static_cast<float>(p.c_skip * xd[i] + p.c_out * Fb[i]);
    }
  }
}

bool finite(double v) { return std::isfinite(v); }

void ema_update(std::span<float> target, std::span<const float> source,
                double mu) {
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i] = static_cast<float>(mu * target[i] + (1.0 - mu) * source[i]);
  }
}

double draw_training_sigma(Rng& rng, const NoiseSchedule& sched) {
  // ln sigma ~ N(-1.2, 1.2^2), clamped to the schedule range.
  const double s = std::exp(-1.2 + 1.2 * rng.normal());
  return std::clamp(s, sched.sigma_min, sched.sigma_max);
}

struct TraceRow {
  int iteration;
  double loss;
  double lr;
  double wallclock;
};

void write_trace(const std::filesystem::path& file,
                 const std::vector<TraceRow>& rows) {
  std::ofstream out(file);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + file.string());
  out << "iteration,loss,lr,wallclock\n";
  for (const auto& r : rows) {
    out << r.iteration << "," << format_double(r.loss) << ","
        << format_double(r.lr) << "," << format_double(r.wallclock) << "\n";
  }
}

constexpr char kStateMagic[8] = {'P', 'F', 'C', 'M', 'S', 'T', 'A', '1'};

void save_train_state(const std::filesystem::path& file, const Optimizer& opt,
                      int next_iter, const std::vector<float>* theta_minus) {
  json header{{"next_iter", next_iter},
              {"optimizer", opt.kind()},
              {"lr", opt.lr()},
              {"t", const_cast<Optimizer&>(opt).iteration()},
              {"param_count", const_cast<Optimizer&>(opt).m().size()},
              {"has_theta_minus", theta_minus != nullptr}};
  const std::string htext = header.dump();
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + file.string());
  out.write(kStateMagic, sizeof(kStateMagic));
  const std::uint32_t hlen = static_cast<std::uint32_t>(htext.size());
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  auto blob = [&](const std::vector<float>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
  };
  blob(const_cast<Optimizer&>(opt).m());
  blob(const_cast<Optimizer&>(opt).v());
  if (theta_minus) blob(*theta_minus);
}

void load_train_state(const std::filesystem::path& file, Optimizer& opt,
                      int& next_iter, std::vector<float>* theta_minus) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open state " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != 8 || std::memcmp(magic, kStateMagic, 8) != 0) {
    throw Error(ErrorKind::Io, file.string() + " is not a training state");
  }
  std::uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), hlen);
  json header = json::parse(htext);
  next_iter = header.at("next_iter").get<int>();
  opt.set_lr(header.at("lr").get<double>());
  opt.set_iteration(header.at("t").get<long>());
  const std::size_t count = header.at("param_count").get<std::size_t>();
  if (count != opt.m().size()) {
    throw Error(ErrorKind::Config, "state/parameter size mismatch");
  }
  auto blob = [&](std::vector<float>& v) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(float))) {
      throw Error(ErrorKind::Io, "truncated state blob");
    }
  };
  blob(opt.m());
  blob(opt.v());
  const bool has_tm = header.at("has_theta_minus").get<bool>();
  if (has_tm != (theta_minus != nullptr)) {
    throw Error(ErrorKind::Config, "state stage mismatch");
  }
  if (theta_minus) blob(*theta_minus);
}

}  // namespace

// ---- PFGM++ objective --------------------------------------------------------

namespace {

// Shared core: explicit perturbed states, batched forward/backward.
double pfgmpp_loss_core(Denoiser& phi,
                        std::span<const ImageTensor* const> cleans,
                        std::span<const ImageTensor* const> ys,
                        std::span<const double> sigmas,
                        std::span<const ImageTensor* const> x_sigmas,
                        bool with_grads, float dropout, Rng& rng) {
  const int nb = static_cast<int>(cleans.size());
  FBatch fb;
  assemble(phi, x_sigmas, sigmas, ys, fb);
  if (with_grads) {
    phi.net->zero_grads();
    phi.net->forward_train(fb.in.data(), fb.cnoise.data(), nb, fb.s,
                           fb.F.data(), dropout, rng);
  } else {
    phi.net->infer(fb.in.data(), fb.cnoise.data(), nb, fb.s, fb.F.data());
  }

  const std::size_t plane = static_cast<std::size_t>(fb.s) * fb.s;
  const double norm = 1.0 / (static_cast<double>(nb) * plane);
  std::vector<float> dF;
  if (with_grads) dF.assign(static_cast<std::size_t>(nb) * plane, 0.0f);

  double loss = 0.0;
  for (int b = 0; b < nb; ++b) {
    const auto& p = fb.pc[static_cast<std::size_t>(b)];
    const double inv_sigma = 1.0 / sigmas[b];
    const float* Fb = fb.F.data() + static_cast<std::size_t>(b) * plane;
    const auto& xd = x_sigmas[b]->data;
    const auto& cd = cleans[b]->data;
    float* gb = with_grads ? dF.data() + static_cast<std::size_t>(b) * plane
                           : nullptr;
    for (std::size_t i = 0; i < plane; ++i) {
      const double f = p.c_skip * xd[i] + p.c_out * Fb[i];
      // predicted drift minus target drift collapses to (f - clean)/sigma
      const double res = (cd[i] - f) * inv_sigma;
      loss += res * res;
      if (gb) {
        gb[i] = static_cast<float>(-2.0 * res * inv_sigma * p.c_out * norm);
      }
    }
  }
  loss *= norm;
  if (!finite(loss)) {
    throw Error(ErrorKind::Numeric, "non-finite training loss");
  }
  if (with_grads) phi.net->backward(dF.data());
  return loss;
}

}  // namespace

double pfgmpp_residual_loss(Denoiser& phi, const ImageTensor& clean,
                            const ImageTensor& y, double sigma,
                            const ImageTensor& x_sigma, bool with_grads,
                            float dropout, Rng& rng) {
  const ImageTensor* c = &clean;
  const ImageTensor* yy = &y;
  const ImageTensor* xs = &x_sigma;
  return pfgmpp_loss_core(phi, {&c, 1}, {&yy, 1}, {&sigma, 1}, {&xs, 1},
                          with_grads, dropout, rng);
}

double pfgmpp_loss(Denoiser& phi, std::span<const PairedSample> batch, double d,
                   Rng& rng, float dropout) {
  if (batch.empty()) throw Error(ErrorKind::Config, "empty batch");
  const auto& sched = phi.meta.schedule;
  const int nb = static_cast<int>(batch.size());
  std::vector<double> sigmas(static_cast<std::size_t>(nb));
  std::vector<ImageTensor> xs(static_cast<std::size_t>(nb));
  std::vector<const ImageTensor*> cleans, ys, xps;
  for (int b = 0; b < nb; ++b) {
    sigmas[static_cast<std::size_t>(b)] = draw_training_sigma(rng, sched);
    xs[static_cast<std::size_t>(b)] =
        perturb(batch[b].clean, sigmas[static_cast<std::size_t>(b)], d, rng);
    cleans.push_back(&batch[b].clean);
    ys.push_back(&batch[b].noisy);
    xps.push_back(&xs[static_cast<std::size_t>(b)]);
  }
  return pfgmpp_loss_core(phi, cleans, ys, sigmas, xps, true, dropout, rng);
}

double pfgmpp_loss(Denoiser& phi, std::span<const PairedSample> batch, double d,
                   std::uint64_t seed, float dropout) {
  Rng rng(derive_seed(seed, "pfgmpp-loss"));
  return pfgmpp_loss(phi, batch, d, rng, dropout);
}

// ---- consistency matching -----------------------------------------------------

double consistency_pair_loss(Denoiser& theta, const Denoiser& theta_minus,
                             const ImageTensor& x_hi, double sigma_hi,
                             const ImageTensor& x_lo, double sigma_lo,
                             const ImageTensor& y, const DistillConfig& cfg,
                             bool with_grads, Rng& rng) {
  const double huber_c =
      cfg.huber_c_scale * std::sqrt(static_cast<double>(x_hi.pixels()));

  // target branch: inference only, gradient flow stops here
  const ImageTensor target = f_apply(theta_minus, x_lo, sigma_lo, y);

  FBatch fb;
  const ImageTensor* xp = &x_hi;
  const ImageTensor* yp = &y;
  assemble(theta, {&xp, 1}, {&sigma_hi, 1}, {&yp, 1}, fb);
  if (with_grads) {
    theta.net->zero_grads();
    theta.net->forward_train(fb.in.data(), fb.cnoise.data(), 1, fb.s,
                             fb.F.data(), static_cast<float>(cfg.dropout), rng);
  } else {
    theta.net->infer(fb.in.data(), fb.cnoise.data(), 1, fb.s, fb.F.data());
  }
  ImageTensor student(x_hi.n);
  const auto& p = fb.pc[0];
  for (std::size_t i = 0; i < student.data.size(); ++i) {
    student.data[i] =
        static_cast<float>(p.c_skip * x_hi.data[i] + p.c_out * fb.F[i]);
  }

  ImageTensor grad_a;
  // lambda(sigma_i) == 1
  const double loss =
      metric_distance(cfg.metric, huber_c, &cfg.external_metric, student,
                      target, with_grads ? &grad_a : nullptr);
  if (!finite(loss)) {
    throw Error(ErrorKind::Numeric, "non-finite consistency loss");
  }
  if (with_grads) {
    std::vector<float> dF(student.data.size());
    for (std::size_t i = 0; i < dF.size(); ++i) {
      dF[i] = static_cast<float>(grad_a.data[i] * p.c_out);
    }
    theta.net->backward(dF.data());
  }
  return loss;
}

namespace {

// One batched distillation update; indices are ascending-grid i per sample.
double distill_update(Denoiser& theta, Denoiser& theta_minus,
                      const TeacherDrift& drift,
                      std::span<const PairedSample> batch,
                      std::span<const int> indices, const NoiseSchedule& sched,
                      const DistillConfig& cfg, Optimizer& opt, Rng& rng) {
  const int nb = static_cast<int>(batch.size());
  const int s = batch[0].clean.n;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  const double huber_c = cfg.huber_c_scale * std::sqrt(static_cast<double>(plane));

  std::vector<double> sig_hi(static_cast<std::size_t>(nb)),
      sig_lo(static_cast<std::size_t>(nb));
  std::vector<ImageTensor> x_hi(static_cast<std::size_t>(nb)),
      x_lo(static_cast<std::size_t>(nb));
  for (int b = 0; b < nb; ++b) {
    const int i = indices[b];
    if (i < 1 || i >= sched.n_steps) {
      throw Error(ErrorKind::Usage, "distill index outside [1, n_steps-1]");
    }
    sig_lo[static_cast<std::size_t>(b)] = sched.sigma_ascending(i);
    sig_hi[static_cast<std::size_t>(b)] = sched.sigma_ascending(i + 1);
    x_hi[static_cast<std::size_t>(b)] =
        perturb(batch[b].clean, sig_hi[static_cast<std::size_t>(b)], cfg.d, rng);
    const ImageTensor dr = drift(x_hi[static_cast<std::size_t>(b)],
                                 sig_hi[static_cast<std::size_t>(b)],
                                 batch[b].noisy);
    ImageTensor step(s);
    const double dt = sig_lo[static_cast<std::size_t>(b)] -
                      sig_hi[static_cast<std::size_t>(b)];
    for (std::size_t j = 0; j < plane; ++j) {
      step.data[j] = static_cast<float>(
          x_hi[static_cast<std::size_t>(b)].data[j] + dt * dr.data[j]);
    }
    x_lo[static_cast<std::size_t>(b)] = std::move(step);
  }

  std::vector<const ImageTensor*> xs_hi, xs_lo, ys;
  for (int b = 0; b < nb; ++b) {
    xs_hi.push_back(&x_hi[static_cast<std::size_t>(b)]);
    xs_lo.push_back(&x_lo[static_cast<std::size_t>(b)]);
    ys.push_back(&batch[b].noisy);
  }

  // target branch under stopgrad
  FBatch tb;
  assemble(theta_minus, xs_lo, sig_lo, ys, tb);
  theta_minus.net->infer(tb.in.data(), tb.cnoise.data(), nb, s, tb.F.data());
  std::vector<float> target;
  combine(tb, xs_lo, target);

  // student branch
  FBatch sb;
  assemble(theta, xs_hi, sig_hi, ys, sb);
  theta.net->zero_grads();
  theta.net->forward_train(sb.in.data(), sb.cnoise.data(), nb, s, sb.F.data(),
                           static_cast<float>(cfg.dropout), rng);
  std::vector<float> student;
  combine(sb, xs_hi, student);

  double loss = 0.0;
  std::vector<float> dF(static_cast<std::size_t>(nb) * plane);
  ImageTensor a(s), b_img(s), ga;
  for (int b = 0; b < nb; ++b) {
    std::memcpy(a.data.data(), student.data() + static_cast<std::size_t>(b) * plane,
                plane * sizeof(float));
    std::memcpy(b_img.data.data(), target.data() + static_cast<std::size_t>(b) * plane,
                plane * sizeof(float));
    // lambda(sigma_i) == 1
    loss += metric_distance(cfg.metric, huber_c, &cfg.external_metric, a, b_img,
                            &ga);
    const double c_out = sb.pc[static_cast<std::size_t>(b)].c_out;
    float* gb = dF.data() + static_cast<std::size_t>(b) * plane;
    for (std::size_t j = 0; j < plane; ++j) {
      gb[j] = static_cast<float>(ga.data[j] * c_out / nb);
    }
  }
  loss /= nb;
  if (!finite(loss)) {
    throw Error(ErrorKind::Numeric, "non-finite distillation loss");
  }

  theta.net->backward(dF.data());
  opt.step(theta.net->params(), theta.net->grads());
  // theta_minus <- stopgrad(mu theta_minus + (1 - mu) theta)
  ema_update(theta_minus.net->params(), theta.net->params(), cfg.mu);
  return loss;
}

// Self-consistency probe: f along one teacher trajectory should collapse to
// a single point as distillation converges.
double consistency_self_error(const Denoiser& theta, const TeacherDrift& drift,
                              const PairedSample& probe,
                              const NoiseSchedule& sched, double d,
                              std::uint64_t seed) {
  Rng rng(derive_seed(seed, "self-error-probe"));
  ImageTensor x = perturb(probe.clean, sched.sigma_max, d, rng);
  std::vector<std::pair<ImageTensor, double>> states;
  states.emplace_back(x, sched.sigma_max);
  const int n = sched.n_steps;
  const int stride = std::max(1, (n - 1) / 4);
  for (int i = 1; i < n; ++i) {
    const double s_cur = sched.sigma_at(i);
    const double s_next = sched.sigma_at(i + 1);
    const ImageTensor dr = drift(x, s_cur, probe.noisy);
    for (std::size_t j = 0; j < x.data.size(); ++j) {
      x.data[j] = static_cast<float>(x.data[j] + (s_next - s_cur) * dr.data[j]);
    }
    if (i % stride == 0 || i == n - 1) states.emplace_back(x, s_next);
  }

  double err = 0.0;
  int count = 0;
  ImageTensor prev_f;
  for (std::size_t k = 0; k < states.size(); ++k) {
    const ImageTensor f =
        f_apply(theta, states[k].first, states[k].second, probe.noisy);
    if (k > 0) {
      double acc = 0.0;
      for (std::size_t j = 0; j < f.data.size(); ++j) {
        const double dv = static_cast<double>(f.data[j]) - prev_f.data[j];
        acc += dv * dv;
      }
      err += std::sqrt(acc / static_cast<double>(f.data.size()));
      ++count;
    }
    prev_f = f;
  }
  return count > 0 ? err / count : 0.0;
}

PairedSample draw_batch_sample(const std::vector<PairedSample>& dataset,
                               int patch, Rng& rng) {
  const int idx = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);
  PairedSample s = extract_patch(dataset[static_cast<std::size_t>(idx)].clean,
                                 dataset[static_cast<std::size_t>(idx)].noisy,
                                 patch, rng);
  return augment(s, rng);
}

}  // namespace

double distill_step(Denoiser& theta, Denoiser& theta_minus,
                    const Denoiser& phi, const PairedSample& sample, int i,
                    const DistillConfig& cfg, Optimizer& opt, Rng& rng) {
  phi.require_stage(Stage::pfgmpp);
  const NoiseSchedule& sched = phi.meta.schedule;
  const TeacherDrift drift = [&phi](const ImageTensor& x, double sigma,
                                    const ImageTensor& y) {
    return phi_pfgmpp(phi, x, sigma, y);
  };
  const int indices[1] = {i};
  return distill_update(theta, theta_minus, drift, {&sample, 1},
                        {indices, 1}, sched, cfg, opt, rng);
}

// ---- pretraining ---------------------------------------------------------------

TrainOutput pretrain(const std::vector<PairedSample>& dataset,
                     const RunConfig& cfg, const std::filesystem::path& out_dir,
                     const std::filesystem::path& resume_from) {
  cfg.validate();
  if (dataset.empty()) {
    throw Error(ErrorKind::Config, "pretrain: empty dataset");
  }
  for (const auto& s : dataset) {
    s.validate();
    if (cfg.patch > s.clean.n) {
      throw Error(ErrorKind::Config, "patch larger than dataset images");
    }
  }

  DenoiserMeta meta;
  meta.d = cfg.d;
  meta.sigma_data = cfg.sigma_data;
  meta.schedule = cfg.schedule();
  meta.conditioning = "lowdose-concat";
  meta.stage = Stage::pfgmpp;

  Denoiser phi(meta, make_unet(cfg.net, derive_seed(cfg.seed, "pretrain-init")));
  int start_iter = 0;
  if (!resume_from.empty()) {
    Denoiser resumed = load_checkpoint(resume_from, Stage::pfgmpp);
    resumed.require_d(cfg.d);
    phi = std::move(resumed);
  }
  Optimizer opt("radam", cfg.lr, phi.net->param_count());
  if (!resume_from.empty()) {
    std::filesystem::path state = resume_from;
    state += ".state";
    load_train_state(state, opt, start_iter, nullptr);
  }

  const bool persist = !out_dir.empty();
  if (persist) std::filesystem::create_directories(out_dir);

  TrainOutput result;
  std::vector<TraceRow> trace;
  std::vector<float> last_good = phi.net->params();
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&t0]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  const int ckpt_every = cfg.iters > 0 ? std::max(1, cfg.iters / 4) : 0;
  for (int iter = start_iter; iter < cfg.iters; ++iter) {
    Rng rng(derive_seed(cfg.seed, "pretrain-step",
                        static_cast<std::uint64_t>(iter)));
    std::vector<PairedSample> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
      batch.push_back(draw_batch_sample(dataset, cfg.patch, rng));
    }
    last_good = phi.net->params();
    double loss;
    try {
      loss = pfgmpp_loss(phi, batch, cfg.d, rng,
                         static_cast<float>(cfg.dropout));
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Numeric && persist) {
        phi.net->params() = last_good;
        save_checkpoint(out_dir / "pfgmpp.ckpt", phi);
      }
      throw;
    }
    opt.step(phi.net->params(), phi.net->grads());
    result.losses.push_back(loss);
    trace.push_back({iter, loss, opt.lr(), wall()});
    if (persist && ckpt_every > 0 && (iter + 1) % ckpt_every == 0 &&
        iter + 1 < cfg.iters) {
      save_checkpoint(out_dir / "pfgmpp.ckpt", phi);
      std::filesystem::path state = out_dir / "pfgmpp.ckpt.state";
      save_train_state(state, opt, iter + 1, nullptr);
      write_trace(out_dir / "loss_trace.csv", trace);
    }
  }

  if (persist) {
    save_checkpoint(out_dir / "pfgmpp.ckpt", phi);
    save_train_state(out_dir / "pfgmpp.ckpt.state", opt, cfg.iters, nullptr);
    write_trace(out_dir / "loss_trace.csv", trace);
  }
  result.model = std::move(phi);
  return result;
}

// ---- distillation ----------------------------------------------------------------

TrainOutput distill_custom(const TeacherDrift& drift, DenoiserMeta meta,
                           std::unique_ptr<FreeFormNet> student_init,
                           const std::vector<PairedSample>& dataset,
                           const DistillConfig& cfg,
                           const std::filesystem::path& out_dir,
                           const std::filesystem::path& resume_from) {
  cfg.validate();
  if (dataset.empty()) {
    throw Error(ErrorKind::Config, "distill: empty dataset");
  }
  if (meta.schedule.n_steps != cfg.n_steps) {
    throw Error(ErrorKind::Config, "distill config n_steps (" +
                                       std::to_string(cfg.n_steps) +
                                       ") does not match schedule (" +
                                       std::to_string(meta.schedule.n_steps) +
                                       ")");
  }
  if (meta.d != cfg.d) {
    throw Error(ErrorKind::Config, "distill config D does not match metadata");
  }

  meta.stage = Stage::pfcm;
  Denoiser theta(meta, std::move(student_init));
  Denoiser theta_minus = theta.clone();  // theta_minus <- theta
  Optimizer opt(cfg.optimizer, cfg.lr, theta.net->param_count());
  int start_iter = 0;
  if (!resume_from.empty()) {
    Denoiser resumed = load_checkpoint(resume_from, Stage::pfcm);
    resumed.require_d(cfg.d);
    theta.net->params() = resumed.net->params();
    std::filesystem::path state = resume_from;
    state += ".state";
    load_train_state(state, opt, start_iter, &theta_minus.net->params());
  }

  const bool persist = !out_dir.empty();
  if (persist) std::filesystem::create_directories(out_dir);

  const NoiseSchedule& sched = meta.schedule;
  TrainOutput result;
  result.consistency_error_init = consistency_self_error(
      theta, drift, dataset.front(), sched, cfg.d, cfg.seed);

  std::vector<TraceRow> trace;
  std::vector<std::pair<int, double>> probe_rows;
  std::vector<float> last_good = theta.net->params();
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&t0]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  const int ckpt_every = cfg.checkpoint_every > 0
                             ? cfg.checkpoint_every
                             : (cfg.iters > 0 ? std::max(1, cfg.iters / 4) : 0);
  for (int iter = start_iter; iter < cfg.iters; ++iter) {
    Rng rng(derive_seed(cfg.seed, "distill-step",
                        static_cast<std::uint64_t>(iter)));
    std::vector<PairedSample> batch;
    std::vector<int> indices;
    batch.reserve(static_cast<std::size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
      batch.push_back(draw_batch_sample(dataset, cfg.patch, rng));
      indices.push_back(rng.uniform_int(1, sched.n_steps - 1));
    }
    last_good = theta.net->params();
    double loss;
    try {
      loss = distill_update(theta, theta_minus, drift, batch, indices, sched,
                            cfg, opt, rng);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Numeric && persist) {
        theta.net->params() = last_good;
        save_checkpoint(out_dir / "pfcm.ckpt", theta);
      }
      throw;
    }
    result.losses.push_back(loss);
    trace.push_back({iter, loss, opt.lr(), wall()});
    if (cfg.probe_every > 0 && (iter + 1) % cfg.probe_every == 0) {
      probe_rows.emplace_back(
          iter + 1, consistency_self_error(theta, drift, dataset.front(),
                                           sched, cfg.d, cfg.seed));
    }
    if (persist && ckpt_every > 0 && (iter + 1) % ckpt_every == 0 &&
        iter + 1 < cfg.iters) {
      save_checkpoint(out_dir / "pfcm.ckpt", theta);
      save_train_state(out_dir / "pfcm.ckpt.state", opt, iter + 1,
                       &theta_minus.net->params());
      write_trace(out_dir / "loss_trace.csv", trace);
    }
  }

  result.consistency_error_final = consistency_self_error(
      theta, drift, dataset.front(), sched, cfg.d, cfg.seed);

  if (persist) {
    save_checkpoint(out_dir / "pfcm.ckpt", theta);
    save_train_state(out_dir / "pfcm.ckpt.state", opt, cfg.iters,
                     &theta_minus.net->params());
    write_trace(out_dir / "loss_trace.csv", trace);
    if (!probe_rows.empty()) {
      std::ofstream pf(out_dir / "consistency_trace.csv");
      pf << "iteration,self_error\n";
      for (const auto& [it, err] : probe_rows) {
        pf << it << "," << format_double(err) << "\n";
      }
    }
  }
  result.model = std::move(theta);
  return result;
}

TrainOutput distill(const Denoiser& teacher,
                    const std::vector<PairedSample>& dataset,
                    const DistillConfig& cfg,
                    const std::filesystem::path& out_dir,
                    const std::filesystem::path& resume_from) {
  cfg.validate();
  teacher.require_stage(Stage::pfgmpp);
  teacher.require_d(cfg.d);
  if (teacher.meta.schedule.n_steps != cfg.n_steps) {
    throw Error(ErrorKind::Config,
                "teacher schedule has " +
                    std::to_string(teacher.meta.schedule.n_steps) +
                    " steps, distill config expects " +
                    std::to_string(cfg.n_steps));
  }

  const TeacherDrift drift = [&teacher](const ImageTensor& x, double sigma,
                                        const ImageTensor& y) {
    return phi_pfgmpp(teacher, x, sigma, y);
  };
  std::unique_ptr<FreeFormNet> init =
      cfg.init_from_teacher
          ? teacher.net->clone()
          : net_from_arch_json(teacher.net->arch_json(),
                               derive_seed(cfg.seed, "distill-init"));
  return distill_custom(drift, teacher.meta, std::move(init), dataset, cfg,
                        out_dir, resume_from);
}

}  // namespace pfcm
