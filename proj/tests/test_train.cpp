#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "oracles.hpp"
#include "pfcm/field.hpp"
#include "pfcm/net.hpp"
#include "pfcm/pfkernel.hpp"
#include "pfcm/phantoms.hpp"
#include "pfcm/train.hpp"

#include "test_nets.hpp"

using namespace pfcm;

namespace {

using testnets::IdealPointNet;
using testnets::random_image;
using testnets::tiny_dataset;

DenoiserMeta small_meta(double d = 128.0, double smax = 380.0, int steps = 40) {
  return testnets::meta_for(d, smax, steps);
}

}  // namespace

TEST_CASE("metric distances and their gradients") {
  Rng rng(1);
  ImageTensor a = random_image(8, rng), b = random_image(8, rng);
  const double c = 0.00054 * std::sqrt(64.0);

  ImageTensor ga;
  const double ph = metric_distance(MetricKind::PseudoHuber, c, nullptr, a, b, &ga);
  double ss = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    const double dv = double(a.data[i]) - b.data[i];
    ss += dv * dv;
  }
  CHECK(ph == doctest::Approx(std::sqrt(ss + c * c) - c).epsilon(1e-12));

  // gradient vs finite differences on one pixel
  const double eps = 1e-4;
  ImageTensor ap = a;
  ap.data[5] += static_cast<float>(eps);
  const double hi = metric_distance(MetricKind::PseudoHuber, c, nullptr, ap, b, nullptr);
  ap.data[5] = static_cast<float>(a.data[5] - eps);
  const double lo = metric_distance(MetricKind::PseudoHuber, c, nullptr, ap, b, nullptr);
  CHECK(ga.data[5] == doctest::Approx((hi - lo) / (2 * eps)).epsilon(5e-3));

  const double l2 = metric_distance(MetricKind::L2, c, nullptr, a, b, &ga);
  CHECK(l2 == doctest::Approx(ss / 64.0).epsilon(1e-9));

  // the external adapter seam is honored
  bool called = false;
  ExternalMetric ext = [&called](const ImageTensor& x, const ImageTensor& y,
                                 ImageTensor* g) {
    called = true;
    if (g) *g = ImageTensor(x.n, 0.0f);
    (void)y;
    return 0.25;
  };
  CHECK(metric_distance(MetricKind::External, c, &ext, a, b, nullptr) == 0.25);
  CHECK(called);
  ExternalMetric missing;
  CHECK_THROWS_AS(
      metric_distance(MetricKind::External, c, &missing, a, b, nullptr), Error);
}

TEST_CASE("optimizer minimizes a quadratic deterministically") {
  for (const char* kind : {"radam", "adam"}) {
    Optimizer opt(kind, 0.05, 4);
    std::vector<float> p{2.0f, -1.5f, 0.7f, 3.0f};
    std::vector<float> g(4);
    for (int it = 0; it < 400; ++it) {
      for (int i = 0; i < 4; ++i) g[static_cast<std::size_t>(i)] = 2.0f * p[static_cast<std::size_t>(i)];
      opt.step(p, g);
    }
    for (float v : p) CHECK(std::abs(v) < 0.02f);
  }
  CHECK_THROWS_AS(Optimizer("sgd", 0.1, 4), Error);
}

TEST_CASE("ideal single-point predictor has (near) zero objective at any sigma") {
  Rng rng(2);
  const ImageTensor x0 = random_image(16, rng);
  const ImageTensor y = random_image(16, rng);
  const DenoiserMeta meta = small_meta();
  Denoiser phi(meta, std::make_unique<IdealPointNet>(
                         x0, meta.sigma_data, meta.schedule.sigma_min));

  for (double sigma : {0.01, 0.1, 1.0, 10.0, 380.0}) {
    Rng prng(derive_seed(3, "p", static_cast<std::uint64_t>(sigma * 100)));
    const ImageTensor xs = perturb(x0, sigma, meta.d, prng);
    Rng drng(1);
    const double loss =
        pfgmpp_residual_loss(phi, x0, y, sigma, xs, false, 0.0f, drng);
    CHECK(loss < 1e-8);
  }
}

TEST_CASE("antithetic perturbations average to the symmetric loss") {
  // zero-weight network: f = c_skip * x_sigma, so the residual loss has a
  // v-linear cross term that two antithetic draws cancel exactly.
  const DenoiserMeta meta = small_meta();
  Denoiser phi(meta, make_unet({2, 4, 2, 1, 8}, 4));
  std::fill(phi.net->params().begin(), phi.net->params().end(), 0.0f);

  Rng rng(5);
  const ImageTensor x = random_image(16, rng);
  const ImageTensor y = random_image(16, rng);
  const double sigma = 0.8, radius = 3.0;
  std::vector<float> v(x.pixels());
  sample_angle(v, rng);

  ImageTensor xp(x.n), xm(x.n);
  for (std::size_t i = 0; i < x.pixels(); ++i) {
    xp.data[i] = static_cast<float>(x.data[i] + radius * v[i]);
    xm.data[i] = static_cast<float>(x.data[i] - radius * v[i]);
  }
  Rng drng(1);
  const double lp = pfgmpp_residual_loss(phi, x, y, sigma, xp, false, 0.0f, drng);
  const double lm = pfgmpp_residual_loss(phi, x, y, sigma, xm, false, 0.0f, drng);

  const Precond pc = precondition(sigma, meta.sigma_data, meta.schedule.sigma_min);
  double sym = 0.0;
  for (std::size_t i = 0; i < x.pixels(); ++i) {
    const double a = (1.0 - pc.c_skip) * x.data[i];
    const double b = pc.c_skip * radius * v[i];
    sym += a * a + b * b;
  }
  sym /= (sigma * sigma * static_cast<double>(x.pixels()));
  CHECK(0.5 * (lp + lm) == doctest::Approx(sym).epsilon(1e-5));
}

TEST_CASE("objective gradients match finite differences on a toy model") {
  const DenoiserMeta meta = small_meta();
  Denoiser phi(meta, make_tiny_mlp(2, 2, 77));
  REQUIRE(phi.net->param_count() <= 32);

  Rng rng(6);
  const ImageTensor clean = random_image(8, rng);
  const ImageTensor y = random_image(8, rng);
  const double sigma = 0.6;
  Rng prng(7);
  const ImageTensor xs = perturb(clean, sigma, meta.d, prng);

  SUBCASE("perturbation-matching objective") {
    Rng drng(1);
    (void)pfgmpp_residual_loss(phi, clean, y, sigma, xs, true, 0.0f, drng);
    const std::vector<float> grads = phi.net->grads();
    auto loss = [&]() {
      Rng r2(1);
      return pfgmpp_residual_loss(phi, clean, y, sigma, xs, false, 0.0f, r2);
    };
    for (std::size_t k = 0; k < phi.net->param_count(); ++k) {
      const double fd = oracles::central_fd(phi.net->params(), k, 1e-2, loss);
      const double denom = std::max({std::abs(fd), std::abs(double(grads[k])), 1e-4});
      CHECK(std::abs(fd - grads[k]) / denom < 1e-3);
    }
  }

  SUBCASE("consistency-matching objective") {
    DistillConfig dcfg;
    dcfg.d = meta.d;
    dcfg.n_steps = meta.schedule.n_steps;
    Denoiser theta(meta, make_tiny_mlp(2, 2, 78));
    Denoiser theta_minus(meta, make_tiny_mlp(2, 2, 79));
    const double s_hi = meta.schedule.sigma_ascending(21);
    const double s_lo = meta.schedule.sigma_ascending(20);
    Rng prng2(8);
    const ImageTensor x_hi = perturb(clean, s_hi, meta.d, prng2);
    const ImageTensor drift = ideal_field_single_point(x_hi, s_hi, clean);
    ImageTensor x_lo(x_hi.n);
    for (std::size_t i = 0; i < x_hi.pixels(); ++i) {
      x_lo.data[i] = static_cast<float>(x_hi.data[i] +
                                        (s_lo - s_hi) * drift.data[i]);
    }

    Rng drng(1);
    (void)consistency_pair_loss(theta, theta_minus, x_hi, s_hi, x_lo, s_lo, y,
                                dcfg, true, drng);
    const std::vector<float> grads = theta.net->grads();
    auto loss = [&]() {
      Rng r2(1);
      return consistency_pair_loss(theta, theta_minus, x_hi, s_hi, x_lo, s_lo,
                                   y, dcfg, false, r2);
    };
    for (std::size_t k = 0; k < theta.net->param_count(); ++k) {
      const double fd = oracles::central_fd(theta.net->params(), k, 1e-2, loss);
      const double denom = std::max({std::abs(fd), std::abs(double(grads[k])), 1e-4});
      CHECK(std::abs(fd - grads[k]) / denom < 1e-3);
    }
  }
}

TEST_CASE("degenerate consistency pair collapses to zero distance") {
  const DenoiserMeta meta = small_meta();
  Denoiser theta(meta, make_tiny_mlp(2, 2, 80));
  Denoiser theta_minus = theta.clone();

  Rng rng(9);
  const ImageTensor x = random_image(8, rng);
  const ImageTensor y = random_image(8, rng);
  DistillConfig cfg;
  cfg.d = meta.d;
  cfg.n_steps = meta.schedule.n_steps;
  Rng drng(1);
  const double d0 = consistency_pair_loss(theta, theta_minus, x, 0.5, x, 0.5,
                                          y, cfg, false, drng);
  CHECK(d0 == 0.0);
}

TEST_CASE("EMA endpoints: mu = 1 freezes, mu = 0 copies") {
  const DenoiserMeta meta = small_meta();
  auto dataset = tiny_dataset(1, 8, 11);

  for (double mu : {1.0, 0.0}) {
    Denoiser phi(meta, std::make_unique<IdealPointNet>(
                           dataset[0].clean, meta.sigma_data,
                           meta.schedule.sigma_min));
    Denoiser theta(meta, make_tiny_mlp(2, 2, 81));
    theta.meta.stage = Stage::pfcm;
    Denoiser theta_minus = theta.clone();
    const std::vector<float> tm_before = theta_minus.net->params();

    DistillConfig cfg;
    cfg.d = meta.d;
    cfg.n_steps = meta.schedule.n_steps;
    cfg.mu = mu;
    cfg.patch = 8;
    Optimizer opt("radam", 1e-3, theta.net->param_count());
    Rng rng(12);
    (void)distill_step(theta, theta_minus, phi, dataset[0], 20, cfg, opt, rng);

    if (mu == 1.0) {
      CHECK(theta_minus.net->params() == tm_before);
    } else {
      CHECK(theta_minus.net->params() == theta.net->params());
    }
  }
}

TEST_CASE("target branch is behind a stop-gradient") {
  const DenoiserMeta meta = small_meta();
  Denoiser theta(meta, make_tiny_mlp(2, 2, 82));
  Denoiser tm_a(meta, make_tiny_mlp(2, 2, 83));
  Denoiser tm_b(meta, make_tiny_mlp(2, 2, 84));

  Rng rng(13);
  const ImageTensor clean = random_image(8, rng);
  const ImageTensor y = random_image(8, rng);
  const double s_hi = meta.schedule.sigma_ascending(25);
  const double s_lo = meta.schedule.sigma_ascending(24);
  Rng prng(14);
  const ImageTensor x_hi = perturb(clean, s_hi, meta.d, prng);
  const ImageTensor x_lo = x_hi;

  DistillConfig cfg;
  cfg.d = meta.d;
  cfg.n_steps = meta.schedule.n_steps;

  auto grads_for = [&](const Denoiser& tm) {
    Rng drng(1);
    (void)consistency_pair_loss(theta, tm, x_hi, s_hi, x_lo, s_lo, y, cfg,
                                true, drng);
    return theta.net->grads();
  };
  auto fd_for = [&](const Denoiser& tm, std::size_t k) {
    auto loss = [&]() {
      Rng r2(1);
      return consistency_pair_loss(theta, tm, x_hi, s_hi, x_lo, s_lo, y, cfg,
                                   false, r2);
    };
    return oracles::central_fd(theta.net->params(), k, 1e-2, loss);
  };

  Rng lr(1);
  const double loss_a = consistency_pair_loss(theta, tm_a, x_hi, s_hi, x_lo,
                                              s_lo, y, cfg, false, lr);
  const double loss_b = consistency_pair_loss(theta, tm_b, x_hi, s_hi, x_lo,
                                              s_lo, y, cfg, false, lr);
  CHECK(loss_a != loss_b);  // the target weights do change the loss value

  // ... but the step direction on theta is the one with theta_minus frozen
  const std::vector<float> ga = grads_for(tm_a);
  for (std::size_t k = 0; k < theta.net->param_count(); ++k) {
    const double fd = fd_for(tm_a, k);
    const double denom = std::max({std::abs(fd), std::abs(double(ga[k])), 1e-4});
    CHECK(std::abs(fd - ga[k]) / denom < 2e-3);
  }
  const std::vector<float> gb = grads_for(tm_b);
  for (std::size_t k = 0; k < theta.net->param_count(); ++k) {
    const double fd = fd_for(tm_b, k);
    const double denom = std::max({std::abs(fd), std::abs(double(gb[k])), 1e-4});
    CHECK(std::abs(fd - gb[k]) / denom < 2e-3);
  }
}

TEST_CASE("EMA trace satisfies the contraction triangle inequality") {
  const DenoiserMeta meta = small_meta();
  auto dataset = tiny_dataset(2, 8, 21);
  Denoiser phi(meta, std::make_unique<IdealPointNet>(
                         dataset[0].clean, meta.sigma_data,
                         meta.schedule.sigma_min));
  Denoiser theta(meta, make_tiny_mlp(2, 2, 85));
  theta.meta.stage = Stage::pfcm;
  Denoiser theta_minus = theta.clone();

  DistillConfig cfg;
  cfg.d = meta.d;
  cfg.n_steps = meta.schedule.n_steps;
  cfg.mu = 0.9;
  Optimizer opt("radam", 1e-3, theta.net->param_count());

  auto norm_diff = [](const std::vector<float>& a, const std::vector<float>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      acc += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    }
    return std::sqrt(acc);
  };

  std::vector<float> prev_theta = theta.net->params();
  double prev_gap = norm_diff(theta_minus.net->params(), prev_theta);
  for (int it = 0; it < 10; ++it) {
    Rng rng(derive_seed(40, "ema", static_cast<std::uint64_t>(it)));
    (void)distill_step(theta, theta_minus, phi, dataset[it % 2], 15, cfg, opt,
                       rng);
    const double gap = norm_diff(theta_minus.net->params(), theta.net->params());
    const double step = norm_diff(theta.net->params(), prev_theta);
    CHECK(gap <= prev_gap + step + 1e-6);
    prev_gap = gap;
    prev_theta = theta.net->params();
  }
}

TEST_CASE("distillation never updates the teacher") {
  const DenoiserMeta meta = small_meta(128.0, 80.0, 10);
  auto dataset = tiny_dataset(2, 8, 31);
  RunConfig rc;
  rc.d = 128.0;
  rc.sigma_max = 80.0;
  rc.n_steps = 10;
  rc.iters = 3;
  rc.batch = 2;
  rc.patch = 8;
  rc.net = {2, 4, 2, 1, 8};
  rc.seed = 5;
  TrainOutput teacher = pretrain(dataset, rc);

  const std::vector<float> before = teacher.model.net->params();
  DistillConfig cfg;
  cfg.d = 128.0;
  cfg.n_steps = 10;
  cfg.iters = 5;
  cfg.batch = 2;
  cfg.patch = 8;
  cfg.seed = 6;
  TrainOutput student = distill(teacher.model, dataset, cfg);
  CHECK(teacher.model.net->params() == before);
  CHECK(student.model.meta.stage == Stage::pfcm);
  CHECK(student.losses.size() == 5);
}

TEST_CASE("distillation refuses metadata mismatches") {
  const DenoiserMeta meta = small_meta(128.0, 80.0, 10);
  auto dataset = tiny_dataset(1, 8, 41);
  Denoiser teacher(meta, make_unet({2, 4, 2, 1, 8}, 50));

  DistillConfig cfg;
  cfg.d = 2048.0;  // teacher was trained at 128
  cfg.n_steps = 10;
  cfg.iters = 1;
  cfg.patch = 8;
  CHECK_THROWS_AS(distill(teacher, dataset, cfg), Error);

  cfg.d = 128.0;
  cfg.n_steps = 40;  // wrong grid
  CHECK_THROWS_AS(distill(teacher, dataset, cfg), Error);

  Denoiser student(meta, make_unet({2, 4, 2, 1, 8}, 51));
  student.meta.stage = Stage::pfcm;
  CHECK_THROWS_AS(distill(student, dataset, cfg), Error);  // wrong stage
}

TEST_CASE("training losses are deterministic under the seed") {
  auto dataset = tiny_dataset(2, 16, 51);
  RunConfig rc;
  rc.sigma_max = 80.0;
  rc.n_steps = 10;
  rc.iters = 12;
  rc.batch = 2;
  rc.patch = 8;
  rc.net = {2, 4, 2, 1, 8};
  rc.seed = 99;
  const TrainOutput a = pretrain(dataset, rc);
  const TrainOutput b = pretrain(dataset, rc);
  CHECK(a.losses == b.losses);
  CHECK(a.model.net->params() == b.model.net->params());

  DistillConfig dc;
  dc.d = rc.d;
  dc.n_steps = 10;
  dc.iters = 8;
  dc.batch = 2;
  dc.patch = 8;
  dc.seed = 100;
  const TrainOutput da = distill(a.model, dataset, dc);
  const TrainOutput db = distill(b.model, dataset, dc);
  CHECK(da.losses == db.losses);
  CHECK(da.model.net->params() == db.model.net->params());
}

TEST_CASE("pretraining converges on the degenerate one-sample problem") {
  auto dataset = tiny_dataset(1, 16, 61);
  RunConfig rc;
  rc.sigma_max = 380.0;
  rc.n_steps = 40;
  rc.iters = 2000;
  rc.batch = 4;
  rc.patch = 16;
  rc.net = {2, 8, 2, 1, 16};
  rc.lr = 3e-3;
  rc.dropout = 0.0;
  rc.seed = 7;
  const TrainOutput out = pretrain(dataset, rc);

  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) head += out.losses[static_cast<std::size_t>(i)];
  head /= 10.0;
  for (int i = 0; i < 100; ++i) {
    tail += out.losses[out.losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  tail /= 100.0;
  CHECK(tail < 0.10 * head);
}
