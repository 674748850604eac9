#include "pfcm/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "pfcm/types.hpp"

namespace pfcm {

namespace {

using nlohmann::json;

inline float sigmoidf(float v) { return 1.0f / (1.0f + std::exp(-v)); }
inline float siluf(float v) { return v * sigmoidf(v); }
inline float silu_gradf(float v) {
  const float s = sigmoidf(v);
  return s * (1.0f + v * (1.0f - s));
}

// ---- primitive layers over a flat parameter vector ------------------------

struct ConvDesc {
  int cin = 0, cout = 0, k = 3, stride = 1;
  std::size_t woff = 0, boff = 0;
  std::size_t wsize() const {
    return static_cast<std::size_t>(cin) * cout * k * k;
  }
};

struct LinDesc {
  int cin = 0, cout = 0;
  std::size_t woff = 0, boff = 0;
  std::size_t wsize() const { return static_cast<std::size_t>(cin) * cout; }
};

// 3x3 same-padding conv, stride 1 or 2 (s must be even for stride 2).
void conv_fwd(const ConvDesc& cd, const float* params, const float* in,
              float* out, int nb, int s) {
  const int so = s / cd.stride;
  const float* w = params + cd.woff;
  const float* bias = params + cd.boff;
#ifdef PFCM_USE_OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int bi = 0; bi < nb; ++bi) {
    for (int oc = 0; oc < cd.cout; ++oc) {
      float* op = out + (static_cast<std::size_t>(bi) * cd.cout + oc) * so * so;
      std::fill(op, op + static_cast<std::size_t>(so) * so, bias[oc]);
      for (int ic = 0; ic < cd.cin; ++ic) {
        const float* ip =
            in + (static_cast<std::size_t>(bi) * cd.cin + ic) * s * s;
        const float* wk = w + (static_cast<std::size_t>(oc) * cd.cin + ic) * 9;
        if (cd.stride == 1) {
          for (int ky = 0; ky < 3; ++ky) {
            const int dy = ky - 1;
            const int y0 = std::max(0, -dy);
            const int y1 = std::min(s, s - dy);
            for (int kx = 0; kx < 3; ++kx) {
              const int dx = kx - 1;
              const float wv = wk[ky * 3 + kx];
              const int x0 = std::max(0, -dx);
              const int x1 = std::min(s, s - dx);
              for (int y = y0; y < y1; ++y) {
                float* orow = op + static_cast<std::size_t>(y) * s;
                const float* irow =
                    ip + static_cast<std::size_t>(y + dy) * s + dx;
                for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
              }
            }
          }
        } else {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const float wv = wk[ky * 3 + kx];
              for (int y = 0; y < so; ++y) {
                const int iy = 2 * y + ky - 1;
                if (iy < 0 || iy >= s) continue;
                float* orow = op + static_cast<std::size_t>(y) * so;
                const float* irow = ip + static_cast<std::size_t>(iy) * s;
                for (int x = 0; x < so; ++x) {
                  const int ix = 2 * x + kx - 1;
                  if (ix < 0 || ix >= s) continue;
                  orow[x] += wv * irow[ix];
                }
              }
            }
          }
        }
      }
    }
  }
}

// Gradient w.r.t. the conv input. din must be zeroed by the caller.
void conv_bwd_input(const ConvDesc& cd, const float* params, const float* dout,
                    float* din, int nb, int s) {
  const int so = s / cd.stride;
  const float* w = params + cd.woff;
#ifdef PFCM_USE_OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int bi = 0; bi < nb; ++bi) {
    for (int ic = 0; ic < cd.cin; ++ic) {
      float* dp = din + (static_cast<std::size_t>(bi) * cd.cin + ic) * s * s;
      for (int oc = 0; oc < cd.cout; ++oc) {
        const float* gp =
            dout + (static_cast<std::size_t>(bi) * cd.cout + oc) * so * so;
        const float* wk = w + (static_cast<std::size_t>(oc) * cd.cin + ic) * 9;
        if (cd.stride == 1) {
          for (int ky = 0; ky < 3; ++ky) {
            const int dy = ky - 1;
            const int y0 = std::max(0, dy);
            const int y1 = std::min(s, s + dy);
            for (int kx = 0; kx < 3; ++kx) {
              const int dx = kx - 1;
              const float wv = wk[ky * 3 + kx];
              const int x0 = std::max(0, dx);
              const int x1 = std::min(s, s + dx);
              for (int y = y0; y < y1; ++y) {
                float* drow = dp + static_cast<std::size_t>(y) * s;
                const float* grow =
                    gp + static_cast<std::size_t>(y - dy) * s - dx;
                for (int x = x0; x < x1; ++x) drow[x] += wv * grow[x];
              }
            }
          }
        } else {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const float wv = wk[ky * 3 + kx];
              for (int y = 0; y < so; ++y) {
                const int iy = 2 * y + ky - 1;
                if (iy < 0 || iy >= s) continue;
                const float* grow = gp + static_cast<std::size_t>(y) * so;
                float* drow = dp + static_cast<std::size_t>(iy) * s;
                for (int x = 0; x < so; ++x) {
                  const int ix = 2 * x + kx - 1;
                  if (ix < 0 || ix >= s) continue;
                  drow[ix] += wv * grow[x];
                }
              }
            }
          }
        }
      }
    }
  }
}

// Accumulates dW/db. Parallel over output channels so each gradient element
// is owned by exactly one thread (keeps runs bit-reproducible).
void conv_bwd_params(const ConvDesc& cd, float* grads, const float* dout,
                     const float* in, int nb, int s) {
  const int so = s / cd.stride;
  float* dw = grads + cd.woff;
  float* db = grads + cd.boff;
#ifdef PFCM_USE_OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int oc = 0; oc < cd.cout; ++oc) {
    double bacc = 0.0;
    for (int bi = 0; bi < nb; ++bi) {
      const float* gp =
          dout + (static_cast<std::size_t>(bi) * cd.cout + oc) * so * so;
      for (int i = 0; i < so * so; ++i) bacc += gp[i];
    }
    db[oc] += static_cast<float>(bacc);
    for (int ic = 0; ic < cd.cin; ++ic) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int dy = ky - 1, dx = kx - 1;
          double acc = 0.0;
          for (int bi = 0; bi < nb; ++bi) {
            const float* gp =
                dout + (static_cast<std::size_t>(bi) * cd.cout + oc) * so * so;
            const float* ip =
                in + (static_cast<std::size_t>(bi) * cd.cin + ic) * s * s;
            if (cd.stride == 1) {
              const int y0 = std::max(0, -dy);
              const int y1 = std::min(s, s - dy);
              const int x0 = std::max(0, -dx);
              const int x1 = std::min(s, s - dx);
              for (int y = y0; y < y1; ++y) {
                const float* grow = gp + static_cast<std::size_t>(y) * s;
                const float* irow =
                    ip + static_cast<std::size_t>(y + dy) * s + dx;
                float facc = 0.0f;
                for (int x = x0; x < x1; ++x) facc += grow[x] * irow[x];
                acc += facc;
              }
            } else {
              for (int y = 0; y < so; ++y) {
                const int iy = 2 * y + ky - 1;
                if (iy < 0 || iy >= s) continue;
                const float* grow = gp + static_cast<std::size_t>(y) * so;
                const float* irow = ip + static_cast<std::size_t>(iy) * s;
                for (int x = 0; x < so; ++x) {
                  const int ix = 2 * x + kx - 1;
                  if (ix < 0 || ix >= s) continue;
                  acc += grow[x] * irow[ix];
                }
              }
            }
          }
          dw[(static_cast<std::size_t>(oc) * cd.cin + ic) * 9 + ky * 3 + kx] +=
              static_cast<float>(acc);
        }
      }
    }
  }
}

void lin_fwd(const LinDesc& ld, const float* params, const float* in,
             float* out, int nb) {
  const float* w = params + ld.woff;
  const float* b = params + ld.boff;
  for (int bi = 0; bi < nb; ++bi) {
    const float* ip = in + static_cast<std::size_t>(bi) * ld.cin;
    float* op = out + static_cast<std::size_t>(bi) * ld.cout;
    for (int o = 0; o < ld.cout; ++o) {
      float acc = b[o];
      const float* wr = w + static_cast<std::size_t>(o) * ld.cin;
      for (int i = 0; i < ld.cin; ++i) acc += wr[i] * ip[i];
      op[o] = acc;
    }
  }
}

// din may be null when the input gradient is not needed.
void lin_bwd(const LinDesc& ld, const float* params, float* grads,
             const float* dout, const float* in, float* din, int nb) {
  const float* w = params + ld.woff;
  float* dw = grads + ld.woff;
  float* db = grads + ld.boff;
  for (int bi = 0; bi < nb; ++bi) {
    const float* gp = dout + static_cast<std::size_t>(bi) * ld.cout;
    const float* ip = in + static_cast<std::size_t>(bi) * ld.cin;
    for (int o = 0; o < ld.cout; ++o) {
      const float g = gp[o];
      db[o] += g;
      float* dwr = dw + static_cast<std::size_t>(o) * ld.cin;
      for (int i = 0; i < ld.cin; ++i) dwr[i] += g * ip[i];
    }
    if (din) {
      float* dp = din + static_cast<std::size_t>(bi) * ld.cin;
      for (int o = 0; o < ld.cout; ++o) {
        const float g = gp[o];
        const float* wr = w + static_cast<std::size_t>(o) * ld.cin;
        for (int i = 0; i < ld.cin; ++i) dp[i] += g * wr[i];
      }
    }
  }
}

constexpr int kFourierFeatures = 32;  // 16 log-spaced frequencies, sin + cos

void fourier_features(const float* c_noise, int nb, float* fe) {
  for (int bi = 0; bi < nb; ++bi) {
    float* row = fe + static_cast<std::size_t>(bi) * kFourierFeatures;
    float freq = 0.25f;
    for (int k = 0; k < kFourierFeatures / 2; ++k) {
      row[2 * k] = std::sin(freq * c_noise[bi]);
      row[2 * k + 1] = std::cos(freq * c_noise[bi]);
      freq *= 1.41421356f;
    }
  }
}

// ---- UNet ------------------------------------------------------------------

struct ResDesc {
  ConvDesc c1, c2;
  LinDesc ep;  // emb -> per-channel bias
  int ch = 0;
};

struct ResCache {
  std::vector<float> x, a, h1, bd, mask;
};

struct UNetCache {
  int nb = 0, s = 0;
  float dropout = 0.0f;
  std::vector<float> fe, e1_pre, e1, emb;
  std::vector<float> input;
  std::vector<float> stem_out;
  std::vector<std::vector<ResCache>> enc;
  std::vector<std::vector<float>> skip;
  std::vector<std::vector<float>> down_out;
  ResCache mid;
  std::vector<std::vector<float>> up_out;
  std::vector<std::vector<float>> upconv_out;
  std::vector<std::vector<float>> fuse_in;
  std::vector<std::vector<float>> fuse_out;
  std::vector<std::vector<ResCache>> dec;
  std::vector<float> pre_head;
  std::vector<float> ah;
};

class UNet final : public FreeFormNet {
 public:
  UNet(const NetConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    build_layout();
    init_params(init_seed);
  }

  int in_channels() const override { return cfg_.in_channels; }
  std::size_t param_count() const override { return params_.size(); }
  std::vector<float>& params() override { return params_; }
  const std::vector<float>& params() const override { return params_; }
  std::vector<float>& grads() override { return grads_; }
  void zero_grads() override { std::fill(grads_.begin(), grads_.end(), 0.0f); }

  void infer(const float* in, const float* c_noise, int nb, int s,
             float* out) const override {
    UNetCache local;
    run_forward(local, in, c_noise, nb, s, out, 0.0f, nullptr);
  }

  void forward_train(const float* in, const float* c_noise, int nb, int s,
                     float* out, float dropout_p, Rng& rng) override {
    run_forward(tc_, in, c_noise, nb, s, out, dropout_p, &rng);
  }

  void backward(const float* dout) override;

  std::string arch_json() const override {
    json j{{"type", "unet"},
           {"in_channels", cfg_.in_channels},
           {"base_width", cfg_.base_width},
           {"levels", cfg_.levels},
           {"blocks_per_level", cfg_.blocks_per_level},
           {"emb_dim", cfg_.emb_dim}};
    return j.dump();
  }

  std::unique_ptr<FreeFormNet> clone() const override {
    auto copy = std::make_unique<UNet>(cfg_, 0);
    copy->params_ = params_;
    return copy;
  }

 private:
  int level_ch(int l) const { return cfg_.base_width << std::min(l, 3); }

  std::size_t alloc(std::size_t count) {
    const std::size_t off = n_params_;
    n_params_ += count;
    return off;
  }

  ConvDesc make_conv(int cin, int cout, int stride) {
    ConvDesc c;
    c.cin = cin;
    c.cout = cout;
    c.stride = stride;
    c.woff = alloc(c.wsize());
    c.boff = alloc(static_cast<std::size_t>(cout));
    return c;
  }

  LinDesc make_lin(int cin, int cout) {
    LinDesc l;
    l.cin = cin;
    l.cout = cout;
    l.woff = alloc(l.wsize());
    l.boff = alloc(static_cast<std::size_t>(cout));
    return l;
  }

  ResDesc make_res(int ch) {
    ResDesc r;
    r.ch = ch;
    r.c1 = make_conv(ch, ch, 1);
    r.c2 = make_conv(ch, ch, 1);
    r.ep = make_lin(cfg_.emb_dim, ch);
    return r;
  }

  void build_layout() {
    const int L = cfg_.levels;
    emb1_ = make_lin(kFourierFeatures, cfg_.emb_dim);
    emb2_ = make_lin(cfg_.emb_dim, cfg_.emb_dim);
    stem_ = make_conv(cfg_.in_channels, level_ch(0), 1);
    enc_.resize(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
      for (int b = 0; b < cfg_.blocks_per_level; ++b) {
        enc_[static_cast<std::size_t>(l)].push_back(make_res(level_ch(l)));
      }
    }
    for (int l = 0; l + 1 < L; ++l) {
      down_.push_back(make_conv(level_ch(l), level_ch(l + 1), 2));
    }
    mid_ = make_res(level_ch(L - 1));
    up_.resize(static_cast<std::size_t>(std::max(0, L - 1)));
    fuse_.resize(up_.size());
    dec_.resize(up_.size());
    for (int l = L - 2; l >= 0; --l) {
      up_[static_cast<std::size_t>(l)] = make_conv(level_ch(l + 1), level_ch(l), 1);
      fuse_[static_cast<std::size_t>(l)] = make_conv(2 * level_ch(l), level_ch(l), 1);
      for (int b = 0; b < cfg_.blocks_per_level; ++b) {
        dec_[static_cast<std::size_t>(l)].push_back(make_res(level_ch(l)));
      }
    }
    head_ = make_conv(level_ch(0), 1, 1);
    params_.assign(n_params_, 0.0f);
    grads_.assign(n_params_, 0.0f);
  }

  void he_init(const ConvDesc& c, Rng& rng) {
    const float scale =
        std::sqrt(2.0f / static_cast<float>(c.cin * c.k * c.k));
    for (std::size_t i = 0; i < c.wsize(); ++i) {
      params_[c.woff + i] = static_cast<float>(rng.normal()) * scale;
    }
  }

  void init_params(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "unet-init"));
    const float lscale = std::sqrt(1.0f / kFourierFeatures);
    for (std::size_t i = 0; i < emb1_.wsize(); ++i) {
      params_[emb1_.woff + i] = static_cast<float>(rng.normal()) * lscale;
    }
    const float l2scale = std::sqrt(1.0f / cfg_.emb_dim);
    for (std::size_t i = 0; i < emb2_.wsize(); ++i) {
      params_[emb2_.woff + i] = static_cast<float>(rng.normal()) * l2scale;
    }
    he_init(stem_, rng);
    auto init_res = [&](ResDesc& r) {
      he_init(r.c1, rng);
      // c2 and the emb projection start at zero: each block begins as the
      // identity, which keeps early training well-behaved.
    };
    for (auto& lvl : enc_) {
      for (auto& r : lvl) init_res(r);
    }
    for (auto& d : down_) he_init(d, rng);
    init_res(mid_);
    for (std::size_t l = 0; l < up_.size(); ++l) {
      he_init(up_[l], rng);
      he_init(fuse_[l], rng);
      for (auto& r : dec_[l]) init_res(r);
    }
    // head stays zero: F(0-init) == 0.
  }

  void res_fwd(const ResDesc& r, ResCache& rc, const std::vector<float>& in,
               std::vector<float>& out, const std::vector<float>& emb, int nb,
               int s, float dropout_p, Rng* rng) const {
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    const std::size_t total = static_cast<std::size_t>(nb) * r.ch * plane;
    rc.x = in;
    rc.a.resize(total);
    for (std::size_t i = 0; i < total; ++i) rc.a[i] = siluf(in[i]);
    rc.h1.resize(total);
    conv_fwd(r.c1, params_.data(), rc.a.data(), rc.h1.data(), nb, s);

    std::vector<float> z(static_cast<std::size_t>(nb) * r.ch);
    lin_fwd(r.ep, params_.data(), emb.data(), z.data(), nb);
    for (int bi = 0; bi < nb; ++bi) {
      for (int c = 0; c < r.ch; ++c) {
        const float zv = z[static_cast<std::size_t>(bi) * r.ch + c];
        float* hp = rc.h1.data() + (static_cast<std::size_t>(bi) * r.ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) hp[i] += zv;
      }
    }

    rc.bd.resize(total);
    if (dropout_p > 0.0f && rng) {
      rc.mask.resize(total);
      const float keep = 1.0f - dropout_p;
      const float inv_keep = 1.0f / keep;
      for (std::size_t i = 0; i < total; ++i) {
        rc.mask[i] = (rng->uniform() < keep) ? inv_keep : 0.0f;
        rc.bd[i] = siluf(rc.h1[i]) * rc.mask[i];
      }
    } else {
      rc.mask.clear();
      for (std::size_t i = 0; i < total; ++i) rc.bd[i] = siluf(rc.h1[i]);
    }

    out.resize(total);
    conv_fwd(r.c2, params_.data(), rc.bd.data(), out.data(), nb, s);
    for (std::size_t i = 0; i < total; ++i) out[i] += rc.x[i];
  }

  // Returns the input gradient; accumulates parameter and emb gradients.
  std::vector<float> res_bwd(const ResDesc& r, const ResCache& rc,
                             const std::vector<float>& dout,
                             std::vector<float>& demb,
                             const std::vector<float>& emb, int nb, int s) {
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    const std::size_t total = static_cast<std::size_t>(nb) * r.ch * plane;

    std::vector<float> dbd(total, 0.0f);
    conv_bwd_input(r.c2, params_.data(), dout.data(), dbd.data(), nb, s);
    conv_bwd_params(r.c2, grads_.data(), dout.data(), rc.bd.data(), nb, s);

    if (!rc.mask.empty()) {
      for (std::size_t i = 0; i < total; ++i) dbd[i] *= rc.mask[i];
    }
    std::vector<float> dh1(total);
    for (std::size_t i = 0; i < total; ++i) {
      dh1[i] = dbd[i] * silu_gradf(rc.h1[i]);
    }

    std::vector<float> dz(static_cast<std::size_t>(nb) * r.ch, 0.0f);
    for (int bi = 0; bi < nb; ++bi) {
      for (int c = 0; c < r.ch; ++c) {
        const float* hp =
            dh1.data() + (static_cast<std::size_t>(bi) * r.ch + c) * plane;
        float acc = 0.0f;
        for (std::size_t i = 0; i < plane; ++i) acc += hp[i];
        dz[static_cast<std::size_t>(bi) * r.ch + c] = acc;
      }
    }
    lin_bwd(r.ep, params_.data(), grads_.data(), dz.data(), emb.data(),
            demb.data(), nb);

    std::vector<float> da(total, 0.0f);
    conv_bwd_input(r.c1, params_.data(), dh1.data(), da.data(), nb, s);
    conv_bwd_params(r.c1, grads_.data(), dh1.data(), rc.a.data(), nb, s);

    std::vector<float> din(total);
    for (std::size_t i = 0; i < total; ++i) {
      din[i] = dout[i] + da[i] * silu_gradf(rc.x[i]);
    }
    return din;
  }

  void run_forward(UNetCache& c, const float* in, const float* c_noise, int nb,
                   int s, float* out, float dropout_p, Rng* rng) const {
    if (s < (1 << (cfg_.levels - 1)) || s % (1 << (cfg_.levels - 1)) != 0) {
      throw Error(ErrorKind::Config, "input resolution too small for " +
                                         std::to_string(cfg_.levels) +
                                         " network levels");
    }
    const int L = cfg_.levels;
    c.nb = nb;
    c.s = s;
    c.dropout = dropout_p;

    c.fe.resize(static_cast<std::size_t>(nb) * kFourierFeatures);
    fourier_features(c_noise, nb, c.fe.data());
    c.e1_pre.resize(static_cast<std::size_t>(nb) * cfg_.emb_dim);
    lin_fwd(emb1_, params_.data(), c.fe.data(), c.e1_pre.data(), nb);
    c.e1.resize(c.e1_pre.size());
    for (std::size_t i = 0; i < c.e1.size(); ++i) c.e1[i] = siluf(c.e1_pre[i]);
    c.emb.resize(c.e1.size());
    lin_fwd(emb2_, params_.data(), c.e1.data(), c.emb.data(), nb);

    c.input.assign(in, in + static_cast<std::size_t>(nb) * cfg_.in_channels * s * s);
    c.stem_out.resize(static_cast<std::size_t>(nb) * level_ch(0) * s * s);
    conv_fwd(stem_, params_.data(), c.input.data(), c.stem_out.data(), nb, s);

    c.enc.assign(static_cast<std::size_t>(L), {});
    c.skip.assign(static_cast<std::size_t>(L), {});
    c.down_out.assign(static_cast<std::size_t>(std::max(0, L - 1)), {});

    std::vector<float> h = c.stem_out;
    int sl = s;
    for (int l = 0; l < L; ++l) {
      c.enc[static_cast<std::size_t>(l)].resize(
          static_cast<std::size_t>(cfg_.blocks_per_level));
      for (int b = 0; b < cfg_.blocks_per_level; ++b) {
        std::vector<float> next;
        res_fwd(enc_[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)],
                c.enc[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)],
                h, next, c.emb, nb, sl, dropout_p, rng);
        h = std::move(next);
      }
      c.skip[static_cast<std::size_t>(l)] = h;
      if (l + 1 < L) {
        const int so = sl / 2;
        std::vector<float> down(static_cast<std::size_t>(nb) * level_ch(l + 1) *
                                so * so);
        conv_fwd(down_[static_cast<std::size_t>(l)], params_.data(), h.data(),
                 down.data(), nb, sl);
        c.down_out[static_cast<std::size_t>(l)] = down;
        h = std::move(down);
        sl = so;
      }
    }

    {
      std::vector<float> next;
      res_fwd(mid_, c.mid, h, next, c.emb, nb, sl, dropout_p, rng);
      h = std::move(next);
    }

    c.up_out.assign(up_.size(), {});
    c.upconv_out.assign(up_.size(), {});
    c.fuse_in.assign(up_.size(), {});
    c.fuse_out.assign(up_.size(), {});
    c.dec.assign(up_.size(), {});
    for (int l = L - 2; l >= 0; --l) {
      const int so = sl * 2;
      const int ch_hi = level_ch(l + 1);
      const int ch_lo = level_ch(l);
      // nearest-neighbor upsample
      std::vector<float> up(static_cast<std::size_t>(nb) * ch_hi * so * so);
      for (int bi = 0; bi < nb; ++bi) {
        for (int ch = 0; ch < ch_hi; ++ch) {
          const float* ip =
              h.data() + (static_cast<std::size_t>(bi) * ch_hi + ch) * sl * sl;
          float* op = up.data() +
                      (static_cast<std::size_t>(bi) * ch_hi + ch) * so * so;
          for (int y = 0; y < so; ++y) {
            const float* irow = ip + static_cast<std::size_t>(y / 2) * sl;
            float* orow = op + static_cast<std::size_t>(y) * so;
            for (int x = 0; x < so; ++x) orow[x] = irow[x / 2];
          }
        }
      }
      c.up_out[static_cast<std::size_t>(l)] = up;

      std::vector<float> v(static_cast<std::size_t>(nb) * ch_lo * so * so);
      conv_fwd(up_[static_cast<std::size_t>(l)], params_.data(), up.data(),
               v.data(), nb, so);
      c.upconv_out[static_cast<std::size_t>(l)] = v;

      const std::size_t plane = static_cast<std::size_t>(so) * so;
      std::vector<float> cat(static_cast<std::size_t>(nb) * 2 * ch_lo * plane);
      const auto& skip = c.skip[static_cast<std::size_t>(l)];
      for (int bi = 0; bi < nb; ++bi) {
        float* dst = cat.data() + static_cast<std::size_t>(bi) * 2 * ch_lo * plane;
        const float* src_v =
            v.data() + static_cast<std::size_t>(bi) * ch_lo * plane;
        const float* src_s =
            skip.data() + static_cast<std::size_t>(bi) * ch_lo * plane;
        std::memcpy(dst, src_v, ch_lo * plane * sizeof(float));
        std::memcpy(dst + ch_lo * plane, src_s, ch_lo * plane * sizeof(float));
      }
      c.fuse_in[static_cast<std::size_t>(l)] = cat;

      std::vector<float> fused(static_cast<std::size_t>(nb) * ch_lo * plane);
      conv_fwd(fuse_[static_cast<std::size_t>(l)], params_.data(), cat.data(),
               fused.data(), nb, so);
      c.fuse_out[static_cast<std::size_t>(l)] = fused;
      h = std::move(fused);
      sl = so;

      c.dec[static_cast<std::size_t>(l)].resize(
          static_cast<std::size_t>(cfg_.blocks_per_level));
      for (int b = 0; b < cfg_.blocks_per_level; ++b) {
        std::vector<float> next;
        res_fwd(dec_[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)],
                c.dec[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)],
                h, next, c.emb, nb, sl, dropout_p, rng);
        h = std::move(next);
      }
    }

    c.pre_head = h;
    c.ah.resize(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) c.ah[i] = siluf(h[i]);
    conv_fwd(head_, params_.data(), c.ah.data(), out, nb, s);
  }

  NetConfig cfg_;
  std::size_t n_params_ = 0;
  std::vector<float> params_, grads_;

  LinDesc emb1_, emb2_;
  ConvDesc stem_;
  std::vector<std::vector<ResDesc>> enc_;
  std::vector<ConvDesc> down_;
  ResDesc mid_;
  std::vector<ConvDesc> up_, fuse_;
  std::vector<std::vector<ResDesc>> dec_;
  ConvDesc head_;

  UNetCache tc_;
};

void UNet::backward(const float* dout) {
  UNetCache& c = tc_;
  if (c.nb == 0) {
    throw Error(ErrorKind::Usage, "backward() without forward_train()");
  }
  const int nb = c.nb;
  const int s = c.s;
  const int L = cfg_.levels;

  std::vector<float> demb(static_cast<std::size_t>(nb) * cfg_.emb_dim, 0.0f);

  // head: out = conv(silu(pre_head))
  const std::size_t top_total = c.pre_head.size();
  std::vector<float> dah(top_total, 0.0f);
  {
    const std::size_t out_total = static_cast<std::size_t>(nb) * s * s;
    std::vector<float> dvec(dout, dout + out_total);
    conv_bwd_input(head_, params_.data(), dvec.data(), dah.data(), nb, s);
    conv_bwd_params(head_, grads_.data(), dvec.data(), c.ah.data(), nb, s);
  }
  std::vector<float> dh(top_total);
  for (std::size_t i = 0; i < top_total; ++i) {
    dh[i] = dah[i] * silu_gradf(c.pre_head[i]);
  }

  // decoder levels in reverse of the forward pass (l = 0 .. L-2)
  std::vector<std::vector<float>> dskip(static_cast<std::size_t>(L));
  int sl = s;
  for (int l = 0; l <= L - 2; ++l) {
    const int ch_lo = level_ch(l);
    const int ch_hi = level_ch(l + 1);
    for (int b = cfg_.blocks_per_level - 1; b >= 0; --b) {
      dh = res_bwd(dec_[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)],
                   c.dec[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)],
                   dh, demb, c.emb, nb, sl);
    }
    const std::size_t plane = static_cast<std::size_t>(sl) * sl;
    std::vector<float> dcat(static_cast<std::size_t>(nb) * 2 * ch_lo * plane,
                            0.0f);
    conv_bwd_input(fuse_[static_cast<std::size_t>(l)], params_.data(),
                   dh.data(), dcat.data(), nb, sl);
    conv_bwd_params(fuse_[static_cast<std::size_t>(l)], grads_.data(),
                    dh.data(), c.fuse_in[static_cast<std::size_t>(l)].data(),
                    nb, sl);

    std::vector<float> dv(static_cast<std::size_t>(nb) * ch_lo * plane);
    auto& ds = dskip[static_cast<std::size_t>(l)];
    ds.assign(static_cast<std::size_t>(nb) * ch_lo * plane, 0.0f);
    for (int bi = 0; bi < nb; ++bi) {
      const float* src =
          dcat.data() + static_cast<std::size_t>(bi) * 2 * ch_lo * plane;
      std::memcpy(dv.data() + static_cast<std::size_t>(bi) * ch_lo * plane, src,
                  ch_lo * plane * sizeof(float));
      std::memcpy(ds.data() + static_cast<std::size_t>(bi) * ch_lo * plane,
                  src + ch_lo * plane, ch_lo * plane * sizeof(float));
    }

    std::vector<float> dup(
        static_cast<std::size_t>(nb) * ch_hi * plane, 0.0f);
    conv_bwd_input(up_[static_cast<std::size_t>(l)], params_.data(), dv.data(),
                   dup.data(), nb, sl);
    conv_bwd_params(up_[static_cast<std::size_t>(l)], grads_.data(), dv.data(),
                    c.up_out[static_cast<std::size_t>(l)].data(), nb, sl);

    // upsample backward: sum the 2x2 fan-out
    const int so = sl / 2;
    std::vector<float> dprev(static_cast<std::size_t>(nb) * ch_hi * so * so,
                             0.0f);
    for (int bi = 0; bi < nb; ++bi) {
      for (int ch = 0; ch < ch_hi; ++ch) {
        const float* gp = dup.data() +
                          (static_cast<std::size_t>(bi) * ch_hi + ch) * sl * sl;
        float* pp = dprev.data() +
                    (static_cast<std::size_t>(bi) * ch_hi + ch) * so * so;
        for (int y = 0; y < sl; ++y) {
          const float* grow = gp + static_cast<std::size_t>(y) * sl;
          float* prow = pp + static_cast<std::size_t>(y / 2) * so;
          for (int x = 0; x < sl; ++x) prow[x / 2] += grow[x];
        }
      }
    }
    dh = std::move(dprev);
    sl = so;
  }

  // middle block
  dh = res_bwd(mid_, c.mid, dh, demb, c.emb, nb, sl);

  // encoder levels top-down (l = L-1 .. 0)
  for (int l = L - 1; l >= 0; --l) {
    if (l != L - 1) {
      // dh currently holds the gradient of down_[l]'s output
      const int si = sl * 2;
      std::vector<float> din(
          static_cast<std::size_t>(nb) * level_ch(l) * si * si, 0.0f);
      conv_bwd_input(down_[static_cast<std::size_t>(l)], params_.data(),
                     dh.data(), din.data(), nb, si);
      conv_bwd_params(down_[static_cast<std::size_t>(l)], grads_.data(),
                      dh.data(), c.skip[static_cast<std::size_t>(l)].data(), nb,
                      si);
      dh = std::move(din);
      sl = si;
      const auto& ds = dskip[static_cast<std::size_t>(l)];
      for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += ds[i];
    }
    for (int b = cfg_.blocks_per_level - 1; b >= 0; --b) {
      dh = res_bwd(enc_[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)],
                   c.enc[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)],
                   dh, demb, c.emb, nb, sl);
    }
  }

  // stem parameters (input gradient not needed)
  conv_bwd_params(stem_, grads_.data(), dh.data(), c.input.data(), nb, s);

  // embedding MLP
  std::vector<float> de1(static_cast<std::size_t>(nb) * cfg_.emb_dim, 0.0f);
  lin_bwd(emb2_, params_.data(), grads_.data(), demb.data(), c.e1.data(),
          de1.data(), nb);
  std::vector<float> de1_pre(de1.size());
  for (std::size_t i = 0; i < de1.size(); ++i) {
    de1_pre[i] = de1[i] * silu_gradf(c.e1_pre[i]);
  }
  lin_bwd(emb1_, params_.data(), grads_.data(), de1_pre.data(), c.fe.data(),
          nullptr, nb);
}

// ---- per-pixel toy network --------------------------------------------------

class TinyMlp final : public FreeFormNet {
 public:
  TinyMlp(int hidden, int in_channels, std::uint64_t init_seed)
      : hidden_(hidden), in_channels_(in_channels) {
    if (hidden < 1) throw Error(ErrorKind::Config, "tiny_mlp: hidden >= 1");
    if (in_channels < 1 || in_channels > 2) {
      throw Error(ErrorKind::Config, "tiny_mlp: in_channels must be 1 or 2");
    }
    params_.assign(static_cast<std::size_t>(5 * hidden + 1), 0.0f);
    grads_.assign(params_.size(), 0.0f);
    Rng rng(derive_seed(init_seed, "tiny-init"));
    for (auto& p : params_) p = static_cast<float>(rng.normal()) * 0.5f;
  }

  int in_channels() const override { return in_channels_; }
  std::size_t param_count() const override { return params_.size(); }
  std::vector<float>& params() override { return params_; }
  const std::vector<float>& params() const override { return params_; }
  std::vector<float>& grads() override { return grads_; }
  void zero_grads() override { std::fill(grads_.begin(), grads_.end(), 0.0f); }

  void infer(const float* in, const float* c_noise, int nb, int s,
             float* out) const override {
    forward_impl(in, c_noise, nb, s, out, nullptr);
  }

  void forward_train(const float* in, const float* c_noise, int nb, int s,
                     float* out, float /*dropout_p*/, Rng& /*rng*/) override {
    cache_in_.assign(in, in + static_cast<std::size_t>(nb) * in_channels_ * s * s);
    cache_cn_.assign(c_noise, c_noise + nb);
    nb_ = nb;
    s_ = s;
    forward_impl(in, c_noise, nb, s, out, nullptr);
  }

  void backward(const float* dout) override {
    // params: [wx wy wc b] per hidden unit, then wout per unit, then bout.
    const double* nothing = nullptr;
    (void)nothing;
    const std::size_t plane = static_cast<std::size_t>(s_) * s_;
    for (int bi = 0; bi < nb_; ++bi) {
      const float cn = cache_cn_[static_cast<std::size_t>(bi)];
      const float* x =
          cache_in_.data() + static_cast<std::size_t>(bi) * in_channels_ * plane;
      const float* y = in_channels_ == 2 ? x + plane : nullptr;
      const float* g = dout + static_cast<std::size_t>(bi) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double go = g[i];
        if (go == 0.0) continue;
        const double xv = x[i];
        const double yv = y ? y[i] : 0.0;
        for (int h = 0; h < hidden_; ++h) {
          const double pre = pre_act(h, xv, yv, cn);
          const double t = std::tanh(pre);
          const double dt = (1.0 - t * t) * params_[wout_off(h)] * go;
          grads_[wx_off(h)] += static_cast<float>(dt * xv);
          grads_[wy_off(h)] += static_cast<float>(dt * yv);
          grads_[wc_off(h)] += static_cast<float>(dt * cn);
          grads_[b_off(h)] += static_cast<float>(dt);
          grads_[wout_off(h)] += static_cast<float>(t * go);
        }
        grads_[bout_off()] += static_cast<float>(go);
      }
    }
  }

  std::string arch_json() const override {
    json j{{"type", "tiny_mlp"},
           {"hidden", hidden_},
           {"in_channels", in_channels_}};
    return j.dump();
  }

  std::unique_ptr<FreeFormNet> clone() const override {
    auto copy = std::make_unique<TinyMlp>(hidden_, in_channels_, 0);
    copy->params_ = params_;
    return copy;
  }

 private:
  std::size_t wx_off(int h) const { return static_cast<std::size_t>(4 * h); }
  std::size_t wy_off(int h) const { return static_cast<std::size_t>(4 * h + 1); }
  std::size_t wc_off(int h) const { return static_cast<std::size_t>(4 * h + 2); }
  std::size_t b_off(int h) const { return static_cast<std::size_t>(4 * h + 3); }
  std::size_t wout_off(int h) const {
    return static_cast<std::size_t>(4 * hidden_ + h);
  }
  std::size_t bout_off() const { return static_cast<std::size_t>(5 * hidden_); }

  double pre_act(int h, double x, double y, double c) const {
    return params_[wx_off(h)] * x + params_[wy_off(h)] * y +
           params_[wc_off(h)] * c + params_[b_off(h)];
  }

  void forward_impl(const float* in, const float* c_noise, int nb, int s,
                    float* out, void*) const {
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    for (int bi = 0; bi < nb; ++bi) {
      const float cn = c_noise[bi];
      const float* x = in + static_cast<std::size_t>(bi) * in_channels_ * plane;
      const float* y = in_channels_ == 2 ? x + plane : nullptr;
      float* o = out + static_cast<std::size_t>(bi) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        double acc = params_[bout_off()];
        const double xv = x[i];
        const double yv = y ? y[i] : 0.0;
        for (int h = 0; h < hidden_; ++h) {
          acc += params_[wout_off(h)] * std::tanh(pre_act(h, xv, yv, cn));
        }
        o[i] = static_cast<float>(acc);
      }
    }
  }

  int hidden_;
  int in_channels_;
  std::vector<float> params_, grads_;

  std::vector<float> cache_in_, cache_cn_;
  int nb_ = 0, s_ = 0;
};

}  // namespace

std::unique_ptr<FreeFormNet> make_unet(const NetConfig& cfg,
                                       std::uint64_t init_seed) {
  return std::make_unique<UNet>(cfg, init_seed);
}

std::unique_ptr<FreeFormNet> make_tiny_mlp(int hidden, int in_channels,
                                           std::uint64_t init_seed) {
  return std::make_unique<TinyMlp>(hidden, in_channels, init_seed);
}

std::unique_ptr<FreeFormNet> net_from_arch_json(const std::string& arch,
                                                std::uint64_t init_seed) {
  json j;
  try {
    j = json::parse(arch);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, std::string("bad arch descriptor: ") + e.what());
  }
  const std::string type = j.at("type").get<std::string>();
  if (type == "unet") {
    NetConfig cfg;
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.base_width = j.at("base_width").get<int>();
    cfg.levels = j.at("levels").get<int>();
    cfg.blocks_per_level = j.at("blocks_per_level").get<int>();
    cfg.emb_dim = j.at("emb_dim").get<int>();
    return make_unet(cfg, init_seed);
  }
  if (type == "tiny_mlp") {
    return make_tiny_mlp(j.at("hidden").get<int>(),
                         j.at("in_channels").get<int>(), init_seed);
  }
  throw Error(ErrorKind::Config, "unknown network type '" + type + "'");
}

}  // namespace pfcm
