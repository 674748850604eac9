#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pfcm/config.hpp"
#include "pfcm/rng.hpp"

namespace pfcm {

// Free-form network F behind the boundary-condition wrapper. Inputs arrive
// pre-assembled as [nb, in_channels, s, s] (scaled perturbed state plus the
// condition channel) together with one c_noise scalar per batch element; the
// output is [nb, 1, s, s].
//
// infer() is const and reentrant: concurrent inference on shared weights is
// safe. forward_train() caches activations on the object for the following
// backward() and is single-writer.
class FreeFormNet {
 public:
  virtual ~FreeFormNet() = default;

  virtual int in_channels() const = 0;
  virtual std::size_t param_count() const = 0;
  virtual std::vector<float>& params() = 0;
  virtual const std::vector<float>& params() const = 0;
  virtual std::vector<float>& grads() = 0;
  virtual void zero_grads() = 0;

  virtual void infer(const float* in, const float* c_noise, int nb, int s,
                     float* out) const = 0;
  virtual void forward_train(const float* in, const float* c_noise, int nb,
                             int s, float* out, float dropout_p, Rng& rng) = 0;
  // Accumulates parameter gradients for the last forward_train call.
  virtual void backward(const float* dout) = 0;

  virtual std::string arch_json() const = 0;
  virtual std::unique_ptr<FreeFormNet> clone() const = 0;
};

// Small conv encoder/decoder with additive noise-level conditioning per
// block and a skip connection per resolution.
std::unique_ptr<FreeFormNet> make_unet(const NetConfig& cfg,
                                       std::uint64_t init_seed);

// Per-pixel toy network (5*hidden + 1 parameters); used by the
// finite-difference gradient checks.
std::unique_ptr<FreeFormNet> make_tiny_mlp(int hidden, int in_channels,
                                           std::uint64_t init_seed);

// Rebuilds a network from its arch_json() descriptor (weights unset).
std::unique_ptr<FreeFormNet> net_from_arch_json(const std::string& arch,
                                                std::uint64_t init_seed);

}  // namespace pfcm
