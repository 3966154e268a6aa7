#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pointlama/mamba.hpp"
#include "pointlama/serialization.hpp"

namespace pointlama {

/// Linear-beta DDPM schedule. Tables are indexed by t in [0, T]; entry 0 holds
/// beta = 0 and alpha_bar = 1.
struct DiffusionSchedule {
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  void check_step(std::size_t t) const;
};

DiffusionSchedule build_schedule(std::size_t T, double beta_start, double beta_end);

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, elementwise.
DenseArray q_sample(const DenseArray& z0, std::size_t t, const DenseArray& eps,
                    const DiffusionSchedule& s);
/// Per-sequence timesteps: z0, eps are [B, ...] and ts has B entries.
DenseArray q_sample(const DenseArray& z0, const std::vector<std::size_t>& ts, const DenseArray& eps,
                    const DiffusionSchedule& s);

/// One reverse step with the DDPM posterior mean
///   mu = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t)
/// plus sigma_t * noise. Noise is ignored at t = 1.
DenseArray p_sample_step(const DenseArray& z_t, std::size_t t, const DenseArray& eps_hat,
                         const DiffusionSchedule& s, const DenseArray& noise);

using NoisePredictor = std::function<DenseArray(const DenseArray& z_t, std::size_t t)>;
using NoiseSource = std::function<DenseArray(std::size_t t)>;

/// Runs t = T..1 from z_T. `noise` may be empty, meaning zero noise.
DenseArray reverse_chain(const DenseArray& z_T, const DiffusionSchedule& s,
                         const NoisePredictor& predict, const NoiseSource& noise = {});

/// [B] timesteps -> [B, width] sin/cos features at geometric frequencies.
DenseArray timestep_embedding(const std::vector<std::size_t>& ts, std::size_t width);

struct DenoiserConfig {
  std::size_t d_model = 384;
  std::size_t blocks = 2;
  std::size_t pos_hidden = 128;
  MambaConfig mamba{};
};

/// Noise predictor over the full serialized sequence: visible slots carry the
/// encoder's condition tokens, masked slots the noisy targets. A learned
/// per-role vector marks which is which.
class Denoiser {
 public:
  Denoiser(ParamStore& store, const std::string& prefix, const DenoiserConfig& cfg, Rng& rng);

  /// z_t [B, Tm, D] at masked slots, z_cond [B, Tv, D], centers [B, T, 3] of
  /// the full sequence, one timestep per sequence -> eps_hat [B, Tm, D].
  Value predict(const Value& z_t, const std::vector<std::size_t>& ts, const Value& z_cond,
                const MaskRecord& mask, const DenseArray& centers) const;

  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  Value t_w1_, t_b1_, t_w2_, t_b2_;
  Value pos_w1_, pos_b1_, pos_w2_, pos_b2_;
  Value slot_embed_;  // [2, D]: visible, masked
  std::vector<MambaBlock> blocks_;
  Value norm_g_, norm_b_;
  Value out_w_, out_b_;
};

/// Mean of (eps - eps_hat)^2 over batch, masked slots and features.
Value diffusion_loss(const Value& eps_hat, const DenseArray& eps);

}  // namespace pointlama
