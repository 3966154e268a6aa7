#include "pointlama/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace pointlama {

void DiffusionSchedule::check_step(std::size_t t) const {
  if (t < 1 || t > T)
    throw std::out_of_range("diffusion timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(T) + "]");
}

DiffusionSchedule build_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T == 0) throw std::invalid_argument("build_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
  DiffusionSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.sigma.assign(T + 1, 0.0);
  for (std::size_t t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.beta[t] = beta_start + frac * (beta_end - beta_start);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  return s;
}

DenseArray q_sample(const DenseArray& z0, std::size_t t, const DenseArray& eps,
                    const DiffusionSchedule& s) {
  s.check_step(t);
  if (z0.shape() != eps.shape())
    throw ShapeError("q_sample: z0 " + to_string(z0.shape()) + " vs eps " + to_string(eps.shape()));
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  DenseArray out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

DenseArray q_sample(const DenseArray& z0, const std::vector<std::size_t>& ts, const DenseArray& eps,
                    const DiffusionSchedule& s) {
  if (z0.shape() != eps.shape())
    throw ShapeError("q_sample: z0 " + to_string(z0.shape()) + " vs eps " + to_string(eps.shape()));
  if (ts.size() != z0.dim(0)) throw ShapeError("q_sample: need one timestep per sequence");
  const std::size_t per = z0.size() / ts.size();
  DenseArray out(z0.shape());
  for (std::size_t b = 0; b < ts.size(); ++b) {
    s.check_step(ts[b]);
    const double a = std::sqrt(s.alpha_bar[ts[b]]), c = std::sqrt(1.0 - s.alpha_bar[ts[b]]);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = a * z0[i] + c * eps[i];
  }
  return out;
}

DenseArray p_sample_step(const DenseArray& z_t, std::size_t t, const DenseArray& eps_hat,
                         const DiffusionSchedule& s, const DenseArray& noise) {
  s.check_step(t);
  if (eps_hat.shape() != z_t.shape()) throw ShapeError("p_sample_step: eps_hat shape mismatch");
  const bool noisy = t > 1 && !noise.empty();
  if (noisy && noise.shape() != z_t.shape()) throw ShapeError("p_sample_step: noise shape mismatch");
  const double beta = s.beta[t];
  const double coef = beta / std::sqrt(1.0 - s.alpha_bar[t]);
  const double inv = 1.0 / std::sqrt(1.0 - beta);
  DenseArray out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (z_t[i] - coef * eps_hat[i]) * inv;
    if (noisy) out[i] += s.sigma[t] * noise[i];
  }
  return out;
}

DenseArray reverse_chain(const DenseArray& z_T, const DiffusionSchedule& s,
                         const NoisePredictor& predict, const NoiseSource& noise) {
  DenseArray z = z_T;
  for (std::size_t t = s.T; t >= 1; --t) {
    const DenseArray eps_hat = predict(z, t);
    z = p_sample_step(z, t, eps_hat, s, noise && t > 1 ? noise(t) : DenseArray{});
  }
  return z;
}

DenseArray timestep_embedding(const std::vector<std::size_t>& ts, std::size_t width) {
  if (width < 2 || width % 2) throw std::invalid_argument("timestep_embedding: width must be even");
  const std::size_t half = width / 2;
  DenseArray out({ts.size(), width});
  for (std::size_t b = 0; b < ts.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(ts[b]) * freq;
      out[b * width + i] = std::sin(arg);
      out[b * width + half + i] = std::cos(arg);
    }
  return out;
}

Denoiser::Denoiser(ParamStore& store, const std::string& prefix, const DenoiserConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  const std::size_t D = cfg.d_model;
  if (cfg.mamba.d_model != D) throw std::invalid_argument("Denoiser: mamba width must equal d_model");
  t_w1_ = store.add_uniform(prefix + ".time_embed.fc1.weight", {D, D}, D, rng);
  t_b1_ = store.add(prefix + ".time_embed.fc1.bias", DenseArray({D}, 0.0));
  t_w2_ = store.add_uniform(prefix + ".time_embed.fc2.weight", {D, D}, D, rng);
  t_b2_ = store.add(prefix + ".time_embed.fc2.bias", DenseArray({D}, 0.0));
  pos_w1_ = store.add_uniform(prefix + ".pos_embed.fc1.weight", {3, cfg.pos_hidden}, 3, rng);
  pos_b1_ = store.add(prefix + ".pos_embed.fc1.bias", DenseArray({cfg.pos_hidden}, 0.0));
  pos_w2_ = store.add_uniform(prefix + ".pos_embed.fc2.weight", {cfg.pos_hidden, D}, cfg.pos_hidden, rng);
  pos_b2_ = store.add(prefix + ".pos_embed.fc2.bias", DenseArray({D}, 0.0));
  slot_embed_ = store.add(prefix + ".slot_embed", rng.normal_array({2, D}, 0.02));
  blocks_.reserve(cfg.blocks);
  for (std::size_t i = 0; i < cfg.blocks; ++i)
    blocks_.emplace_back(store, prefix + ".blocks." + std::to_string(i), cfg.mamba, rng);
  norm_g_ = store.add(prefix + ".norm.gamma", DenseArray({D}, 1.0));
  norm_b_ = store.add(prefix + ".norm.beta", DenseArray({D}, 0.0));
  out_w_ = store.add_uniform(prefix + ".head.weight", {D, D}, D, rng);
  out_b_ = store.add(prefix + ".head.bias", DenseArray({D}, 0.0));
}

Value Denoiser::predict(const Value& z_t, const std::vector<std::size_t>& ts, const Value& z_cond,
                        const MaskRecord& mask, const DenseArray& centers) const {
  const std::size_t B = mask.batch, T = mask.length, Tm = mask.masked_count(), Tv = mask.visible_count();
  const std::size_t D = cfg_.d_model;
  if (Tm == 0) throw std::invalid_argument("Denoiser: no masked slots to predict");
  if (z_t.shape() != Shape{B, Tm, D})
    throw ShapeError("Denoiser: z_t " + to_string(z_t.shape()) + ", expected " + to_string(Shape{B, Tm, D}));
  if (z_cond.shape() != Shape{B, Tv, D})
    throw ShapeError("Denoiser: z_cond " + to_string(z_cond.shape()) + ", expected " +
                     to_string(Shape{B, Tv, D}));
  if (centers.shape() != Shape{B, T, 3}) throw ShapeError("Denoiser: centers must be [B, T, 3]");
  if (ts.size() != B) throw ShapeError("Denoiser: need one timestep per sequence");

  // Slot p of the full sequence reads row `rows[p]` of concat(z_cond, z_t).
  std::vector<std::size_t> rows(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < Tv; ++i) rows[b * T + mask.visible_rows[b * Tv + i]] = i;
    for (std::size_t i = 0; i < Tm; ++i) rows[b * T + mask.masked_rows[b * Tm + i]] = Tv + i;
  }
  Value x = gather_rows(concat({z_cond, z_t}, 1), rows, T);
  std::vector<std::size_t> role(B * T, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < Tm; ++i) role[b * T + mask.masked_rows[b * Tm + i]] = 1;
  x = add(x, embedding(slot_embed_, role, {B, T}));
  Value pos = linear(gelu(linear(Value::constant(centers), pos_w1_, pos_b1_)), pos_w2_, pos_b2_);
  Value temb = linear(silu(linear(Value::constant(timestep_embedding(ts, D)), t_w1_, t_b1_)), t_w2_, t_b2_);
  x = add(add(x, pos), expand_dim(reshape(temb, {B, 1, D}), 1, T));
  for (const auto& blk : blocks_) x = blk.forward(x);
  Value out = linear(layer_norm(x, norm_g_, norm_b_), out_w_, out_b_);
  return gather_rows(out, mask.masked_rows, Tm);
}

Value diffusion_loss(const Value& eps_hat, const DenseArray& eps) {
  if (eps_hat.shape() != eps.shape())
    throw ShapeError("diffusion_loss: eps_hat " + to_string(eps_hat.shape()) + " vs eps " +
                     to_string(eps.shape()));
  return mse(eps_hat, Value::constant(eps));
}

}  // namespace pointlama
