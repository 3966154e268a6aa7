#include "pointlama/optim.hpp"

#include <cmath>
#include <numbers>

namespace pointlama {

void AdamW::add(const Value& param, double lr_scale) {
  slots_.push_back({param, lr_scale, std::vector<double>(param.size(), 0.0), std::vector<double>(param.size(), 0.0)});
}

void AdamW::add_store(const ParamStore& store, const std::string& scaled_prefix, double scale) {
  for (const auto& e : store.entries()) {
    const bool scaled = !scaled_prefix.empty() && e.name.rfind(scaled_prefix, 0) == 0;
    add(e.value, scaled ? scale : 1.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad() || s.lr_scale == 0.0) continue;
    const double a = lr * s.lr_scale;
    const double decay = s.param.rank() >= 2 ? cfg_.weight_decay : 0.0;
    const DenseArray& g = s.param.node()->grad;
    auto w = s.param.mutable_value().data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.m[i] = cfg_.beta1 * s.m[i] + (1 - cfg_.beta1) * g[i];
      s.v[i] = cfg_.beta2 * s.v[i] + (1 - cfg_.beta2) * g[i] * g[i];
      w[i] -= a * decay * w[i];
      w[i] -= a * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + cfg_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

double AdamW::grad_norm() const {
  double sq = 0.0;
  for (const auto& s : slots_)
    if (s.param.has_grad())
      for (double g : s.param.node()->grad.data()) sq += g * g;
  return std::sqrt(sq);
}

void AdamW::clip_grad_norm(double max_norm) {
  const double n = grad_norm();
  if (!(n > max_norm) || max_norm <= 0) return;
  const double c = max_norm / n;
  for (auto& s : slots_)
    if (s.param.has_grad())
      for (double& g : s.param.node()->grad.data()) g *= c;
}

double warmup_cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double base,
                        double min_ratio) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(std::max<std::size_t>(1, total - warmup)));
  const double lo = base * min_ratio;
  return lo + 0.5 * (base - lo) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace pointlama
