#pragma once

#include <string>
#include <vector>

#include "pointlama/param_store.hpp"

namespace pointlama {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Adam with decoupled weight decay. Each parameter carries an lr multiplier;
/// decay applies to weights of rank >= 2 only.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void add(const Value& param, double lr_scale = 1.0);
  /// Registers every entry of `store`; names starting with `scaled_prefix` get
  /// `scale`, the rest 1.
  void add_store(const ParamStore& store, const std::string& scaled_prefix = "", double scale = 1.0);

  /// One update with base learning rate `lr`. Parameters without a gradient
  /// are skipped.
  void step(double lr);
  void zero_grad();
  /// Global L2 norm of all gradients.
  double grad_norm() const;
  /// Rescales gradients so the global norm is at most `max_norm`.
  void clip_grad_norm(double max_norm);

  std::size_t steps() const { return t_; }

 private:
  struct Slot {
    Value param;
    double lr_scale;
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

/// Linear warmup to `base` over `warmup` steps, then cosine decay to
/// base * min_ratio at `total`. `step` counts from 0.
double warmup_cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double base,
                        double min_ratio);

}  // namespace pointlama
