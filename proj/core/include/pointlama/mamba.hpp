#pragma once

#include <cstddef>
#include <string>

#include "pointlama/ops.hpp"
#include "pointlama/param_store.hpp"
#include "pointlama/rng.hpp"

namespace pointlama {

/// Zero-order-hold discretisation of one diagonal state entry.
struct Discretized {
  double a_bar;  // exp(delta * A)
  double b_bar;  // (exp(delta * A) - 1) / A * B
};
Discretized discretize(double A, double B, double delta);

/// Element of the linear-recurrence semigroup h -> a * h + b.
struct ScanElement {
  double a = 1.0;
  double b = 0.0;
};

/// Applies `first`, then `second`: (a, b) o (a', b') = (a a', a' b + b').
constexpr ScanElement combine(ScanElement first, ScanElement second) {
  return {first.a * second.a, second.a * first.b + second.b};
}

/// Dense inputs of the selective scan.
///   x, delta: [B, T, C]; A: [C, N] (negative); Bm, Cm: [B, T, N]; D: [C].
struct ScanInputs {
  DenseArray x, delta, A, Bm, Cm, D;
};

enum class ScanMode { sequential, parallel };

/// h_0 = 0, h_t = Abar_t h_{t-1} + Bbar_t x_t, y_t = C_t . h_t + D x_t.
DenseArray selective_scan_sequential(const ScanInputs& in);
/// Same recurrence evaluated with a work-efficient up-sweep/down-sweep scan
/// over a fixed power-of-two tree, so results are reproducible run to run.
DenseArray selective_scan_parallel(const ScanInputs& in);

/// Inclusive scan of `elems` under combine(), in place, via the tree above.
void associative_scan_inclusive(std::vector<ScanElement>& elems);

/// Differentiable selective scan. Gradients flow into every input.
Value selective_scan(const Value& x, const Value& delta, const Value& A, const Value& Bm,
                     const Value& Cm, const Value& D, ScanMode mode = ScanMode::sequential);

struct MambaConfig {
  std::size_t d_model = 384;
  std::size_t d_state = 16;
  std::size_t expand = 2;
  std::size_t conv_kernel = 4;
  std::size_t dt_rank = 0;  // 0 selects ceil(d_model / 16)
  double dt_min = 1e-3;
  double dt_max = 0.1;
  ScanMode scan = ScanMode::sequential;

  std::size_t inner() const { return expand * d_model; }
  std::size_t rank_dt() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
};

/// Pre-norm residual Mamba block:
///   LN -> in-proj (signal, gate) -> causal depthwise conv + SiLU -> selective
///   scan -> multiply by SiLU(gate) -> out-proj -> + residual.
class MambaBlock {
 public:
  MambaBlock(ParamStore& store, const std::string& prefix, const MambaConfig& cfg, Rng& rng);

  Value forward(const Value& x) const;
  /// The residual branch alone (output minus input).
  Value branch(const Value& x) const;

  const MambaConfig& config() const { return cfg_; }

 private:
  MambaConfig cfg_;
  Value norm_g_, norm_b_;
  Value in_proj_;
  Value conv_w_, conv_b_;
  Value x_proj_;
  Value dt_w_, dt_b_;
  Value a_log_, d_;
  Value out_proj_;
};

}  // namespace pointlama
