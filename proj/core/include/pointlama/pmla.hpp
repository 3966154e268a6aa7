#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pointlama/ops.hpp"
#include "pointlama/param_store.hpp"
#include "pointlama/rng.hpp"

namespace pointlama {

/// Split [B, T, H*d] into heads: [B, H, T, d].
Value split_heads(const Value& x, std::size_t heads);
/// Inverse of split_heads.
Value merge_heads(const Value& x);

/// softmax(Q K^T * factor) for [B, H, T, d] operands -> [B, H, T, T].
Value attention_weights(const Value& q, const Value& k, double factor);

struct MLAConfig {
  std::size_t d_model = 384;
  std::size_t latent = 48;
  std::size_t heads = 6;
  std::size_t head_dim = 64;
};

/// Reference multi-head latent attention with low-rank keys and values:
/// Q = X W_Q, K = X W_K^a W_K^b, V = X W_V^a W_V^b,
/// O = sum_i softmax(Q_i K_i^T / sqrt(d_h)) V_i W_O,i.
class MultiHeadLatentAttention {
 public:
  MultiHeadLatentAttention(ParamStore& store, const std::string& prefix, const MLAConfig& cfg,
                           Rng& rng);
  Value forward(const Value& x) const;

  const MLAConfig& config() const { return cfg_; }
  Value w_q, w_ka, w_kb, w_va, w_vb, w_o;  // w_o stacks W_O,i as [H*d_h, D]

 private:
  MLAConfig cfg_;
};

struct PMLAConfig {
  std::size_t d_model = 384;
  std::size_t latent = 48;
  std::size_t heads = 6;
  std::size_t head_dim = 64;
  std::size_t q_kernel = 3;
};

/// Point-wise multi-head latent attention.
///
/// Queries come from a same-padded temporal convolution over the serialized
/// sequence. Keys and values are projected to the latent width and gated there,
///   K' = MLP_K(x) * sigmoid(W_K x),   V' = MLP_V(x) * sigmoid(W_V x),
/// then lifted to heads*head_dim by bias-free up-projections. Each head uses
/// softmax(Q K^T / sqrt(head_dim)) V, and heads are concatenated and projected.
class PMLA {
 public:
  PMLA(ParamStore& store, const std::string& prefix, const PMLAConfig& cfg, Rng& rng);

  struct Trace {
    Value q;         // [B, T, H*d]
    Value gate_k;    // sigmoid(W_K x), [B, T, r]
    Value gate_v;
    Value k_latent;  // K', [B, T, r]
    Value v_latent;
    Value attn;      // [B, H, T, T]
    Value output;    // [B, T, D]
  };

  Value forward(const Value& x) const { return run(x, true).output; }
  /// `gated = false` skips the sigmoid gates (K' = MLP_K(x)).
  Trace run(const Value& x, bool gated = true) const;

  const PMLAConfig& config() const { return cfg_; }

  Value q_w, q_b;
  Value mlp_k_w, mlp_k_b, mlp_v_w, mlp_v_b;
  Value gate_k_w, gate_k_b, gate_v_w, gate_v_b;
  Value up_k, up_v;
  Value out_w, out_b;

 private:
  PMLAConfig cfg_;
};

/// x + PMLA(LN(x)), then + FFN(LN(.)) with a GELU feed-forward of width ffn_hidden.
class LatentAttentionBlock {
 public:
  LatentAttentionBlock(ParamStore& store, const std::string& prefix, const PMLAConfig& cfg,
                       std::size_t ffn_hidden, Rng& rng);

  Value forward(const Value& x) const;
  /// LN1 applied to x, i.e. the PMLA input.
  Value pmla_input(const Value& x) const;

  const PMLA& pmla() const { return pmla_; }

 private:
  Value ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  PMLA pmla_;
  Value ff1_w_, ff1_b_, ff2_w_, ff2_b_;
};

/// Diagnostic comparing the PMLA output with a gated sample of the preceding
/// state-space readout: approx_t = mean_j sigmoid(W_K x_t)_j * ssm_t.
struct GateStateReport {
  std::size_t positions = 0;
  std::vector<double> channel_correlation;  // Pearson, per model channel
  double mean_correlation = 0.0;
  double mean_abs_correlation = 0.0;
  double mean_gate = 0.0;
};

/// `pmla_in` is the block's normalised input [B, T, D]; `ssm_readout` the
/// state-space contribution arriving at the block [B, T, D].
GateStateReport gate_state_probe(const PMLA& pmla, const Value& pmla_in,
                                 const DenseArray& ssm_readout);

std::string to_json(const GateStateReport& report);

}  // namespace pointlama
