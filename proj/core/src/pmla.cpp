#include "pointlama/pmla.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

namespace pointlama {

Value split_heads(const Value& x, std::size_t heads) {
  const std::size_t B = x.dim(0), T = x.dim(1), W = x.dim(2);
  if (W % heads != 0)
    throw ShapeError("split_heads: width " + std::to_string(W) + " not divisible by " +
                     std::to_string(heads) + " heads");
  return permute(reshape(x, {B, T, heads, W / heads}), {0, 2, 1, 3});
}

Value merge_heads(const Value& x) {
  const std::size_t B = x.dim(0), H = x.dim(1), T = x.dim(2), d = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {B, T, H * d});
}

Value attention_weights(const Value& q, const Value& k, double factor) {
  return softmax_lastdim(scale(matmul(q, permute(k, {0, 1, 3, 2})), factor));
}

MultiHeadLatentAttention::MultiHeadLatentAttention(ParamStore& store, const std::string& prefix,
                                                   const MLAConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  const std::size_t D = cfg.d_model, r = cfg.latent, W = cfg.heads * cfg.head_dim;
  w_q = store.add_uniform(prefix + ".w_q", {D, W}, D, rng);
  w_ka = store.add_uniform(prefix + ".w_k_a", {D, r}, D, rng);
  w_kb = store.add_uniform(prefix + ".w_k_b", {r, W}, r, rng);
  w_va = store.add_uniform(prefix + ".w_v_a", {D, r}, D, rng);
  w_vb = store.add_uniform(prefix + ".w_v_b", {r, W}, r, rng);
  w_o = store.add_uniform(prefix + ".w_o", {W, D}, W, rng);
}

Value MultiHeadLatentAttention::forward(const Value& x) const {
  const std::size_t H = cfg_.heads;
  Value q = split_heads(matmul(x, w_q), H);
  Value k = split_heads(matmul(matmul(x, w_ka), w_kb), H);
  Value v = split_heads(matmul(matmul(x, w_va), w_vb), H);
  Value attn = attention_weights(q, k, 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim)));
  return matmul(merge_heads(matmul(attn, v)), w_o);
}

PMLA::PMLA(ParamStore& store, const std::string& prefix, const PMLAConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  const std::size_t D = cfg.d_model, r = cfg.latent, W = cfg.heads * cfg.head_dim;
  q_w = store.add_uniform(prefix + ".q_conv.weight", {cfg.q_kernel, D, W}, cfg.q_kernel * D, rng);
  q_b = store.add(prefix + ".q_conv.bias", DenseArray({W}, 0.0));
  mlp_k_w = store.add_uniform(prefix + ".mlp_k.weight", {D, r}, D, rng);
  mlp_k_b = store.add(prefix + ".mlp_k.bias", DenseArray({r}, 0.0));
  mlp_v_w = store.add_uniform(prefix + ".mlp_v.weight", {D, r}, D, rng);
  mlp_v_b = store.add(prefix + ".mlp_v.bias", DenseArray({r}, 0.0));
  gate_k_w = store.add_uniform(prefix + ".gate_k.weight", {D, r}, D, rng);
  gate_k_b = store.add(prefix + ".gate_k.bias", DenseArray({r}, 0.0));
  gate_v_w = store.add_uniform(prefix + ".gate_v.weight", {D, r}, D, rng);
  gate_v_b = store.add(prefix + ".gate_v.bias", DenseArray({r}, 0.0));
  up_k = store.add_uniform(prefix + ".up_k.weight", {r, W}, r, rng);
  up_v = store.add_uniform(prefix + ".up_v.weight", {r, W}, r, rng);
  out_w = store.add_uniform(prefix + ".out_proj.weight", {W, D}, W, rng);
  out_b = store.add(prefix + ".out_proj.bias", DenseArray({D}, 0.0));
}

PMLA::Trace PMLA::run(const Value& x, bool gated) const {
  Trace tr;
  tr.q = conv1d(x, q_w, q_b, Padding::same);
  Value mk = linear(x, mlp_k_w, mlp_k_b);
  Value mv = linear(x, mlp_v_w, mlp_v_b);
  tr.gate_k = sigmoid(linear(x, gate_k_w, gate_k_b));
  tr.gate_v = sigmoid(linear(x, gate_v_w, gate_v_b));
  tr.k_latent = gated ? mul(mk, tr.gate_k) : mk;
  tr.v_latent = gated ? mul(mv, tr.gate_v) : mv;
  const std::size_t H = cfg_.heads;
  Value q = split_heads(tr.q, H);
  Value k = split_heads(matmul(tr.k_latent, up_k), H);
  Value v = split_heads(matmul(tr.v_latent, up_v), H);
  tr.attn = attention_weights(q, k, 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim)));
  tr.output = linear(merge_heads(matmul(tr.attn, v)), out_w, out_b);
  return tr;
}

LatentAttentionBlock::LatentAttentionBlock(ParamStore& store, const std::string& prefix,
                                           const PMLAConfig& cfg, std::size_t ffn_hidden, Rng& rng)
    : ln1_g_(store.add(prefix + ".norm1.gamma", DenseArray({cfg.d_model}, 1.0))),
      ln1_b_(store.add(prefix + ".norm1.beta", DenseArray({cfg.d_model}, 0.0))),
      ln2_g_(store.add(prefix + ".norm2.gamma", DenseArray({cfg.d_model}, 1.0))),
      ln2_b_(store.add(prefix + ".norm2.beta", DenseArray({cfg.d_model}, 0.0))),
      pmla_(store, prefix + ".pmla", cfg, rng) {
  const std::size_t D = cfg.d_model;
  ff1_w_ = store.add_uniform(prefix + ".ffn.fc1.weight", {D, ffn_hidden}, D, rng);
  ff1_b_ = store.add(prefix + ".ffn.fc1.bias", DenseArray({ffn_hidden}, 0.0));
  ff2_w_ = store.add_uniform(prefix + ".ffn.fc2.weight", {ffn_hidden, D}, ffn_hidden, rng);
  ff2_b_ = store.add(prefix + ".ffn.fc2.bias", DenseArray({D}, 0.0));
}

Value LatentAttentionBlock::pmla_input(const Value& x) const { return layer_norm(x, ln1_g_, ln1_b_); }

Value LatentAttentionBlock::forward(const Value& x) const {
  Value y = add(x, pmla_.forward(pmla_input(x)));
  Value h = gelu(linear(layer_norm(y, ln2_g_, ln2_b_), ff1_w_, ff1_b_));
  return add(y, linear(h, ff2_w_, ff2_b_));
}

GateStateReport gate_state_probe(const PMLA& pmla, const Value& pmla_in,
                                 const DenseArray& ssm_readout) {
  const auto tr = pmla.run(detach(pmla_in));
  const DenseArray& out = tr.output.value();
  const DenseArray& gate = tr.gate_k.value();
  if (ssm_readout.shape() != out.shape())
    throw ShapeError("gate_state_probe: readout shape " + to_string(ssm_readout.shape()) +
                     " != PMLA output shape " + to_string(out.shape()));
  const std::size_t D = out.dim(2), rows = out.size() / D, r = gate.dim(2);

  GateStateReport rep;
  rep.positions = rows;
  std::vector<double> approx(out.size());
  double gate_sum = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double g = 0.0;
    for (std::size_t j = 0; j < r; ++j) g += gate[i * r + j];
    g /= static_cast<double>(r);
    gate_sum += g;
    for (std::size_t c = 0; c < D; ++c) approx[i * D + c] = g * ssm_readout[i * D + c];
  }
  rep.mean_gate = gate_sum / static_cast<double>(rows);

  rep.channel_correlation.assign(D, 0.0);
  for (std::size_t c = 0; c < D; ++c) {
    double ma = 0.0, mo = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      ma += approx[i * D + c];
      mo += out[i * D + c];
    }
    ma /= static_cast<double>(rows);
    mo /= static_cast<double>(rows);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double a = approx[i * D + c] - ma, o = out[i * D + c] - mo;
      sab += a * o;
      saa += a * a;
      sbb += o * o;
    }
    // Degenerate (constant) channels report zero correlation.
    double corr = 0.0;
    if (saa > 1e-300 && sbb > 1e-300) corr = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
    rep.channel_correlation[c] = corr;
    rep.mean_correlation += corr;
    rep.mean_abs_correlation += std::abs(corr);
  }
  rep.mean_correlation /= static_cast<double>(D);
  rep.mean_abs_correlation /= static_cast<double>(D);
  return rep;
}

std::string to_json(const GateStateReport& report) {
  nlohmann::json j;
  j["positions"] = report.positions;
  j["mean_gate"] = report.mean_gate;
  j["mean_correlation"] = report.mean_correlation;
  j["mean_abs_correlation"] = report.mean_abs_correlation;
  j["channel_correlation"] = report.channel_correlation;
  return j.dump();
}

}  // namespace pointlama
