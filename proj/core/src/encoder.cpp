#include "pointlama/encoder.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace pointlama {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("encoder config: " + msg); };
  if (depth == 0) fail("depth must be >= 1");
  for (auto p : pmla_positions)
    if (p >= depth)
      fail("pmla position " + std::to_string(p) + " outside [0, " + std::to_string(depth) + ")");
  if (d_model == 0 || latent == 0 || heads == 0 || head_dim == 0 || d_state == 0 || expand == 0 ||
      conv_kernel == 0 || ffn_hidden == 0 || pos_hidden == 0)
    fail("all widths must be positive");
  if (patch.out != d_model)
    fail("patch embedding width " + std::to_string(patch.out) + " != d_model " + std::to_string(d_model));
}

MambaConfig EncoderConfig::mamba() const {
  MambaConfig m;
  m.d_model = d_model;
  m.d_state = d_state;
  m.expand = expand;
  m.conv_kernel = conv_kernel;
  m.scan = scan;
  return m;
}

PMLAConfig EncoderConfig::pmla() const { return {d_model, latent, heads, head_dim, 3}; }

std::size_t pmla_placement_index(const std::string& placement, std::size_t depth) {
  // Fixed indices of a 12-layer stack, scaled for other depths.
  std::size_t at12 = 0;
  if (placement == "early") at12 = 1;
  else if (placement == "middle") at12 = 6;
  else if (placement == "late") at12 = 10;
  else throw std::invalid_argument("unknown PMLA placement '" + placement + "'");
  if (depth == 12) return at12;
  return std::min(depth - 1, at12 * depth / 12);
}

HybridEncoder::HybridEncoder(const EncoderConfig& cfg, ParamStore& store, Rng& rng,
                             const std::string& prefix)
    : cfg_((cfg.validate(), cfg)),
      patch_encoder_(store, prefix + ".patch_embed", cfg.patch, rng),
      pos_w1_(store.add_uniform(prefix + ".pos_embed.fc1.weight", {3, cfg.pos_hidden}, 3, rng)),
      pos_b1_(store.add(prefix + ".pos_embed.fc1.bias", DenseArray({cfg.pos_hidden}, 0.0))),
      pos_w2_(store.add_uniform(prefix + ".pos_embed.fc2.weight", {cfg.pos_hidden, cfg.d_model},
                                cfg.pos_hidden, rng)),
      pos_b2_(store.add(prefix + ".pos_embed.fc2.bias", DenseArray({cfg.d_model}, 0.0))),
      order_scale_(store, prefix + ".order_scale", cfg.d_model) {
  layers_.reserve(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string name = prefix + ".layers." + std::to_string(i);
    if (is_latent(i))
      layers_.emplace_back(std::in_place_type<LatentAttentionBlock>, store, name, cfg.pmla(),
                           cfg.ffn_hidden, rng);
    else
      layers_.emplace_back(std::in_place_type<MambaBlock>, store, name, cfg.mamba(), rng);
  }
  norm_g_ = store.add(prefix + ".norm.gamma", DenseArray({cfg.d_model}, 1.0));
  norm_b_ = store.add(prefix + ".norm.beta", DenseArray({cfg.d_model}, 0.0));
}

Value HybridEncoder::positional(const DenseArray& centers) const {
  return linear(gelu(linear(Value::constant(centers), pos_w1_, pos_b1_)), pos_w2_, pos_b2_);
}

Value HybridEncoder::input_embedding(const TokenSequence& seq) const {
  if (seq.width() != cfg_.d_model)
    throw ShapeError("encode: token width " + std::to_string(seq.width()) + " != d_model " +
                     std::to_string(cfg_.d_model));
  return order_scale_.apply(add(seq.tokens, positional(seq.centers)), seq.order);
}

HybridEncoder::LayerTrace HybridEncoder::trace(const TokenSequence& seq) const {
  LayerTrace tr;
  Value x = input_embedding(seq);
  for (const auto& layer : layers_) {
    tr.inputs.push_back(x);
    x = std::visit([&](const auto& l) { return l.forward(x); }, layer);
  }
  tr.output = layer_norm(x, norm_g_, norm_b_);
  return tr;
}

Value HybridEncoder::encode(const TokenSequence& seq) const {
  Value x = input_embedding(seq);
  for (const auto& layer : layers_) x = std::visit([&](const auto& l) { return l.forward(x); }, layer);
  return layer_norm(x, norm_g_, norm_b_);
}

EncoderBundle build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  EncoderBundle bundle;
  Rng rng(seed);
  bundle.encoder = std::make_unique<HybridEncoder>(cfg, bundle.params, rng);
  return bundle;
}

BatchNorm::BatchNorm(ParamStore& store, const std::string& prefix, std::size_t channels, double momentum)
    : momentum_(momentum) {
  gamma = store.add(prefix + ".gamma", DenseArray({channels}, 1.0));
  beta = store.add(prefix + ".beta", DenseArray({channels}, 0.0));
  running_mean = store.add_buffer(prefix + ".running_mean", DenseArray({channels}, 0.0));
  running_var = store.add_buffer(prefix + ".running_var", DenseArray({channels}, 1.0));
}

Value BatchNorm::forward(const Value& x, bool training) const {
  const std::size_t C = gamma.size();
  if (x.dim(x.rank() - 1) != C) throw ShapeError("BatchNorm: expected " + std::to_string(C) + " channels");
  Value xhat;
  if (training) {
    DenseArray mu, var;
    xhat = batch_standardize(x, &mu, &var);
    Value rm = running_mean, rv = running_var;
    for (std::size_t c = 0; c < C; ++c) {
      rm.mutable_value()[c] = (1 - momentum_) * rm.value()[c] + momentum_ * mu[c];
      rv.mutable_value()[c] = (1 - momentum_) * rv.value()[c] + momentum_ * var[c];
    }
  } else {
    DenseArray shift({C}), inv({C});
    for (std::size_t c = 0; c < C; ++c) {
      inv[c] = 1.0 / std::sqrt(running_var.value()[c] + kLayerNormEps);
      shift[c] = -running_mean.value()[c];
    }
    xhat = mul_trailing(add_trailing(x, Value::constant(shift)), Value::constant(inv));
  }
  return add_trailing(mul_trailing(xhat, gamma), beta);
}

ClassificationHead::ClassificationHead(ParamStore& store, const std::string& prefix,
                                       std::size_t d_model, std::size_t hidden, std::size_t classes,
                                       Rng& rng)
    : norm_(store, prefix + ".norm", hidden) {
  w1_ = store.add_uniform(prefix + ".fc1.weight", {2 * d_model, hidden}, 2 * d_model, rng);
  b1_ = store.add(prefix + ".fc1.bias", DenseArray({hidden}, 0.0));
  w2_ = store.add_uniform(prefix + ".fc2.weight", {hidden, classes}, hidden, rng);
  b2_ = store.add(prefix + ".fc2.bias", DenseArray({classes}, 0.0));
}

Value ClassificationHead::pooled(const Value& features) const {
  return concat({max_dim(features, 1), mean_dim(features, 1)}, 1);
}

Value ClassificationHead::forward(const Value& features, bool training) const {
  return linear(relu(norm_.forward(linear(pooled(features), w1_, b1_), training)), w2_, b2_);
}

SegmentationHead::SegmentationHead(ParamStore& store, const std::string& prefix, std::size_t d_model,
                                   std::size_t hidden, std::size_t parts, Rng& rng)
    : norm_(store, prefix + ".norm", hidden) {
  w1_ = store.add_uniform(prefix + ".fc1.weight", {d_model + 3, hidden}, d_model + 3, rng);
  b1_ = store.add(prefix + ".fc1.bias", DenseArray({hidden}, 0.0));
  w2_ = store.add_uniform(prefix + ".fc2.weight", {hidden, parts}, hidden, rng);
  b2_ = store.add(prefix + ".fc2.bias", DenseArray({parts}, 0.0));
}

std::vector<std::size_t> nearest_center_assignment(const DenseArray& centers, const DenseArray& points) {
  const std::size_t B = centers.dim(0), T = centers.dim(1), N = points.dim(1);
  if (points.dim(0) != B) throw ShapeError("nearest_center_assignment: batch mismatch");
  std::vector<std::size_t> assign(B * N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      const Point3 p{points[(b * N + i) * 3], points[(b * N + i) * 3 + 1], points[(b * N + i) * 3 + 2]};
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t t = 0; t < T; ++t) {
        const Point3 c{centers[(b * T + t) * 3], centers[(b * T + t) * 3 + 1], centers[(b * T + t) * 3 + 2]};
        const double d = squared_distance(p, c);
        if (d < best) {
          best = d;
          arg = t;
        }
      }
      assign[b * N + i] = arg;
    }
  return assign;
}

Value SegmentationHead::forward(const Value& features, const DenseArray& centers,
                                const DenseArray& points, bool training) const {
  const std::size_t B = points.dim(0), N = points.dim(1), T = centers.dim(1);
  const auto assign = nearest_center_assignment(centers, points);
  DenseArray offsets({B, N, 3});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (int k = 0; k < 3; ++k)
        offsets[(b * N + i) * 3 + k] =
            points[(b * N + i) * 3 + k] - centers[(b * T + assign[b * N + i]) * 3 + k];
  Value per_point = concat({gather_rows(features, assign, N), Value::constant(std::move(offsets))}, 2);
  return linear(relu(norm_.forward(linear(per_point, w1_, b1_), training)), w2_, b2_);
}

ParamBreakdown param_count(const EncoderConfig& cfg, std::size_t num_classes, std::size_t head_hidden) {
  const std::size_t D = cfg.d_model, E = cfg.expand * D, N = cfg.d_state, R = (D + 15) / 16;
  const std::size_t W = cfg.heads * cfg.head_dim, r = cfg.latent;
  ParamBreakdown p;
  const auto& pe = cfg.patch;
  p.patch_embed = linear_param_count(3, pe.hidden1) + linear_param_count(pe.hidden1, pe.hidden2) +
                  linear_param_count(2 * pe.hidden2, pe.hidden3) + linear_param_count(pe.hidden3, pe.out) +
                  2 * pe.hidden1 + 2 * pe.hidden3;
  p.positional = linear_param_count(3, cfg.pos_hidden) + linear_param_count(cfg.pos_hidden, D);
  p.order_scale = 2 * kNumOrders * D;
  const std::size_t mamba = 2 * D + D * 2 * E + cfg.conv_kernel * E + E + E * (R + 2 * N) + R * E + E +
                            E * N + E + E * D;
  const std::size_t latent = 4 * D + 3 * D * W + W + 4 * linear_param_count(D, r) + 2 * r * W +
                             linear_param_count(W, D) + linear_param_count(D, cfg.ffn_hidden) +
                             linear_param_count(cfg.ffn_hidden, D);
  const std::size_t n_latent = cfg.pmla_positions.size();
  p.mamba_layers = (cfg.depth - n_latent) * mamba;
  p.latent_layers = n_latent * latent;
  p.final_norm = 2 * D;
  p.cls_head = linear_param_count(2 * D, head_hidden) + 2 * head_hidden +
               linear_param_count(head_hidden, num_classes);
  return p;
}

namespace {

constexpr double kTranscendental = 4.0;
constexpr double kNormPerElement = 5.0;
constexpr double kScanPerState = 9.0;

double linear_flops(double rows, double in, double out, bool bias = true) {
  return 2.0 * rows * in * out + (bias ? rows * out : 0.0);
}

}  // namespace

FlopBreakdown flop_estimate(const EncoderConfig& cfg, std::size_t T, std::size_t num_classes,
                            std::size_t head_hidden) {
  const double t = static_cast<double>(T);
  const double D = static_cast<double>(cfg.d_model), E = static_cast<double>(cfg.expand * cfg.d_model);
  const double N = static_cast<double>(cfg.d_state), R = static_cast<double>((cfg.d_model + 15) / 16);
  const double W = static_cast<double>(cfg.heads * cfg.head_dim), r = static_cast<double>(cfg.latent);
  const double H = static_cast<double>(cfg.heads), F = static_cast<double>(cfg.ffn_hidden);
  const double k = static_cast<double>(cfg.conv_kernel);

  FlopBreakdown f;
  f.positional = linear_flops(t, 3, static_cast<double>(cfg.pos_hidden)) +
                 kTranscendental * t * static_cast<double>(cfg.pos_hidden) +
                 linear_flops(t, static_cast<double>(cfg.pos_hidden), D) + t * D  // + tokens
                 + 2.0 * t * D;                                                   // order scale

  const double mamba = kNormPerElement * t * D + linear_flops(t, D, 2 * E, false) +
                       2.0 * t * k * E + t * E +                   // causal depthwise conv + bias
                       kTranscendental * t * E +                   // SiLU
                       linear_flops(t, E, R + 2 * N, false) +
                       linear_flops(t, R, E) + kTranscendental * t * E +  // delta projection, softplus
                       kScanPerState * t * E * N + 2.0 * t * E +          // scan and D skip
                       kTranscendental * t * E + t * E +                  // gate
                       linear_flops(t, E, D, false) + t * D;              // out-proj, residual
  const double latent = kNormPerElement * t * D + 2.0 * t * 3.0 * D * W + t * W +  // Q conv
                        4.0 * linear_flops(t, D, r) + 2.0 * kTranscendental * t * r + 2.0 * t * r +
                        2.0 * linear_flops(t, r, W, false) +
                        2.0 * t * t * W + kNormPerElement * H * t * t + 2.0 * t * t * W +  // QK^T, softmax, AV
                        linear_flops(t, W, D) + t * D +
                        kNormPerElement * t * D + linear_flops(t, D, F) + kTranscendental * t * F +
                        linear_flops(t, F, D) + t * D;
  const double n_latent = static_cast<double>(cfg.pmla_positions.size());
  f.mamba_layers = (static_cast<double>(cfg.depth) - n_latent) * mamba;
  f.latent_layers = n_latent * latent;
  f.final_norm = kNormPerElement * t * D;
  f.cls_head = 2.0 * t * D + linear_flops(1, 2 * D, static_cast<double>(head_hidden)) +
               static_cast<double>(head_hidden) +
               linear_flops(1, static_cast<double>(head_hidden), static_cast<double>(num_classes));
  return f;
}

double patch_embed_flops(const PatchEncoderConfig& cfg, std::size_t G, std::size_t S) {
  const double pts = static_cast<double>(G * S);
  const double h1 = static_cast<double>(cfg.hidden1), h2 = static_cast<double>(cfg.hidden2);
  const double h3 = static_cast<double>(cfg.hidden3), out = static_cast<double>(cfg.out);
  return linear_flops(pts, 3, h1) + kNormPerElement * pts * h1 + pts * h1 + linear_flops(pts, h1, h2) +
         linear_flops(pts, 2 * h2, h3) + kNormPerElement * pts * h3 + pts * h3 + linear_flops(pts, h3, out);
}

}  // namespace pointlama
