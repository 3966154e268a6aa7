#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "pointlama/mamba.hpp"
#include "pointlama/pmla.hpp"
#include "pointlama/pointcloud.hpp"
#include "pointlama/serialization.hpp"

namespace pointlama {

struct EncoderConfig {
  std::size_t depth = 12;
  std::set<std::size_t> pmla_positions{6};
  std::size_t d_model = 384;
  std::size_t latent = 48;
  std::size_t heads = 6;
  std::size_t head_dim = 64;
  std::size_t d_state = 16;
  std::size_t expand = 2;
  std::size_t conv_kernel = 4;
  std::size_t ffn_hidden = 1536;
  std::size_t pos_hidden = 128;
  PatchEncoderConfig patch{};
  ScanMode scan = ScanMode::sequential;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;

  MambaConfig mamba() const;
  PMLAConfig pmla() const;
};

/// Layer index used for the "early" / "middle" / "late" insertion ablation.
std::size_t pmla_placement_index(const std::string& placement, std::size_t depth);

class HybridEncoder {
 public:
  HybridEncoder(const EncoderConfig& cfg, ParamStore& store, Rng& rng,
                const std::string& prefix = "encoder");

  /// Mini-PointNet tokens for a patch set, raw order.
  TokenSequence embed(const PatchSet& patches) const { return patch_encode(patches, patch_encoder_); }
  /// Positional embedding MLP of center coordinates, [B, T, 3] -> [B, T, D].
  Value positional(const DenseArray& centers) const;
  /// Order scale, positional embedding, every layer, final norm.
  Value encode(const TokenSequence& seq) const;

  /// Hidden states entering each layer plus the final output, for probes.
  struct LayerTrace {
    std::vector<Value> inputs;  // depth entries
    Value output;
  };
  LayerTrace trace(const TokenSequence& seq) const;

  bool is_latent(std::size_t layer) const { return cfg_.pmla_positions.count(layer) != 0; }
  std::size_t depth() const { return layers_.size(); }
  std::size_t latent_layer_count() const { return cfg_.pmla_positions.size(); }
  std::size_t mamba_layer_count() const { return depth() - latent_layer_count(); }

  const EncoderConfig& config() const { return cfg_; }
  const PatchEncoder& patch_encoder() const { return patch_encoder_; }
  const OrderScale& order_scale() const { return order_scale_; }
  const MambaBlock* mamba_layer(std::size_t i) const { return std::get_if<MambaBlock>(&layers_.at(i)); }
  const LatentAttentionBlock* latent_layer(std::size_t i) const {
    return std::get_if<LatentAttentionBlock>(&layers_.at(i));
  }

 private:
  Value input_embedding(const TokenSequence& seq) const;

  EncoderConfig cfg_;
  PatchEncoder patch_encoder_;
  Value pos_w1_, pos_b1_, pos_w2_, pos_b2_;
  OrderScale order_scale_;
  std::vector<std::variant<MambaBlock, LatentAttentionBlock>> layers_;
  Value norm_g_, norm_b_;
};

/// Encoder together with the store that owns its parameters.
struct EncoderBundle {
  ParamStore params;
  std::unique_ptr<HybridEncoder> encoder;
};
EncoderBundle build_encoder(const EncoderConfig& cfg, std::uint64_t seed);

/// Batch normalisation over every leading position of x [..., C]. Training
/// uses batch statistics and updates the running ones; evaluation uses the
/// running statistics.
class BatchNorm {
 public:
  BatchNorm(ParamStore& store, const std::string& prefix, std::size_t channels, double momentum = 0.1);
  Value forward(const Value& x, bool training) const;

  Value gamma, beta;
  Value running_mean, running_var;  // buffers

 private:
  double momentum_;
};

/// concat(max-pool, mean-pool) over tokens -> Linear -> BN -> ReLU -> Linear.
class ClassificationHead {
 public:
  ClassificationHead(ParamStore& store, const std::string& prefix, std::size_t d_model,
                     std::size_t hidden, std::size_t classes, Rng& rng);
  Value pooled(const Value& features) const;
  Value forward(const Value& features, bool training = false) const;

 private:
  Value w1_, b1_, w2_, b2_;
  BatchNorm norm_;
};

/// Each point takes the features of its nearest token center (lowest position
/// on ties) concatenated with its offset from that center, then a per-point
/// Linear -> BN -> ReLU -> Linear.
class SegmentationHead {
 public:
  SegmentationHead(ParamStore& store, const std::string& prefix, std::size_t d_model,
                   std::size_t hidden, std::size_t parts, Rng& rng);
  /// features [B, T, D], token centers [B, T, 3], points [B, N, 3] -> [B, N, parts].
  Value forward(const Value& features, const DenseArray& centers, const DenseArray& points,
                bool training = false) const;

 private:
  Value w1_, b1_, w2_, b2_;
  BatchNorm norm_;
};

/// Nearest token position for every point, B*N entries.
std::vector<std::size_t> nearest_center_assignment(const DenseArray& centers, const DenseArray& points);

// Accounting. FLOPs follow a fixed analytic model: 2*m*n*k per matmul,
// 2*k*C*C' per output row of a convolution, one FLOP per elementwise add,
// multiply or activation evaluation (exp/sigmoid/softplus count 4), five per
// element for layer norm and softmax, nine per (channel, state) per step for
// the discretised scan.

/// Learnable scalars of a fully connected layer with bias.
constexpr std::size_t linear_param_count(std::size_t in, std::size_t out) { return in * out + out; }

struct ParamBreakdown {
  std::size_t patch_embed = 0;
  std::size_t positional = 0;
  std::size_t order_scale = 0;
  std::size_t mamba_layers = 0;
  std::size_t latent_layers = 0;
  std::size_t final_norm = 0;
  std::size_t cls_head = 0;

  std::size_t backbone() const {
    return patch_embed + positional + order_scale + mamba_layers + latent_layers + final_norm;
  }
  std::size_t total() const { return backbone() + cls_head; }
};

/// Closed-form parameter count; must agree with a ParamStore built from `cfg`.
ParamBreakdown param_count(const EncoderConfig& cfg, std::size_t num_classes,
                           std::size_t head_hidden = 256);

struct FlopBreakdown {
  double positional = 0;
  double mamba_layers = 0;
  double latent_layers = 0;
  double final_norm = 0;
  double cls_head = 0;
  double total() const { return positional + mamba_layers + latent_layers + final_norm + cls_head; }
};

/// Backbone FLOPs for one sequence of T tokens (patch embedding excluded).
FlopBreakdown flop_estimate(const EncoderConfig& cfg, std::size_t T, std::size_t num_classes,
                            std::size_t head_hidden = 256);
/// Mini-PointNet FLOPs for G patches of S points.
double patch_embed_flops(const PatchEncoderConfig& cfg, std::size_t G, std::size_t S);

}  // namespace pointlama
