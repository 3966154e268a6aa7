#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pointlama/ops.hpp"
#include "pointlama/param_store.hpp"
#include "pointlama/rng.hpp"

namespace pointlama {

using Point3 = std::array<double, 3>;

/// Batch of equally sized point sets, points [B, N, 3].
struct PointCloud {
  DenseArray points;

  static PointCloud from_sets(const std::vector<std::vector<Point3>>& sets);

  std::size_t batch() const { return points.dim(0); }
  std::size_t count() const { return points.dim(1); }
  std::vector<Point3> cloud(std::size_t b) const;
};

/// Shift to zero mean and scale so the farthest point has norm 1.
void normalize_points(std::vector<Point3>& pts);

double squared_distance(const Point3& a, const Point3& b);

/// Greedy max-min selection of G indices starting at `start`. Ties go to the
/// lowest index.
std::vector<std::size_t> farthest_point_sample(std::span<const Point3> pts, std::size_t G,
                                               std::size_t start);

/// Start index used by the batched sampler: the point nearest the centroid for
/// seed 0, otherwise a seeded draw.
std::size_t fps_start_index(std::span<const Point3> pts, std::uint64_t seed, std::size_t batch_index);

/// Batched FPS; returns B*G indices, row-major over (b, g).
std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t G,
                                               std::uint64_t seed);

struct PatchSet {
  DenseArray centers;                        // [B, G, 3]
  DenseArray neighborhoods;                  // [B, G, S, 3], center subtracted
  std::vector<std::size_t> center_indices;   // B*G
  std::vector<std::size_t> neighbor_indices; // B*G*S, indices into the cloud

  std::size_t batch() const { return centers.dim(0); }
  std::size_t groups() const { return centers.dim(1); }
  std::size_t group_size() const { return neighborhoods.dim(2); }
};

/// For each center, the S nearest cloud points (center included) ordered by
/// (distance, index), stored relative to the center.
PatchSet knn_group(const PointCloud& cloud, const std::vector<std::size_t>& center_indices,
                   std::size_t S);

/// Reorders the G axis of a patch set; `perm` holds B*G' source positions.
PatchSet permute_patches(const PatchSet& patches, const std::vector<std::size_t>& perm,
                         std::size_t out_len);

enum class OrderId : std::uint8_t { raw = 0, hilbert, trans_hilbert, axis_x, axis_y, axis_z };
inline constexpr std::size_t kNumOrders = 6;
std::string to_string(OrderId id);

/// Ordered patch tokens with per-position provenance.
struct TokenSequence {
  Value tokens;                      // [B, T, C]
  DenseArray centers;                // [B, T, 3]
  std::vector<OrderId> order;        // B*T
  std::vector<std::size_t> source;   // B*T, patch index before serialization
  std::vector<std::uint8_t> mask;    // B*T when masking was applied, else empty

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t width() const { return tokens.dim(2); }
};

/// Gathers positions `rows` (B*T', per-batch indices) from every field.
TokenSequence gather_sequence(const TokenSequence& seq, const std::vector<std::size_t>& rows,
                              std::size_t out_len);

struct PatchEncoderConfig {
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 256;
  std::size_t hidden3 = 512;
  std::size_t out = 384;
};

/// Mini-PointNet: shared per-point MLP, max-pooled global feature concatenated
/// back onto each point, second shared MLP, max-pool over the patch. Hidden
/// layers are layer-normalised before the ReLU.
class PatchEncoder {
 public:
  PatchEncoder(ParamStore& store, const std::string& prefix, const PatchEncoderConfig& cfg, Rng& rng);

  /// neighborhoods [B, G, S, 3] -> tokens [B, G, out].
  Value forward(const Value& neighborhoods) const;

  const PatchEncoderConfig& config() const { return cfg_; }

 private:
  PatchEncoderConfig cfg_;
  Value w1_, b1_, w2_, b2_, w3_, b3_, w4_, b4_;
  Value n1_g_, n1_b_, n3_g_, n3_b_;
};

/// Encodes every patch; the result is in raw (sampling) order.
TokenSequence patch_encode(const PatchSet& patches, const PatchEncoder& encoder);

}  // namespace pointlama
