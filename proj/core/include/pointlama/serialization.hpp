#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "pointlama/pointcloud.hpp"

namespace pointlama {

using GridCell = std::array<std::uint32_t, 3>;

enum class CurveVariant { hilbert, trans_hilbert };

struct HilbertConfig {
  unsigned bits = 10;  // grid is 2^bits per side, 1..20
  CurveVariant variant = CurveVariant::hilbert;
};

/// 3D Hilbert index of a grid cell (Skilling's transpose method), in [0, 2^(3p)).
std::uint64_t hilbert_index(const GridCell& cell, unsigned bits);
GridCell hilbert_index_inverse(std::uint64_t index, unsigned bits);
/// Hilbert index after the cyclic axis permutation (x, y, z) -> (y, z, x).
std::uint64_t trans_hilbert_index(const GridCell& cell, unsigned bits);
std::uint64_t curve_index(const GridCell& cell, const HilbertConfig& cfg);

/// Per-axis min-max scaling of each cloud's centers onto [0, 2^p - 1],
/// floor-quantised. centers [B, G, 3] -> B*G cells.
std::vector<GridCell> quantize_centers(const DenseArray& centers, unsigned bits);

/// Stable argsort of `keys` per batch row (ties by original index).
template <class Key>
std::vector<std::size_t> stable_argsort_rows(const std::vector<Key>& keys, std::size_t batch,
                                             std::size_t len) {
  std::vector<std::size_t> out(batch * len);
  for (std::size_t b = 0; b < batch; ++b) {
    auto first = out.begin() + static_cast<std::ptrdiff_t>(b * len);
    std::iota(first, first + static_cast<std::ptrdiff_t>(len), std::size_t{0});
    std::stable_sort(first, first + static_cast<std::ptrdiff_t>(len),
                     [&](std::size_t i, std::size_t j) { return keys[b * len + i] < keys[b * len + j]; });
  }
  return out;
}

enum class Strategy {
  random,         // seeded shuffle, order id raw
  hilbert,
  trans_hilbert,
  hilbert_pair,   // hilbert ++ trans_hilbert, 2G tokens
  axis            // x ++ y ++ z sorts, 3G tokens
};
Strategy parse_strategy(const std::string& name);
std::string to_string(Strategy s);
/// Output length multiplier (1, 2 or 3).
std::size_t sequence_factor(Strategy s);

struct Serialized {
  TokenSequence seq;
  PatchSet patches;                // realigned with seq
  std::vector<std::size_t> perm;   // B*T', source patch for each position
};

/// Curve ordering of the G axis: sort centers by ascending curve index and
/// realign tokens, centers and neighborhoods with the same permutation.
Serialized serialize_classification(const PatchSet& patches, const TokenSequence& tokens,
                                    const HilbertConfig& cfg);
/// Three stable coordinate sorts concatenated into a 3G sequence.
Serialized serialize_segmentation(const PatchSet& patches, const TokenSequence& tokens);
Serialized serialize(const PatchSet& patches, const TokenSequence& tokens, Strategy strategy,
                     unsigned bits, std::uint64_t seed);

enum class MaskMode { random, block };
MaskMode parse_mask_mode(const std::string& name);
std::string to_string(MaskMode m);

struct MaskRecord {
  std::size_t batch = 0;
  std::size_t length = 0;                 // T'
  std::vector<std::uint8_t> masked;       // B*T'
  std::vector<std::size_t> visible_rows;  // B*Tv, ascending within each row
  std::vector<std::size_t> masked_rows;   // B*Tm, ascending within each row

  std::size_t visible_count() const { return length - masked_count(); }
  std::size_t masked_count() const { return batch ? masked_rows.size() / batch : 0; }
};

/// round(ratio * T') positions per row; random mode shuffles, block mode masks a
/// contiguous run (mod T') from a seeded start.
MaskRecord make_mask(std::size_t batch, std::size_t length, double ratio, MaskMode mode,
                     std::uint64_t seed);

struct MaskedSequence {
  TokenSequence visible;
  MaskRecord mask;
};
MaskedSequence apply_mask(const TokenSequence& seq, double ratio, MaskMode mode, std::uint64_t seed);

/// Learnable per-ordering affine transform y = gamma_o * x + beta_o.
class OrderScale {
 public:
  OrderScale(ParamStore& store, const std::string& prefix, std::size_t width,
             std::size_t orders = kNumOrders);

  /// Per-position order ids (B*T) for tokens [B, T, C].
  Value apply(const Value& tokens, const std::vector<OrderId>& order) const;
  Value apply(const Value& tokens, OrderId order) const;

  Value gamma, beta;  // [orders, C]
};

}  // namespace pointlama
