#include "pointlama/serialization.hpp"

#include <cmath>
#include <stdexcept>

namespace pointlama {

namespace {

void check_bits(unsigned bits) {
  if (bits < 1 || bits > 20) throw std::invalid_argument("hilbert: bits must be in [1, 20], got " + std::to_string(bits));
}

// Skilling, "Programming the Hilbert curve" (2004): axes <-> transposed index.
void axes_to_transpose(std::uint32_t* X, unsigned bits) {
  constexpr int n = 3;
  const std::uint32_t M = 1u << (bits - 1);
  for (std::uint32_t Q = M; Q > 1; Q >>= 1) {
    const std::uint32_t P = Q - 1;
    for (int i = 0; i < n; ++i) {
      if (X[i] & Q) {
        X[0] ^= P;
      } else {
        const std::uint32_t t = (X[0] ^ X[i]) & P;
        X[0] ^= t;
        X[i] ^= t;
      }
    }
  }
  for (int i = 1; i < n; ++i) X[i] ^= X[i - 1];
  std::uint32_t t = 0;
  for (std::uint32_t Q = M; Q > 1; Q >>= 1)
    if (X[n - 1] & Q) t ^= Q - 1;
  for (int i = 0; i < n; ++i) X[i] ^= t;
}

void transpose_to_axes(std::uint32_t* X, unsigned bits) {
  constexpr int n = 3;
  const std::uint32_t N = 2u << (bits - 1);
  std::uint32_t t = X[n - 1] >> 1;
  for (int i = n - 1; i > 0; --i) X[i] ^= X[i - 1];
  X[0] ^= t;
  for (std::uint32_t Q = 2; Q != N; Q <<= 1) {
    const std::uint32_t P = Q - 1;
    for (int i = n - 1; i >= 0; --i) {
      if (X[i] & Q) {
        X[0] ^= P;
      } else {
        t = (X[0] ^ X[i]) & P;
        X[0] ^= t;
        X[i] ^= t;
      }
    }
  }
}

}  // namespace

std::uint64_t hilbert_index(const GridCell& cell, unsigned bits) {
  check_bits(bits);
  const std::uint32_t side = 1u << bits;
  for (auto c : cell)
    if (c >= side)
      throw std::out_of_range("hilbert_index: coordinate " + std::to_string(c) + " outside grid of side " +
                              std::to_string(side));
  std::uint32_t X[3] = {cell[0], cell[1], cell[2]};
  axes_to_transpose(X, bits);
  std::uint64_t index = 0;
  for (unsigned j = bits; j-- > 0;)
    for (int i = 0; i < 3; ++i) index = (index << 1) | ((X[i] >> j) & 1u);
  return index;
}

GridCell hilbert_index_inverse(std::uint64_t index, unsigned bits) {
  check_bits(bits);
  if (index >> (3 * bits))
    throw std::out_of_range("hilbert_index_inverse: index " + std::to_string(index) + " >= 2^" +
                            std::to_string(3 * bits));
  std::uint32_t X[3] = {0, 0, 0};
  unsigned pos = 3 * bits;
  for (unsigned j = bits; j-- > 0;)
    for (int i = 0; i < 3; ++i) X[i] |= static_cast<std::uint32_t>((index >> --pos) & 1u) << j;
  transpose_to_axes(X, bits);
  return {X[0], X[1], X[2]};
}

std::uint64_t trans_hilbert_index(const GridCell& cell, unsigned bits) {
  return hilbert_index({cell[1], cell[2], cell[0]}, bits);
}

std::uint64_t curve_index(const GridCell& cell, const HilbertConfig& cfg) {
  return cfg.variant == CurveVariant::hilbert ? hilbert_index(cell, cfg.bits)
                                              : trans_hilbert_index(cell, cfg.bits);
}

std::vector<GridCell> quantize_centers(const DenseArray& centers, unsigned bits) {
  check_bits(bits);
  const std::size_t B = centers.dim(0), G = centers.dim(1);
  const double top = static_cast<double>((1u << bits) - 1);
  std::vector<GridCell> cells(B * G);
  for (std::size_t b = 0; b < B; ++b)
    for (int k = 0; k < 3; ++k) {
      double lo = centers[(b * G) * 3 + k], hi = lo;
      for (std::size_t g = 0; g < G; ++g) {
        lo = std::min(lo, centers[(b * G + g) * 3 + k]);
        hi = std::max(hi, centers[(b * G + g) * 3 + k]);
      }
      const double span = hi - lo;
      for (std::size_t g = 0; g < G; ++g) {
        const double u = span > 0 ? (centers[(b * G + g) * 3 + k] - lo) / span : 0.0;
        cells[b * G + g][k] = static_cast<std::uint32_t>(std::clamp(std::floor(u * top), 0.0, top));
      }
    }
  return cells;
}

Strategy parse_strategy(const std::string& name) {
  if (name == "random") return Strategy::random;
  if (name == "hilbert") return Strategy::hilbert;
  if (name == "trans_hilbert") return Strategy::trans_hilbert;
  if (name == "hilbert_pair") return Strategy::hilbert_pair;
  if (name == "axis") return Strategy::axis;
  throw std::invalid_argument("unknown serialization strategy '" + name + "'");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::random: return "random";
    case Strategy::hilbert: return "hilbert";
    case Strategy::trans_hilbert: return "trans_hilbert";
    case Strategy::hilbert_pair: return "hilbert_pair";
    case Strategy::axis: return "axis";
  }
  return "unknown";
}

std::size_t sequence_factor(Strategy s) {
  switch (s) {
    case Strategy::hilbert_pair: return 2;
    case Strategy::axis: return 3;
    default: return 1;
  }
}

namespace {

// Concatenates per-row permutations of length G into rows of length G * parts.
std::vector<std::size_t> join_rows(const std::vector<std::vector<std::size_t>>& perms,
                                   std::size_t B, std::size_t G) {
  const std::size_t L = G * perms.size();
  std::vector<std::size_t> out(B * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < perms.size(); ++p)
      std::copy_n(perms[p].begin() + static_cast<std::ptrdiff_t>(b * G), G,
                  out.begin() + static_cast<std::ptrdiff_t>(b * L + p * G));
  return out;
}

Serialized realign(const PatchSet& patches, const TokenSequence& tokens,
                   std::vector<std::size_t> perm, std::size_t out_len,
                   const std::vector<OrderId>& segment_orders) {
  Serialized s;
  s.seq = gather_sequence(tokens, perm, out_len);
  s.patches = permute_patches(patches, perm, out_len);
  const std::size_t B = tokens.batch(), seg = out_len / segment_orders.size();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < out_len; ++t) s.seq.order[b * out_len + t] = segment_orders[t / seg];
  s.perm = std::move(perm);
  return s;
}

void check_aligned(const PatchSet& patches, const TokenSequence& tokens) {
  if (patches.batch() != tokens.batch() || patches.groups() != tokens.length())
    throw ShapeError("serialize: patch set and token sequence are not aligned");
}

std::vector<std::size_t> curve_perm(const PatchSet& patches, const HilbertConfig& cfg) {
  const auto cells = quantize_centers(patches.centers, cfg.bits);
  std::vector<std::uint64_t> keys(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) keys[i] = curve_index(cells[i], cfg);
  return stable_argsort_rows(keys, patches.batch(), patches.groups());
}

std::vector<std::size_t> axis_perm(const PatchSet& patches, int axis) {
  const std::size_t B = patches.batch(), G = patches.groups();
  std::vector<double> keys(B * G);
  for (std::size_t i = 0; i < B * G; ++i) keys[i] = patches.centers[i * 3 + axis];
  return stable_argsort_rows(keys, B, G);
}

}  // namespace

Serialized serialize_classification(const PatchSet& patches, const TokenSequence& tokens,
                                    const HilbertConfig& cfg) {
  check_aligned(patches, tokens);
  const OrderId id = cfg.variant == CurveVariant::hilbert ? OrderId::hilbert : OrderId::trans_hilbert;
  return realign(patches, tokens, curve_perm(patches, cfg), tokens.length(), {id});
}

Serialized serialize_segmentation(const PatchSet& patches, const TokenSequence& tokens) {
  check_aligned(patches, tokens);
  const std::size_t B = tokens.batch(), G = tokens.length();
  auto perm = join_rows({axis_perm(patches, 0), axis_perm(patches, 1), axis_perm(patches, 2)}, B, G);
  return realign(patches, tokens, std::move(perm), 3 * G,
                 {OrderId::axis_x, OrderId::axis_y, OrderId::axis_z});
}

Serialized serialize(const PatchSet& patches, const TokenSequence& tokens, Strategy strategy,
                     unsigned bits, std::uint64_t seed) {
  check_aligned(patches, tokens);
  const std::size_t B = tokens.batch(), G = tokens.length();
  switch (strategy) {
    case Strategy::random: {
      std::vector<std::size_t> perm(B * G);
      for (std::size_t b = 0; b < B; ++b) {
        auto first = perm.begin() + static_cast<std::ptrdiff_t>(b * G);
        std::iota(first, first + static_cast<std::ptrdiff_t>(G), std::size_t{0});
        auto rng = Rng::stream(seed, 0x5E41, b);
        std::shuffle(first, first + static_cast<std::ptrdiff_t>(G), rng.engine());
      }
      return realign(patches, tokens, std::move(perm), G, {OrderId::raw});
    }
    case Strategy::hilbert:
      return serialize_classification(patches, tokens, {bits, CurveVariant::hilbert});
    case Strategy::trans_hilbert:
      return serialize_classification(patches, tokens, {bits, CurveVariant::trans_hilbert});
    case Strategy::hilbert_pair: {
      auto perm = join_rows({curve_perm(patches, {bits, CurveVariant::hilbert}),
                             curve_perm(patches, {bits, CurveVariant::trans_hilbert})},
                            B, G);
      return realign(patches, tokens, std::move(perm), 2 * G,
                     {OrderId::hilbert, OrderId::trans_hilbert});
    }
    case Strategy::axis:
      return serialize_segmentation(patches, tokens);
  }
  throw std::invalid_argument("serialize: unknown strategy");
}

MaskMode parse_mask_mode(const std::string& name) {
  if (name == "random") return MaskMode::random;
  if (name == "block") return MaskMode::block;
  throw std::invalid_argument("unknown mask mode '" + name + "'");
}

std::string to_string(MaskMode m) { return m == MaskMode::random ? "random" : "block"; }

MaskRecord make_mask(std::size_t batch, std::size_t length, double ratio, MaskMode mode,
                     std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw std::invalid_argument("apply_mask: ratio must be in [0, 1), got " + std::to_string(ratio));
  const auto m = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(length)));
  MaskRecord rec;
  rec.batch = batch;
  rec.length = length;
  rec.masked.assign(batch * length, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    auto rng = Rng::stream(seed, 0x3A5C, b);
    std::uint8_t* row = rec.masked.data() + b * length;
    if (mode == MaskMode::random) {
      std::vector<std::size_t> order(length);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng.engine());
      for (std::size_t i = 0; i < m; ++i) row[order[i]] = 1;
    } else {
      const std::size_t start = rng.index(length);
      for (std::size_t i = 0; i < m; ++i) row[(start + i) % length] = 1;
    }
    for (std::size_t t = 0; t < length; ++t) (row[t] ? rec.masked_rows : rec.visible_rows).push_back(t);
  }
  return rec;
}

MaskedSequence apply_mask(const TokenSequence& seq, double ratio, MaskMode mode, std::uint64_t seed) {
  MaskedSequence out;
  out.mask = make_mask(seq.batch(), seq.length(), ratio, mode, seed);
  if (out.mask.visible_count() == 0)
    throw std::invalid_argument("apply_mask: ratio leaves no visible tokens");
  TokenSequence tagged = seq;
  tagged.mask = out.mask.masked;
  out.visible = gather_sequence(tagged, out.mask.visible_rows, out.mask.visible_count());
  return out;
}

OrderScale::OrderScale(ParamStore& store, const std::string& prefix, std::size_t width,
                       std::size_t orders) {
  gamma = store.add(prefix + ".gamma", DenseArray({orders, width}, 1.0));
  beta = store.add(prefix + ".beta", DenseArray({orders, width}, 0.0));
}

Value OrderScale::apply(const Value& tokens, const std::vector<OrderId>& order) const {
  const std::size_t B = tokens.dim(0), T = tokens.dim(1);
  if (order.size() != B * T) throw ShapeError("OrderScale: need one order id per token");
  std::vector<std::size_t> ids(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    ids[i] = static_cast<std::size_t>(order[i]);
    if (ids[i] >= gamma.dim(0))
      throw std::invalid_argument("OrderScale: no parameters for order id " + std::to_string(ids[i]));
  }
  return add(mul(tokens, embedding(gamma, ids, {B, T})), embedding(beta, ids, {B, T}));
}

Value OrderScale::apply(const Value& tokens, OrderId order) const {
  return apply(tokens, std::vector<OrderId>(tokens.dim(0) * tokens.dim(1), order));
}

}  // namespace pointlama
