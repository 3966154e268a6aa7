#include "pointlama/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace pointlama {

PointCloud PointCloud::from_sets(const std::vector<std::vector<Point3>>& sets) {
  if (sets.empty()) throw std::invalid_argument("PointCloud: empty batch");
  const std::size_t N = sets.front().size();
  DenseArray pts({sets.size(), N, 3});
  for (std::size_t b = 0; b < sets.size(); ++b) {
    if (sets[b].size() != N) throw ShapeError("PointCloud: clouds in a batch must have equal size");
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = 0; k < 3; ++k) {
        if (!std::isfinite(sets[b][i][k])) throw std::invalid_argument("PointCloud: non-finite coordinate");
        pts[(b * N + i) * 3 + k] = sets[b][i][k];
      }
  }
  return {std::move(pts)};
}

std::vector<Point3> PointCloud::cloud(std::size_t b) const {
  const std::size_t N = count();
  std::vector<Point3> out(N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < 3; ++k) out[i][k] = points[(b * N + i) * 3 + k];
  return out;
}

void normalize_points(std::vector<Point3>& pts) {
  if (pts.empty()) return;
  Point3 mu{0, 0, 0};
  for (const auto& p : pts)
    for (int k = 0; k < 3; ++k) mu[k] += p[k];
  for (int k = 0; k < 3; ++k) mu[k] /= static_cast<double>(pts.size());
  double r = 0.0;
  for (auto& p : pts) {
    for (int k = 0; k < 3; ++k) p[k] -= mu[k];
    r = std::max(r, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  if (r > 0)
    for (auto& p : pts)
      for (int k = 0; k < 3; ++k) p[k] /= r;
}

double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

std::vector<std::size_t> farthest_point_sample(std::span<const Point3> pts, std::size_t G,
                                               std::size_t start) {
  const std::size_t N = pts.size();
  if (G > N)
    throw std::invalid_argument("farthest_point_sample: G=" + std::to_string(G) +
                                " exceeds point count " + std::to_string(N));
  if (start >= N) throw std::out_of_range("farthest_point_sample: start index out of range");
  std::vector<std::size_t> chosen;
  chosen.reserve(G);
  if (G == 0) return chosen;
  std::vector<double> mind(N, std::numeric_limits<double>::infinity());
  std::size_t cur = start;
  for (std::size_t g = 0; g < G; ++g) {
    chosen.push_back(cur);
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < N; ++i) {
      mind[i] = std::min(mind[i], squared_distance(pts[i], pts[cur]));
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    cur = best;
  }
  return chosen;
}

std::size_t fps_start_index(std::span<const Point3> pts, std::uint64_t seed, std::size_t batch_index) {
  if (pts.empty()) throw std::invalid_argument("fps_start_index: empty cloud");
  if (seed != 0) return Rng::stream(seed, 0xF95, batch_index).index(pts.size());
  Point3 c{0, 0, 0};
  for (const auto& p : pts)
    for (int k = 0; k < 3; ++k) c[k] += p[k];
  for (int k = 0; k < 3; ++k) c[k] /= static_cast<double>(pts.size());
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = squared_distance(pts[i], c);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t G,
                                               std::uint64_t seed) {
  std::vector<std::size_t> out;
  out.reserve(cloud.batch() * G);
  for (std::size_t b = 0; b < cloud.batch(); ++b) {
    const auto pts = cloud.cloud(b);
    const auto idx = farthest_point_sample(pts, G, fps_start_index(pts, seed, b));
    out.insert(out.end(), idx.begin(), idx.end());
  }
  return out;
}

PatchSet knn_group(const PointCloud& cloud, const std::vector<std::size_t>& center_indices,
                   std::size_t S) {
  const std::size_t B = cloud.batch(), N = cloud.count();
  if (S > N)
    throw std::invalid_argument("knn_group: S=" + std::to_string(S) + " exceeds point count " +
                                std::to_string(N));
  if (S == 0 || center_indices.empty() || center_indices.size() % B != 0)
    throw std::invalid_argument("knn_group: need S >= 1 and B*G center indices");
  const std::size_t G = center_indices.size() / B;
  PatchSet ps;
  ps.centers = DenseArray({B, G, 3});
  ps.neighborhoods = DenseArray({B, G, S, 3});
  ps.center_indices = center_indices;
  ps.neighbor_indices.resize(B * G * S);
  std::vector<std::pair<double, std::size_t>> dist(N);
  for (std::size_t b = 0; b < B; ++b) {
    const auto pts = cloud.cloud(b);
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t ci = center_indices[b * G + g];
      if (ci >= N) throw std::out_of_range("knn_group: center index out of range");
      const Point3& c = pts[ci];
      for (std::size_t i = 0; i < N; ++i) dist[i] = {squared_distance(pts[i], c), i};
      std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(S), dist.end());
      for (int k = 0; k < 3; ++k) ps.centers[(b * G + g) * 3 + k] = c[k];
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t j = dist[s].second;
        ps.neighbor_indices[(b * G + g) * S + s] = j;
        for (int k = 0; k < 3; ++k)
          ps.neighborhoods[((b * G + g) * S + s) * 3 + k] = pts[j][k] - c[k];
      }
    }
  }
  return ps;
}

PatchSet permute_patches(const PatchSet& patches, const std::vector<std::size_t>& perm,
                         std::size_t out_len) {
  const std::size_t B = patches.batch(), G = patches.groups(), S = patches.group_size();
  if (perm.size() != B * out_len) throw ShapeError("permute_patches: index count mismatch");
  PatchSet out;
  out.centers = DenseArray({B, out_len, 3});
  out.neighborhoods = DenseArray({B, out_len, S, 3});
  out.center_indices.resize(B * out_len);
  out.neighbor_indices.resize(B * out_len * S);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < out_len; ++t) {
      const std::size_t src = perm[b * out_len + t];
      if (src >= G) throw std::out_of_range("permute_patches: index out of range");
      const std::size_t from = b * G + src, to = b * out_len + t;
      for (int k = 0; k < 3; ++k) out.centers[to * 3 + k] = patches.centers[from * 3 + k];
      std::copy_n(patches.neighborhoods.data().begin() + static_cast<std::ptrdiff_t>(from * S * 3),
                  S * 3, out.neighborhoods.data().begin() + static_cast<std::ptrdiff_t>(to * S * 3));
      out.center_indices[to] = patches.center_indices[from];
      std::copy_n(patches.neighbor_indices.begin() + static_cast<std::ptrdiff_t>(from * S), S,
                  out.neighbor_indices.begin() + static_cast<std::ptrdiff_t>(to * S));
    }
  return out;
}

std::string to_string(OrderId id) {
  switch (id) {
    case OrderId::raw: return "raw";
    case OrderId::hilbert: return "hilbert";
    case OrderId::trans_hilbert: return "trans_hilbert";
    case OrderId::axis_x: return "axis_x";
    case OrderId::axis_y: return "axis_y";
    case OrderId::axis_z: return "axis_z";
  }
  return "unknown";
}

TokenSequence gather_sequence(const TokenSequence& seq, const std::vector<std::size_t>& rows,
                              std::size_t out_len) {
  const std::size_t B = seq.batch(), T = seq.length();
  TokenSequence out;
  out.tokens = gather_rows(seq.tokens, rows, out_len);
  out.centers = DenseArray({B, out_len, 3});
  out.order.resize(B * out_len);
  out.source.resize(B * out_len);
  if (!seq.mask.empty()) out.mask.resize(B * out_len);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < out_len; ++t) {
      const std::size_t from = b * T + rows[b * out_len + t], to = b * out_len + t;
      for (int k = 0; k < 3; ++k) out.centers[to * 3 + k] = seq.centers[from * 3 + k];
      out.order[to] = seq.order[from];
      out.source[to] = seq.source[from];
      if (!seq.mask.empty()) out.mask[to] = seq.mask[from];
    }
  return out;
}

PatchEncoder::PatchEncoder(ParamStore& store, const std::string& prefix,
                           const PatchEncoderConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  w1_ = store.add_uniform(prefix + ".mlp1.fc1.weight", {3, cfg.hidden1}, 3, rng);
  b1_ = store.add(prefix + ".mlp1.fc1.bias", DenseArray({cfg.hidden1}, 0.0));
  n1_g_ = store.add(prefix + ".mlp1.norm.gamma", DenseArray({cfg.hidden1}, 1.0));
  n1_b_ = store.add(prefix + ".mlp1.norm.beta", DenseArray({cfg.hidden1}, 0.0));
  w2_ = store.add_uniform(prefix + ".mlp1.fc2.weight", {cfg.hidden1, cfg.hidden2}, cfg.hidden1, rng);
  b2_ = store.add(prefix + ".mlp1.fc2.bias", DenseArray({cfg.hidden2}, 0.0));
  w3_ = store.add_uniform(prefix + ".mlp2.fc1.weight", {2 * cfg.hidden2, cfg.hidden3},
                          2 * cfg.hidden2, rng);
  b3_ = store.add(prefix + ".mlp2.fc1.bias", DenseArray({cfg.hidden3}, 0.0));
  n3_g_ = store.add(prefix + ".mlp2.norm.gamma", DenseArray({cfg.hidden3}, 1.0));
  n3_b_ = store.add(prefix + ".mlp2.norm.beta", DenseArray({cfg.hidden3}, 0.0));
  w4_ = store.add_uniform(prefix + ".mlp2.fc2.weight", {cfg.hidden3, cfg.out}, cfg.hidden3, rng);
  b4_ = store.add(prefix + ".mlp2.fc2.bias", DenseArray({cfg.out}, 0.0));
}

Value PatchEncoder::forward(const Value& neighborhoods) const {
  if (neighborhoods.rank() != 4 || neighborhoods.dim(3) != 3)
    throw ShapeError("PatchEncoder: expected [B, G, S, 3], got " + to_string(neighborhoods.shape()));
  const std::size_t B = neighborhoods.dim(0), G = neighborhoods.dim(1), S = neighborhoods.dim(2);
  Value x = reshape(neighborhoods, {B * G, S, 3});
  Value f = linear(relu(layer_norm(linear(x, w1_, b1_), n1_g_, n1_b_)), w2_, b2_);                // [BG, S, h2]
  Value pooled = reshape(max_dim(f, 1), {B * G, 1, cfg_.hidden2});
  Value joined = concat({expand_dim(pooled, 1, S), f}, 2);               // [BG, S, 2*h2]
  Value h = linear(relu(layer_norm(linear(joined, w3_, b3_), n3_g_, n3_b_)), w4_, b4_);           // [BG, S, out]
  return reshape(max_dim(h, 1), {B, G, cfg_.out});
}

TokenSequence patch_encode(const PatchSet& patches, const PatchEncoder& encoder) {
  const std::size_t B = patches.batch(), G = patches.groups();
  TokenSequence seq;
  seq.tokens = encoder.forward(Value::constant(patches.neighborhoods));
  seq.centers = patches.centers;
  seq.order.assign(B * G, OrderId::raw);
  seq.source.resize(B * G);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t g = 0; g < G; ++g) seq.source[b * G + g] = g;
  return seq;
}

}  // namespace pointlama
