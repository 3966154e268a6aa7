#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "pointlama/mamba.hpp"

using namespace pointlama;
using pointlama::testing::grad_check;
using pointlama::testing::weighted_sum;

namespace {

ScanInputs random_scan(std::size_t B, std::size_t T, std::size_t C, std::size_t N, std::uint64_t seed) {
  Rng rng(seed);
  ScanInputs in;
  in.x = rng.uniform_array({B, T, C}, -1, 1);
  in.delta = rng.uniform_array({B, T, C}, 0.01, 0.5);
  in.A = rng.uniform_array({C, N}, -2, -0.1);
  in.Bm = rng.uniform_array({B, T, N}, -1, 1);
  in.Cm = rng.uniform_array({B, T, N}, -1, 1);
  in.D = rng.uniform_array({C}, -1, 1);
  return in;
}

// Direct transcription of h_t = exp(dA) h + (exp(dA)-1)/A B x, y = C.h + D x.
DenseArray unrolled(const ScanInputs& in) {
  const std::size_t B = in.x.dim(0), T = in.x.dim(1), C = in.x.dim(2), N = in.A.dim(1);
  DenseArray y(in.x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> h(N, 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        const double x = in.x.at({b, t, c}), dt = in.delta.at({b, t, c});
        double acc = in.D[c] * x;
        for (std::size_t n = 0; n < N; ++n) {
          const double a = in.A.at({c, n});
          h[n] = std::exp(dt * a) * h[n] + (std::exp(dt * a) - 1) / a * in.Bm.at({b, t, n}) * x;
          acc += in.Cm.at({b, t, n}) * h[n];
        }
        y.at({b, t, c}) = acc;
      }
    }
  return y;
}

double max_rel_diff(const DenseArray& a, const DenseArray& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-8));
  return m;
}

MambaConfig tiny_mamba() {
  MambaConfig cfg;
  cfg.d_model = 4;
  cfg.d_state = 3;
  cfg.expand = 2;
  cfg.conv_kernel = 3;
  return cfg;
}

}  // namespace

TEST(Discretize, Limits) {
  const auto small = discretize(-1.3, 0.7, 1e-12);
  EXPECT_NEAR(small.a_bar, 1.0, 1e-11);
  EXPECT_NEAR(small.b_bar, 0.0, 1e-11);
  EXPECT_DOUBLE_EQ(discretize(-1.0, 1.0, std::log(2.0)).a_bar, 0.5);
}

TEST(Discretize, MatchesQuadrature) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const double A = rng.uniform(-3, -0.05), Bv = rng.uniform(-2, 2), dt = rng.uniform(0.001, 2);
    // Composite Simpson on int_0^dt exp(sA) B ds.
    const int n = 2000;
    const double h = dt / n;
    double s = 0;
    for (int i = 0; i <= n; ++i) {
      const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
      s += w * std::exp(i * h * A) * Bv;
    }
    s *= h / 3;
    const double b_bar = discretize(A, Bv, dt).b_bar;
    EXPECT_LE(std::abs(b_bar - s) / std::abs(s), 1e-6);
  }
}

TEST(Scan, SequentialMatchesUnrolled) {
  const auto in = random_scan(2, 16, 3, 4, 2);
  const DenseArray y = selective_scan_sequential(in);
  const DenseArray ref = unrolled(in);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Scan, SingleStep) {
  const auto in = random_scan(1, 1, 2, 3, 3);
  const DenseArray y = selective_scan_sequential(in);
  for (std::size_t c = 0; c < 2; ++c) {
    double expect = in.D[c] * in.x[c];
    for (std::size_t n = 0; n < 3; ++n)
      expect += in.Cm[n] * discretize(in.A.at({c, n}), in.Bm[n], in.delta[c]).b_bar * in.x[c];
    EXPECT_NEAR(y[c], expect, 1e-15);
  }
}

TEST(Scan, MemorylessLimit) {
  auto in = random_scan(1, 6, 2, 3, 4);
  in.delta.fill(1e4);
  const DenseArray y = selective_scan_sequential(in);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 2; ++c) {
      double expect = in.D[c] * in.x.at({0, t, c});
      for (std::size_t n = 0; n < 3; ++n) expect += in.Cm.at({0, t, n}) * (-1.0 / in.A.at({c, n})) * in.Bm.at({0, t, n}) * in.x.at({0, t, c});
      EXPECT_NEAR(y.at({0, t, c}), expect, 1e-12);
    }
}

TEST(Scan, ParallelMatchesSequential) {
  for (std::size_t T : {1u, 2u, 3u, 17u, 256u}) {
    const auto in = random_scan(2, T, 3, 4, 10 + T);
    EXPECT_LE(max_rel_diff(selective_scan_parallel(in), selective_scan_sequential(in)), 1e-10) << "T=" << T;
  }
}

TEST(Scan, ParallelIsReproducible) {
  const auto in = random_scan(1, 100, 4, 4, 5);
  EXPECT_EQ(selective_scan_parallel(in), selective_scan_parallel(in));
}

TEST(Scan, CombineIsAssociative) {
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const ScanElement e1{rng.uniform(0, 1), rng.uniform(-1, 1)}, e2{rng.uniform(0, 1), rng.uniform(-1, 1)},
        e3{rng.uniform(0, 1), rng.uniform(-1, 1)};
    const auto l = combine(combine(e1, e2), e3), r = combine(e1, combine(e2, e3));
    EXPECT_NEAR(l.a, r.a, 1e-12);
    EXPECT_NEAR(l.b, r.b, 1e-12);
  }
}

TEST(Scan, InclusiveScanMatchesFold) {
  Rng rng(7);
  for (std::size_t n : {1u, 2u, 5u, 8u, 33u}) {
    std::vector<ScanElement> e(n);
    for (auto& x : e) x = {rng.uniform(0, 1), rng.uniform(-1, 1)};
    std::vector<ScanElement> fold(n);
    ScanElement acc = e[0];
    fold[0] = acc;
    for (std::size_t i = 1; i < n; ++i) fold[i] = acc = combine(acc, e[i]);
    associative_scan_inclusive(e);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(e[i].a, fold[i].a, 1e-13);
      EXPECT_NEAR(e[i].b, fold[i].b, 1e-13);
    }
  }
}

TEST(Scan, StableOverLongSequence) {
  auto in = random_scan(1, 10000, 2, 3, 8);
  const DenseArray y = selective_scan_parallel(in);
  // |h| <= max|Bbar x| / (1 - max Abar) with Abar <= exp(0.01 * -0.1).
  double bound = 0;
  for (std::size_t c = 0; c < 2; ++c) bound += std::abs(in.D[c]);
  bound += 3 * 1.0 * (0.5 / (1 - std::exp(0.01 * -0.1)));
  for (double v : y.data()) {
    ASSERT_TRUE(std::isfinite(v));
    EXPECT_LE(std::abs(v), bound);
  }
}

TEST(Scan, Gradient) {
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    const auto in = random_scan(2, 5, 2, 3, 9);
    std::vector<Value> inputs;
    for (const DenseArray* a : {&in.x, &in.delta, &in.A, &in.Bm, &in.Cm, &in.D}) inputs.push_back(Value::parameter(*a));
    EXPECT_GRAD_OK(grad_check(
        [mode](const auto& v) { return weighted_sum(selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], mode)); },
        inputs));
  }
}

TEST(MambaBlock, ZeroInputPassesThrough) {
  ParamStore store;
  Rng rng(10);
  const MambaBlock block(store, "m", tiny_mamba(), rng);
  const DenseArray z({2, 5, 4});
  EXPECT_EQ(block.forward(Value::constant(z)).value(), z);
}

TEST(MambaBlock, Causal) {
  ParamStore store;
  Rng rng(11);
  const MambaBlock block(store, "m", tiny_mamba(), rng);
  const DenseArray x = rng.uniform_array({1, 8, 4}, -1, 1);
  const DenseArray base = block.forward(Value::constant(x)).value();
  for (std::size_t t = 0; t < 8; ++t) {
    DenseArray xp = x;
    for (std::size_t c = 0; c < 4; ++c) xp.at({0, t, c}) += 0.7 + 0.1 * static_cast<double>(c);
    const DenseArray y = block.forward(Value::constant(xp)).value();
    for (std::size_t s = 0; s < 8; ++s) {
      bool same = true;
      for (std::size_t c = 0; c < 4; ++c) same = same && y.at({0, s, c}) == base.at({0, s, c});
      if (s < t) EXPECT_TRUE(same) << "position " << s << " saw a change at " << t;
      if (s == t) EXPECT_FALSE(same);
    }
  }
}

TEST(MambaBlock, ParallelModeAgrees) {
  ParamStore s1, s2;
  Rng r1(12), r2(12);
  auto cfg = tiny_mamba();
  const MambaBlock seq(s1, "m", cfg, r1);
  cfg.scan = ScanMode::parallel;
  const MambaBlock par(s2, "m", cfg, r2);
  const Value x = Value::constant(Rng(13).uniform_array({2, 9, 4}, -1, 1));
  EXPECT_LE(max_rel_diff(par.forward(x).value(), seq.forward(x).value()), 1e-10);
}

TEST(MambaBlock, GradientAllParameters) {
  ParamStore store;
  Rng rng(14);
  // Larger steps so dL/dA_log is well above finite-difference roundoff.
  auto cfg = tiny_mamba();
  cfg.dt_min = 0.1;
  cfg.dt_max = 1.0;
  const MambaBlock block(store, "m", cfg, rng);
  Value a_log = store.get("m.A_log");
  a_log.mutable_value() = rng.uniform_array(a_log.shape(), -1.5, 0.0);
  std::vector<Value> inputs{pointlama::testing::param(rng, {2, 5, 4})};
  for (const auto& e : store.entries()) inputs.push_back(e.value);
  // The branch carries every parameter gradient without the O(1) identity term.
  EXPECT_GRAD_OK(grad_check([&](const auto& v) { return weighted_sum(block.branch(v[0])); }, inputs));
  EXPECT_GRAD_OK(grad_check([&](const auto& v) { return weighted_sum(block.forward(v[0])); }, {inputs[0]}));
}

TEST(MambaBlock, ParameterNames) {
  ParamStore store;
  Rng rng(15);
  const MambaBlock block(store, "layer", tiny_mamba(), rng);
  EXPECT_TRUE(store.contains("layer.A_log"));
  EXPECT_TRUE(store.contains("layer.in_proj.weight"));
  // A = -exp(A_log) is strictly negative.
  for (double v : store.get("layer.A_log").value().data()) EXPECT_TRUE(std::isfinite(v));
}
