#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "pointlama/config.hpp"
#include "pointlama/encoder.hpp"
#include "pointlama/optim.hpp"

using namespace pointlama;
using pointlama::testing::grad_check;
using pointlama::testing::weighted_sum;

namespace {

EncoderConfig tiny_encoder(std::size_t depth = 3, std::set<std::size_t> pmla = {1}) {
  EncoderConfig e;
  e.depth = depth;
  e.pmla_positions = std::move(pmla);
  e.d_model = 8;
  e.latent = 4;
  e.heads = 2;
  e.head_dim = 4;
  e.d_state = 3;
  e.expand = 2;
  e.conv_kernel = 3;
  e.ffn_hidden = 12;
  e.pos_hidden = 6;
  e.patch = {6, 8, 10, 8};
  return e;
}

TokenSequence random_sequence(std::size_t B, std::size_t T, std::size_t C, Rng& rng, bool learnable = false) {
  TokenSequence s;
  DenseArray tok = rng.uniform_array({B, T, C}, -1, 1);
  s.tokens = learnable ? Value::parameter(std::move(tok)) : Value::constant(std::move(tok));
  s.centers = rng.uniform_array({B, T, 3}, -1, 1);
  for (std::size_t i = 0; i < B * T; ++i) {
    s.order.push_back(i % 2 ? OrderId::trans_hilbert : OrderId::hilbert);
    s.source.push_back(i % T);
  }
  return s;
}

// Walks the registered parameters and sums their sizes.
std::size_t brute_force_count(const ParamStore& store) {
  std::size_t n = 0;
  for (const auto& e : store.entries())
    if (e.name.find("running_") == std::string::npos) n += e.value.size();
  return n;
}

}  // namespace

TEST(HybridEncoder, LayerLayout) {
  const auto bundle = build_encoder(full_encoder(), 0);
  const auto& enc = *bundle.encoder;
  EXPECT_EQ(enc.depth(), 12u);
  EXPECT_EQ(enc.mamba_layer_count(), 11u);
  EXPECT_EQ(enc.latent_layer_count(), 1u);
  EXPECT_TRUE(enc.is_latent(6));
  EXPECT_NE(enc.latent_layer(6), nullptr);
  EXPECT_EQ(enc.mamba_layer(6), nullptr);
  EXPECT_NE(enc.mamba_layer(0), nullptr);
}

TEST(HybridEncoder, EmptyPlacementIsPureMamba) {
  const auto bundle = build_encoder(tiny_encoder(4, {}), 1);
  EXPECT_EQ(bundle.encoder->mamba_layer_count(), 4u);
  for (const auto& e : bundle.params.entries()) EXPECT_EQ(e.name.find("attn"), std::string::npos) << e.name;
}

TEST(HybridEncoder, ConfigValidation) {
  auto cfg = tiny_encoder();
  cfg.pmla_positions = {3};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_encoder();
  cfg.patch.out = 7;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_encoder();
  cfg.depth = 0;
  cfg.pmla_positions.clear();
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(HybridEncoder, DeterministicForSeed) {
  const auto a = build_encoder(tiny_encoder(), 5), b = build_encoder(tiny_encoder(), 5);
  Rng rng(6);
  const auto seq = random_sequence(2, 7, 8, rng);
  EXPECT_EQ(a.encoder->encode(seq).value(), b.encoder->encode(seq).value());
  const auto c = build_encoder(tiny_encoder(), 7);
  EXPECT_NE(a.encoder->encode(seq).value(), c.encoder->encode(seq).value());
}

TEST(HybridEncoder, ShapesIncludingSingleToken) {
  const auto bundle = build_encoder(tiny_encoder(), 8);
  Rng rng(9);
  for (std::size_t T : {1u, 5u, 64u}) {
    const auto seq = random_sequence(3, T, 8, rng);
    const Value y = bundle.encoder->encode(seq);
    EXPECT_EQ(y.shape(), (Shape{3, T, 8}));
    for (double v : y.value().data()) ASSERT_TRUE(std::isfinite(v));
  }
  auto bad = random_sequence(1, 4, 6, rng);
  EXPECT_THROW(bundle.encoder->encode(bad), ShapeError);
}

TEST(HybridEncoder, BatchRowsAreIndependent) {
  const auto bundle = build_encoder(tiny_encoder(), 10);
  Rng rng(11);
  const auto one = random_sequence(1, 6, 8, rng);
  TokenSequence two = one;
  DenseArray tok({2, 6, 8}), cen({2, 6, 3});
  for (std::size_t i = 0; i < 48; ++i) tok[i] = tok[48 + i] = one.tokens.value()[i];
  for (std::size_t i = 0; i < 18; ++i) cen[i] = cen[18 + i] = one.centers[i];
  two.tokens = Value::constant(tok);
  two.centers = cen;
  two.order.insert(two.order.end(), one.order.begin(), one.order.end());
  two.source.insert(two.source.end(), one.source.begin(), one.source.end());
  const DenseArray y1 = bundle.encoder->encode(one).value();
  const DenseArray y2 = bundle.encoder->encode(two).value();
  for (std::size_t i = 0; i < 48; ++i) {
    EXPECT_NEAR(y2[i], y1[i], 1e-14);
    EXPECT_NEAR(y2[48 + i], y1[i], 1e-14);
  }
}

TEST(HybridEncoder, TraceMatchesEncode) {
  const auto bundle = build_encoder(tiny_encoder(), 12);
  Rng rng(13);
  const auto seq = random_sequence(2, 5, 8, rng);
  const auto tr = bundle.encoder->trace(seq);
  EXPECT_EQ(tr.inputs.size(), 3u);
  EXPECT_EQ(tr.output.value(), bundle.encoder->encode(seq).value());
}

TEST(HybridEncoder, DepthThreeGradient) {
  ParamStore store;
  Rng rng(14);
  const HybridEncoder enc(tiny_encoder(), store, rng);
  // Move every parameter off its initial value so no gradient is trivially zero.
  for (const auto& e : store.entries()) {
    Value v = e.value;
    for (double& x : v.mutable_value().data()) x += rng.uniform(-0.2, 0.2);
    // Larger steps and slower decay keep dL/dA_log above finite-difference roundoff.
    if (e.name.ends_with("dt_proj.bias")) v.mutable_value() = rng.uniform_array(v.shape(), -2.0, 0.5);
    if (e.name.ends_with("A_log")) v.mutable_value() = rng.uniform_array(v.shape(), -1.5, 0.0);
  }
  auto seq = random_sequence(2, 5, 8, rng, true);
  std::vector<Value> inputs{seq.tokens};
  for (const auto& e : store.entries()) inputs.push_back(e.value);
  // Deep-layer A_log gradients sit near 1e-7; a wider step keeps roundoff below them.
  EXPECT_GRAD_OK(grad_check(
      [&](const auto& v) {
        TokenSequence s = seq;
        s.tokens = v[0];
        return weighted_sum(enc.encode(s));
      },
      inputs, 1, 1e-4));
}

TEST(ParamCount, MatchesStoreForFullConfig) {
  const auto cfg = full_encoder();
  ParamStore store;
  Rng rng(0);
  const HybridEncoder enc(cfg, store, rng);
  ClassificationHead head(store, "head", cfg.d_model, 256, 15, rng);
  const auto p = param_count(cfg, 15, 256);
  EXPECT_EQ(store.scalar_count("encoder."), p.backbone());
  EXPECT_EQ(store.scalar_count("head."), p.cls_head);
  EXPECT_EQ(store.scalar_count(), brute_force_count(store));
  EXPECT_EQ(store.scalar_count(), p.total());
}

TEST(ParamCount, MatchesStoreForSmallConfigs) {
  for (const auto& cfg : {tiny_encoder(), tiny_encoder(5, {}), tiny_encoder(4, {0, 3}), desk_config().encoder}) {
    ParamStore store;
    Rng rng(1);
    const HybridEncoder enc(cfg, store, rng);
    ClassificationHead head(store, "head", cfg.d_model, 16, 4, rng);
    EXPECT_EQ(store.scalar_count(), param_count(cfg, 4, 16).total());
  }
}

TEST(ParamCount, LinearFormula) {
  EXPECT_EQ(linear_param_count(3, 5), 20u);
  EXPECT_EQ(linear_param_count(1, 1), 2u);
}

TEST(ParamCount, FullScaleBudget) {
  const double params = static_cast<double>(param_count(full_encoder(), 15, 256).total());
  EXPECT_NEAR(params / 12.8e6, 1.0, 0.15);
  // Backbone only, one token per patch (G = 128).
  const double flops = flop_estimate(full_encoder(), 128, 15, 256).total();
  EXPECT_NEAR(flops / 3.2e9, 1.0, 0.30);
}

TEST(FlopEstimate, ScalesWithSequenceLength) {
  const auto cfg = full_encoder();
  const double a = flop_estimate(cfg, 64, 15).mamba_layers, b = flop_estimate(cfg, 128, 15).mamba_layers;
  EXPECT_NEAR(b / a, 2.0, 1e-12);
  EXPECT_GT(flop_estimate(cfg, 128, 15).latent_layers, 0.0);
  EXPECT_EQ(flop_estimate(tiny_encoder(3, {}), 16, 4).latent_layers, 0.0);
}

TEST(Placement, FixedIndices) {
  EXPECT_EQ(pmla_placement_index("early", 12), 1u);
  EXPECT_EQ(pmla_placement_index("middle", 12), 6u);
  EXPECT_EQ(pmla_placement_index("late", 12), 10u);
  EXPECT_LT(pmla_placement_index("late", 3), 3u);
  EXPECT_THROW(pmla_placement_index("top", 12), std::invalid_argument);
}

TEST(ClassificationHead, UniformFeaturesGiveIdenticalLogits) {
  ParamStore store;
  Rng rng(20);
  const ClassificationHead head(store, "h", 8, 16, 4, rng);
  DenseArray f({2, 5, 8});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t c = 0; c < 8; ++c) f.at({b, t, c}) = 0.1 * static_cast<double>(c);
  const DenseArray y = head.forward(Value::constant(f)).value();
  EXPECT_EQ(y.shape(), (Shape{2, 4}));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(y.at({0, k}), y.at({1, k}));
}

TEST(ClassificationHead, PooledIsMaxThenMean) {
  ParamStore store;
  Rng rng(21);
  const ClassificationHead head(store, "h", 2, 4, 3, rng);
  const DenseArray f({1, 3, 2}, std::vector<double>{1, -1, 3, 0, 2, 4});
  const DenseArray p = head.pooled(Value::constant(f)).value();
  EXPECT_EQ(p, DenseArray({1, 4}, std::vector<double>{3, 4, 2, 1}));
}

TEST(ClassificationHead, FitsSmallBatch) {
  ParamStore store;
  Rng rng(22);
  const ClassificationHead head(store, "h", 8, 32, 4, rng);
  const DenseArray f = rng.uniform_array({8, 6, 8}, -1, 1);
  const std::vector<std::size_t> labels{0, 1, 2, 3, 0, 1, 2, 3};
  AdamW opt;
  opt.add_store(store);
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    backward(cross_entropy(head.forward(Value::constant(f), true), labels));
    opt.step(1e-2);
  }
  const DenseArray logits = head.forward(Value::constant(f), false).value();
  for (std::size_t b = 0; b < 8; ++b) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (logits.at({b, k}) > logits.at({b, arg})) arg = k;
    EXPECT_EQ(arg, labels[b]);
  }
}

TEST(BatchNorm, TrainingStandardizesAndTracksStatistics) {
  ParamStore store;
  const BatchNorm bn(store, "bn", 2, 0.5);
  const DenseArray x({4, 2}, std::vector<double>{1, 10, 3, 10, 5, 10, 7, 10});
  const DenseArray y = bn.forward(Value::constant(x), true).value();
  double m = 0, v = 0;
  for (std::size_t i = 0; i < 4; ++i) m += y.at({i, 0}) / 4;
  for (std::size_t i = 0; i < 4; ++i) v += (y.at({i, 0}) - m) * (y.at({i, 0}) - m) / 4;
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(v, 1.0, 1e-4);
  EXPECT_NEAR(y.at({0, 1}), 0.0, 1e-12);
  // Batch mean 4, biased variance 5; momentum 0.5 from (0, 1).
  EXPECT_DOUBLE_EQ(bn.running_mean.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(bn.running_mean.value()[1], 5.0);
  EXPECT_DOUBLE_EQ(bn.running_var.value()[0], 3.0);
  EXPECT_DOUBLE_EQ(bn.running_var.value()[1], 0.5);
  EXPECT_EQ(store.scalar_count(), 4u);
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  ParamStore store;
  BatchNorm bn(store, "bn", 1);
  bn.running_mean.mutable_value()[0] = 2.0;
  bn.running_var.mutable_value()[0] = 4.0;
  const DenseArray y = bn.forward(Value::constant(DenseArray({2, 1}, std::vector<double>{2, 6})), false).value();
  EXPECT_NEAR(y[0], 0.0, 1e-12);
  EXPECT_NEAR(y[1], 2.0, 1e-5);
  const DenseArray again = bn.forward(Value::constant(DenseArray({1, 1}, std::vector<double>{6})), false).value();
  EXPECT_EQ(again[0], y[1]);
}

TEST(SegmentationHead, NearestCenterAssignment) {
  const DenseArray centers({1, 2, 3}, std::vector<double>{0, 0, 0, 1, 0, 0});
  const DenseArray points({1, 3, 3}, std::vector<double>{0.1, 0, 0, 0.9, 0, 0, 0.5, 0, 0});
  EXPECT_EQ(nearest_center_assignment(centers, points), (std::vector<std::size_t>{0, 1, 0}));
}

TEST(SegmentationHead, ShapeAndGradient) {
  ParamStore store;
  Rng rng(23);
  const SegmentationHead head(store, "s", 4, 6, 3, rng);
  const DenseArray centers = rng.uniform_array({2, 3, 3}, -1, 1);
  const DenseArray points = rng.uniform_array({2, 5, 3}, -1, 1);
  std::vector<Value> inputs{pointlama::testing::param(rng, {2, 3, 4})};
  for (const auto& e : store.entries())
    if (e.name.find("running_") == std::string::npos) inputs.push_back(e.value);
  EXPECT_EQ(head.forward(inputs[0], centers, points).shape(), (Shape{2, 5, 3}));
  EXPECT_GRAD_OK(grad_check(
      [&](const auto& v) { return weighted_sum(head.forward(v[0], centers, points, false)); }, inputs));
  // Batch statistics cancel the fc1 bias, so training mode is checked on the features.
  EXPECT_GRAD_OK(grad_check(
      [&](const auto& v) { return weighted_sum(head.forward(v[0], centers, points, true)); }, {inputs[0]}));
}
