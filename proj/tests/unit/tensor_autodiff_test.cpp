#include <cmath>
#include <stdexcept>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "pointlama/ops.hpp"

using namespace pointlama;
using pointlama::testing::grad_check;
using pointlama::testing::param;
using pointlama::testing::weighted_sum;

namespace {

Value c(Shape s, std::vector<double> d) { return Value::constant(DenseArray(std::move(s), std::move(d))); }

}  // namespace

TEST(DenseArray, ShapeInvariants) {
  DenseArray a({2, 3}, 1.5);
  EXPECT_EQ(a.size(), 6u);
  EXPECT_EQ(a.at({1, 2}), 1.5);
  EXPECT_THROW(DenseArray({2, 0}), ShapeError);
  EXPECT_THROW(DenseArray({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(a.reshaped({4}), ShapeError);
  EXPECT_EQ(a.reshaped({3, 2}).dim(0), 3u);
}

TEST(Matmul, IdentityLeavesMatrix) {
  Rng rng(1);
  const DenseArray A = rng.uniform_array({3, 3}, -1, 1);
  const Value I = c({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(matmul(I, Value::constant(A)).value(), A);
}

TEST(Matmul, HandComputed) {
  const Value y = matmul(c({2, 2}, {1, 2, 3, 4}), c({2, 1}, {1, 1}));
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y.value()[0], 3.0);
  EXPECT_EQ(y.value()[1], 7.0);
}

TEST(Matmul, ShapeMismatchNamesDims) {
  try {
    matmul(c({2, 3}, std::vector<double>(6)), c({2, 2}, std::vector<double>(4)));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, Gradient) {
  Rng rng(2);
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return sum(matmul(in[0], in[1])); },
                            {param(rng, {4, 5}), param(rng, {5, 2})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(matmul(in[0], in[1])); },
                            {param(rng, {2, 3, 4}), param(rng, {2, 4, 2})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(matmul(in[0], in[1])); },
                            {param(rng, {2, 3, 4}), param(rng, {4, 2})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(linear(in[0], in[1], in[2])); },
                            {param(rng, {2, 3, 4}), param(rng, {4, 5}), param(rng, {5})}));
}

TEST(Conv1d, IdentityKernel) {
  Rng rng(3);
  const DenseArray x = rng.uniform_array({2, 5, 3}, -1, 1);
  DenseArray w({1, 3, 3});
  for (std::size_t i = 0; i < 3; ++i) w.at({0, i, i}) = 1;
  const Value y = conv1d(Value::constant(x), Value::constant(w), {}, Padding::same);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv1d, ImpulseResponse) {
  DenseArray x({1, 6, 1});
  x.at({0, 2, 0}) = 1;
  const Value w = c({3, 1, 1}, {0.5, -2.0, 3.0});
  const Value y = conv1d(Value::constant(x), w, {}, Padding::same);
  // y_t = sum_j w_j x_{t+j-1}; the impulse at t=2 shows the kernel reversed.
  EXPECT_EQ(y.value()[1], 3.0);
  EXPECT_EQ(y.value()[2], -2.0);
  EXPECT_EQ(y.value()[3], 0.5);
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[4], 0.0);
}

TEST(Conv1d, Errors) {
  const Value x = c({1, 2, 1}, {1, 2});
  EXPECT_THROW(conv1d(x, c({3, 1, 1}, {1, 1, 1}), {}, Padding::valid), std::invalid_argument);
  EXPECT_THROW(conv1d(x, c({2, 1, 1}, {1, 1}), {}, Padding::same), std::invalid_argument);
  EXPECT_EQ(conv1d(x, c({2, 1, 1}, {1, 1}), {}, Padding::valid).dim(1), 1u);
}

TEST(Conv1d, Gradient) {
  Rng rng(4);
  for (Padding p : {Padding::same, Padding::valid, Padding::causal}) {
    EXPECT_GRAD_OK(grad_check(
        [p](const auto& in) { return weighted_sum(conv1d(in[0], in[1], in[2], p)); },
        {param(rng, {2, 6, 3}), param(rng, {3, 3, 2}), param(rng, {2})}));
    EXPECT_GRAD_OK(grad_check(
        [p](const auto& in) { return weighted_sum(depthwise_conv1d(in[0], in[1], in[2], p)); },
        {param(rng, {2, 6, 3}), param(rng, {3, 3}), param(rng, {3})}));
  }
}

TEST(Softmax, Examples) {
  EXPECT_EQ(softmax_lastdim(c({1}, {4.2})).value()[0], 1.0);
  const Value u = softmax_lastdim(c({3}, {0, 0, 0}));
  for (double v : u.value().data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  const Value big = softmax_lastdim(c({3}, {1000, 0, 0}));
  EXPECT_TRUE(std::isfinite(big.value()[0]));
  EXPECT_NEAR(big.value()[0], 1.0, 1e-300);
  EXPECT_NEAR(big.value()[1], std::exp(-1000.0), 1e-300);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(5);
  const Value y = softmax_lastdim(Value::constant(rng.uniform_array({7, 11}, -30, 30)));
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 11; ++j) s += y.value()[r * 11 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, Gradient) {
  Rng rng(6);
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(softmax_lastdim(in[0])); },
                            {param(rng, {3, 5})}));
}

TEST(LayerNorm, Examples) {
  const Value z = layer_norm(c({4}, {2, 2, 2, 2}));
  for (double v : z.value().data()) EXPECT_EQ(v, 0.0);
  const Value y = layer_norm(c({2}, {1, 3}), c({2}, {1, 1}), c({2}, {0, 0}));
  EXPECT_NEAR(y.value()[0], -1.0, 1e-5);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-5);
}

TEST(LayerNorm, Gradient) {
  Rng rng(7);
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2])); },
                            {param(rng, {3, 6}), param(rng, {6}), param(rng, {6})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(layer_norm(in[0])); },
                            {param(rng, {2, 2, 5})}));
}

TEST(BatchStandardize, StatisticsAndGradient) {
  Rng rng(8);
  DenseArray mu, var;
  const Value y = batch_standardize(Value::constant(rng.uniform_array({4, 5, 3}, -2, 3)), &mu, &var);
  ASSERT_EQ(mu.size(), 3u);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 20; ++i) m += y.value()[i * 3 + ch];
    m /= 20;
    for (std::size_t i = 0; i < 20; ++i) v += std::pow(y.value()[i * 3 + ch] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 20, var[ch] / (var[ch] + kLayerNormEps), 1e-12);
  }
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(batch_standardize(in[0])); },
                            {param(rng, {6, 4})}));
}

TEST(Activations, Examples) {
  EXPECT_EQ(sigmoid(c({1}, {0})).item(), 0.5);
  Rng rng(9);
  const DenseArray x = rng.uniform_array({3, 4}, -1, 1);
  EXPECT_EQ(mul(Value::constant(x), Value::constant(DenseArray({3, 4}, 1.0))).value(), x);
  EXPECT_THROW(mul(c({2}, {1, 2}), c({3}, {1, 2, 3})), ShapeError);
  EXPECT_THROW(add(c({2}, {1, 2}), c({3}, {1, 2, 3})), ShapeError);
  EXPECT_DOUBLE_EQ(silu(c({1}, {1})).item(), 1.0 / (1.0 + std::exp(-1.0)));
  EXPECT_DOUBLE_EQ(softplus(c({1}, {0})).item(), std::log(2.0));
}

TEST(Activations, Gradients) {
  Rng rng(10);
  using F = Value (*)(const Value&);
  for (F op : {F(sigmoid), F(silu), F(relu), F(gelu), F(exp), F(softplus), F(square), F(neg)}) {
    EXPECT_GRAD_OK(grad_check([op](const auto& in) { return weighted_sum(op(in[0])); }, {param(rng, {4, 5})}));
  }
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(mul(in[0], in[1])); },
                            {param(rng, {3, 4}), param(rng, {3, 4})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(sub(add(in[0], in[1]), scale(in[1], 0.5))); },
                            {param(rng, {3, 4}), param(rng, {3, 4})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(mul_trailing(add_trailing(in[0], in[1]), in[2])); },
                            {param(rng, {2, 3, 4}), param(rng, {4}), param(rng, {3, 4})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(add_scalar(scale(in[0], -2.5), 0.3)); },
                            {param(rng, {5})}));
}

TEST(Reductions, Gradients) {
  Rng rng(11);
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return mean(in[0]); }, {param(rng, {3, 4})}));
  for (std::size_t axis : {0u, 1u, 2u}) {
    EXPECT_GRAD_OK(grad_check([axis](const auto& in) { return weighted_sum(max_dim(in[0], axis)); },
                              {param(rng, {2, 3, 4})}));
    EXPECT_GRAD_OK(grad_check([axis](const auto& in) { return weighted_sum(mean_dim(in[0], axis)); },
                              {param(rng, {2, 3, 4})}));
  }
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(expand_dim(in[0], 1, 4)); },
                            {param(rng, {2, 1, 3})}));
}

TEST(Reductions, MaxTiesRouteToLowestIndex) {
  const Value x = Value::parameter(DenseArray({1, 3}, std::vector<double>{2, 2, 1}));
  backward(sum(max_dim(x, 1)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Layout, Gradients) {
  Rng rng(12);
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(reshape(in[0], {4, 3})); },
                            {param(rng, {2, 6})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(permute(in[0], {2, 0, 1})); },
                            {param(rng, {2, 3, 4})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(slice_lastdim(in[0], 1, 3)); },
                            {param(rng, {2, 4})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(concat({in[0], in[1]}, 1)); },
                            {param(rng, {2, 3, 2}), param(rng, {2, 1, 2})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(gather_rows(in[0], {2, 0, 2, 1, 1, 0}, 3)); },
                            {param(rng, {2, 3, 2})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return weighted_sum(embedding(in[0], {1, 0, 1, 2}, {2, 2})); },
                            {param(rng, {3, 5})}));
}

TEST(Permute, MatchesIndexing) {
  Rng rng(13);
  const DenseArray x = rng.uniform_array({2, 3, 4}, -1, 1);
  const DenseArray y = permute(Value::constant(x), {2, 0, 1}).value();
  EXPECT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(y.at({k, a, b}), x.at({a, b, k}));
}

TEST(Losses, Gradients) {
  Rng rng(14);
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return cross_entropy(in[0], {2, 0, 1}); },
                            {param(rng, {3, 4})}));
  EXPECT_GRAD_OK(grad_check([](const auto& in) { return mse(in[0], in[1]); },
                            {param(rng, {3, 4}), param(rng, {3, 4})}));
}

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(cross_entropy(c({2, 4}, std::vector<double>(8, 0.3)), {1, 3}).item(), std::log(4.0), 1e-14);
}

TEST(Backward, Examples) {
  Rng rng(15);
  const Value x = param(rng, {3, 2});
  backward(sum(x));
  const DenseArray g = x.grad();
  for (double v : g.data()) EXPECT_EQ(v, 1.0);

  const Value y = param(rng, {4});
  backward(sum(mul(y, y)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.grad()[i], 2 * y.value()[i]);
}

TEST(Backward, Errors) {
  Rng rng(16);
  const Value x = param(rng, {3});
  EXPECT_THROW(backward(scale(x, 2)), std::invalid_argument);
  const Value root = sum(x);
  backward(root);
  EXPECT_THROW(backward(root), std::logic_error);
  reset_backward(root);
  EXPECT_NO_THROW(backward(root));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, TwoConsumersAccumulate) {
  // f = sum(a * b) + sum(a * a) with a = 2x: df/dx = 2b + 8x.
  Rng rng(17);
  const Value x = param(rng, {5});
  const Value b = Value::constant(rng.uniform_array({5}, -1, 1));
  const Value a = scale(x, 2);
  backward(add(sum(mul(a, b)), sum(mul(a, a))));
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_NEAR(x.grad()[i], 2 * b.value()[i] + 8 * x.value()[i], 1e-14);
}

TEST(Backward, DetachStopsGradient) {
  Rng rng(18);
  const Value x = param(rng, {3});
  backward(add(sum(detach(mul(x, x))), sum(x)));
  const DenseArray g = x.grad();
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}
