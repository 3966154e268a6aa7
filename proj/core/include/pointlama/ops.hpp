#pragma once

#include <cstddef>
#include <vector>

#include "pointlama/autodiff.hpp"

namespace pointlama {

enum class Padding { same, valid, causal };

// Linear algebra

/// [..., M, K] x [..., K, N]. The right operand may also be rank 2, in which
/// case it is shared by every leading batch index of the left operand.
Value matmul(const Value& a, const Value& b);

/// x [..., K] * weight [K, N] + bias [N]; bias may be empty.
Value linear(const Value& x, const Value& weight, const Value& bias = {});

// Elementwise

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
/// Hadamard product; shapes must match exactly.
Value mul(const Value& a, const Value& b);
/// `v` has the shape of the trailing dims of `x` and is repeated over the rest.
Value add_trailing(const Value& x, const Value& v);
Value mul_trailing(const Value& x, const Value& v);
Value scale(const Value& x, double c);
Value add_scalar(const Value& x, double c);
Value neg(const Value& x);

Value sigmoid(const Value& x);
Value silu(const Value& x);
Value relu(const Value& x);
Value gelu(const Value& x);
Value exp(const Value& x);
Value softplus(const Value& x);
Value square(const Value& x);

// Reductions

Value sum(const Value& x);
Value mean(const Value& x);
/// Max over one axis; the axis is removed. Ties route the gradient to the
/// lowest index.
Value max_dim(const Value& x, std::size_t axis);
Value mean_dim(const Value& x, std::size_t axis);
/// Repeats a size-1 axis `n` times.
Value expand_dim(const Value& x, std::size_t axis, std::size_t n);

// Normalisation and attention pieces

Value softmax_lastdim(const Value& x);
inline constexpr double kLayerNormEps = 1e-5;
Value layer_norm(const Value& x, const Value& gamma, const Value& beta);
Value layer_norm(const Value& x);
/// Per-channel standardisation of x [..., C] with statistics over every leading
/// position (biased variance). The batch statistics are optionally returned.
Value batch_standardize(const Value& x, DenseArray* batch_mean = nullptr, DenseArray* batch_var = nullptr);

/// Temporal convolution. x [B, T, C], w [k, C, C'], bias [C'] (may be empty).
/// `same` centres the kernel and needs odd k; `causal` pads k-1 on the left.
Value conv1d(const Value& x, const Value& w, const Value& bias, Padding padding);
/// Per-channel temporal convolution. x [B, T, C], w [k, C], bias [C].
Value depthwise_conv1d(const Value& x, const Value& w, const Value& bias, Padding padding);

// Layout

Value reshape(const Value& x, Shape shape);
Value permute(const Value& x, const std::vector<std::size_t>& perm);
Value slice_lastdim(const Value& x, std::size_t begin, std::size_t end);
Value concat(const std::vector<Value>& parts, std::size_t axis);
/// x [B, T, C], rows [B * T'] (row-major over (b, t')) -> [B, T', C].
Value gather_rows(const Value& x, const std::vector<std::size_t>& rows, std::size_t out_len);
/// table [V, C], ids -> prefix ++ [C]; product(prefix) must equal ids.size().
Value embedding(const Value& table, const std::vector<std::size_t>& ids, Shape prefix);

// Losses

/// Mean negative log-likelihood of integer labels under softmax(logits).
Value cross_entropy(const Value& logits, const std::vector<std::size_t>& labels);
Value mse(const Value& prediction, const Value& target);

}  // namespace pointlama
