#include "pointlama/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace pointlama {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
DenseArray& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }
const DenseArray& pval(const Node& self, std::size_t i) { return self.parents[i]->value; }

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

template <class F, class DF>
Value unary(const Value& x, const char* name, F f, DF df) {
  DenseArray out(x.shape());
  const auto in = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return make_result(std::move(out), {x}, name, [df](Node& self) {
    if (!wants(self, 0)) return;
    const auto xin = pval(self, 0).data();
    const auto y = self.value.data();
    const auto g = self.grad.data();
    auto dx = pgrad(self, 0).data();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * df(xin[i], y[i]);
  });
}

bool trailing_match(const Shape& x, const Shape& v) {
  if (v.size() > x.size()) return false;
  return std::equal(v.begin(), v.end(), x.end() - static_cast<std::ptrdiff_t>(v.size()));
}

}  // namespace

Value matmul(const Value& a, const Value& b) {
  require(a.rank() >= 2 && b.rank() >= 2,
          "matmul: operands need rank >= 2, got " + to_string(a.shape()) + " and " +
              to_string(b.shape()));
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  const std::size_t K2 = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
  require(K == K2, "matmul: inner dimensions disagree: " + to_string(a.shape()) + " x " +
                       to_string(b.shape()) + " (" + std::to_string(K) +
                       " != " + std::to_string(K2) + ")");
  const bool shared_rhs = b.rank() == 2;
  if (!shared_rhs) {
    require(a.rank() == b.rank() &&
                std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
            "matmul: batch dimensions disagree: " + to_string(a.shape()) + " x " +
                to_string(b.shape()));
  }
  const std::size_t batch = a.size() / (M * K);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  DenseArray out(out_shape);

  if (shared_rhs) {
    MutMap(out.data().data(), batch * M, N).noalias() =
        ConstMap(a.value().data().data(), batch * M, K) * ConstMap(b.value().data().data(), K, N);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap(out.data().data() + i * M * N, M, N).noalias() =
          ConstMap(a.value().data().data() + i * M * K, M, K) *
          ConstMap(b.value().data().data() + i * K * N, K, N);
    }
  }

  return make_result(std::move(out), {a, b}, "matmul",
                     [batch, M, K, N, shared_rhs](Node& self) {
                       const double* g = self.grad.data().data();
                       const double* av = pval(self, 0).data().data();
                       const double* bv = pval(self, 1).data().data();
                       if (shared_rhs) {
                         ConstMap G(g, batch * M, N);
                         if (wants(self, 0)) {
                           MutMap(pgrad(self, 0).data().data(), batch * M, K).noalias() +=
                               G * ConstMap(bv, K, N).transpose();
                         }
                         if (wants(self, 1)) {
                           MutMap(pgrad(self, 1).data().data(), K, N).noalias() +=
                               ConstMap(av, batch * M, K).transpose() * G;
                         }
                         return;
                       }
                       for (std::size_t i = 0; i < batch; ++i) {
                         ConstMap G(g + i * M * N, M, N);
                         if (wants(self, 0)) {
                           MutMap(pgrad(self, 0).data().data() + i * M * K, M, K).noalias() +=
                               G * ConstMap(bv + i * K * N, K, N).transpose();
                         }
                         if (wants(self, 1)) {
                           MutMap(pgrad(self, 1).data().data() + i * K * N, K, N).noalias() +=
                               ConstMap(av + i * M * K, M, K).transpose() * G;
                         }
                       }
                     });
}

Value linear(const Value& x, const Value& weight, const Value& bias) {
  require(weight.rank() == 2, "linear: weight must be rank 2, got " + to_string(weight.shape()));
  Value y = matmul(x, weight);
  return bias ? add_trailing(y, bias) : y;
}

Value add(const Value& a, const Value& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  DenseArray out(a.shape());
  const auto x = a.value().data(), y = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  return make_result(std::move(out), {a, b}, "add", [](Node& self) {
    const auto g = self.grad.data();
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto d = pgrad(self, p).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Value sub(const Value& a, const Value& b) {
  require(a.shape() == b.shape(),
          "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  DenseArray out(a.shape());
  const auto x = a.value().data(), y = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  return make_result(std::move(out), {a, b}, "sub", [](Node& self) {
    const auto g = self.grad.data();
    if (wants(self, 0)) {
      auto d = pgrad(self, 0).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (wants(self, 1)) {
      auto d = pgrad(self, 1).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Value mul(const Value& a, const Value& b) {
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  DenseArray out(a.shape());
  const auto x = a.value().data(), y = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  return make_result(std::move(out), {a, b}, "mul", [](Node& self) {
    const auto g = self.grad.data();
    const auto x = pval(self, 0).data(), y = pval(self, 1).data();
    if (wants(self, 0)) {
      auto d = pgrad(self, 0).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
    }
    if (wants(self, 1)) {
      auto d = pgrad(self, 1).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
    }
  });
}

Value add_trailing(const Value& x, const Value& v) {
  require(trailing_match(x.shape(), v.shape()),
          "add_trailing: " + to_string(v.shape()) + " is not a suffix of " + to_string(x.shape()));
  const std::size_t inner = v.size(), outer = x.size() / inner;
  DenseArray out(x.shape());
  const auto xs = x.value().data(), vs = v.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < outer; ++i)
    for (std::size_t j = 0; j < inner; ++j) o[i * inner + j] = xs[i * inner + j] + vs[j];
  return make_result(std::move(out), {x, v}, "add_trailing", [inner, outer](Node& self) {
    const auto g = self.grad.data();
    if (wants(self, 0)) {
      auto d = pgrad(self, 0).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (wants(self, 1)) {
      auto d = pgrad(self, 1).data();
      for (std::size_t i = 0; i < outer; ++i)
        for (std::size_t j = 0; j < inner; ++j) d[j] += g[i * inner + j];
    }
  });
}

Value mul_trailing(const Value& x, const Value& v) {
  require(trailing_match(x.shape(), v.shape()),
          "mul_trailing: " + to_string(v.shape()) + " is not a suffix of " + to_string(x.shape()));
  const std::size_t inner = v.size(), outer = x.size() / inner;
  DenseArray out(x.shape());
  const auto xs = x.value().data(), vs = v.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < outer; ++i)
    for (std::size_t j = 0; j < inner; ++j) o[i * inner + j] = xs[i * inner + j] * vs[j];
  return make_result(std::move(out), {x, v}, "mul_trailing", [inner, outer](Node& self) {
    const auto g = self.grad.data();
    const auto xs = pval(self, 0).data(), vs = pval(self, 1).data();
    if (wants(self, 0)) {
      auto d = pgrad(self, 0).data();
      for (std::size_t i = 0; i < outer; ++i)
        for (std::size_t j = 0; j < inner; ++j) d[i * inner + j] += g[i * inner + j] * vs[j];
    }
    if (wants(self, 1)) {
      auto d = pgrad(self, 1).data();
      for (std::size_t i = 0; i < outer; ++i)
        for (std::size_t j = 0; j < inner; ++j) d[j] += g[i * inner + j] * xs[i * inner + j];
    }
  });
}

Value scale(const Value& x, double c) {
  return unary(
      x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Value add_scalar(const Value& x, double c) {
  return unary(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Value neg(const Value& x) { return scale(x, -1.0); }

Value sigmoid(const Value& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Value silu(const Value& x) {
  return unary(
      x, "silu",
      [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Value relu(const Value& x) {
  return unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Value gelu(const Value& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Value exp(const Value& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Value softplus(const Value& x) {
  return unary(
      x, "softplus",
      [](double v) { return v > 20.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Value square(const Value& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Value sum(const Value& x) {
  const auto d = x.value().data();
  double s = 0.0;
  for (double v : d) s += v;
  return make_result(DenseArray::scalar(s), {x}, "sum", [](Node& self) {
    if (!wants(self, 0)) return;
    const double g = self.grad[0];
    for (double& v : pgrad(self, 0).data()) v += g;
  });
}

Value mean(const Value& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Value max_dim(const Value& x, std::size_t axis) {
  require(axis < x.rank(), "max_dim: axis out of range for " + to_string(x.shape()));
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  DenseArray out(out_shape);
  auto argmax = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
  const auto in = x.value().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      double bv = in[o * s.n * s.inner + i];
      for (std::size_t k = 1; k < s.n; ++k) {
        const double v = in[(o * s.n + k) * s.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[o * s.inner + i] = bv;
      (*argmax)[o * s.inner + i] = best;
    }
  }
  return make_result(std::move(out), {x}, "max_dim", [s, argmax](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto g = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i)
        d[(o * s.n + (*argmax)[o * s.inner + i]) * s.inner + i] += g[o * s.inner + i];
  });
}

Value mean_dim(const Value& x, std::size_t axis) {
  require(axis < x.rank(), "mean_dim: axis out of range for " + to_string(x.shape()));
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  DenseArray out(out_shape);
  const auto in = x.value().data();
  const double inv = 1.0 / static_cast<double>(s.n);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) acc += in[(o * s.n + k) * s.inner + i];
      out[o * s.inner + i] = acc * inv;
    }
  return make_result(std::move(out), {x}, "mean_dim", [s, inv](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto g = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          d[(o * s.n + k) * s.inner + i] += g[o * s.inner + i] * inv;
  });
}

Value expand_dim(const Value& x, std::size_t axis, std::size_t n) {
  require(axis < x.rank() && x.dim(axis) == 1,
          "expand_dim: axis " + std::to_string(axis) + " of " + to_string(x.shape()) +
              " is not size 1");
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = n;
  DenseArray out(out_shape);
  const auto in = x.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * s.inner), s.inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * n + k) * s.inner));
  return make_result(std::move(out), {x}, "expand_dim", [s, n](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto g = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) d[o * s.inner + i] += g[(o * n + k) * s.inner + i];
  });
}

Value softmax_lastdim(const Value& x) {
  const std::size_t C = x.dim(x.rank() - 1), rows = x.size() / C;
  DenseArray out(x.shape());
  const auto in = x.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * C;
    double* yr = o.data() + r * C;
    const double m = *std::max_element(xr, xr + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += (yr[c] = std::exp(xr[c] - m));
    for (std::size_t c = 0; c < C; ++c) yr[c] /= z;
  }
  return make_result(std::move(out), {x}, "softmax", [C, rows](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto y = self.value.data();
    const auto g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += g[r * C + c] * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) d[r * C + c] += y[r * C + c] * (g[r * C + c] - dot);
    }
  });
}

namespace {

Value layer_norm_impl(const Value& x, const Value* gamma, const Value* beta) {
  const std::size_t C = x.dim(x.rank() - 1), rows = x.size() / C;
  if (gamma) {
    require(gamma->shape() == Shape{C} && beta->shape() == Shape{C},
            "layer_norm: gamma/beta must have shape [" + std::to_string(C) + "]");
  }
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  DenseArray out(x.shape());
  const auto in = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * C;
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += xr[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(C);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (xr[c] - mu) * rs;
      (*xhat)[r * C + c] = h;
      out[r * C + c] = gamma ? h * gamma->value()[c] + beta->value()[c] : h;
    }
  }
  std::vector<Value> parents{x};
  if (gamma) {
    parents.push_back(*gamma);
    parents.push_back(*beta);
  }
  const bool affine = gamma != nullptr;
  return make_result(std::move(out), std::move(parents), "layer_norm",
                     [C, rows, xhat, rstd, affine](Node& self) {
                       const auto g = self.grad.data();
                       const double* gam = affine ? pval(self, 1).data().data() : nullptr;
                       if (affine && wants(self, 1)) {
                         auto dg = pgrad(self, 1).data();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < C; ++c)
                             dg[c] += g[r * C + c] * (*xhat)[r * C + c];
                       }
                       if (affine && wants(self, 2)) {
                         auto db = pgrad(self, 2).data();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < C; ++c) db[c] += g[r * C + c];
                       }
                       if (!wants(self, 0)) return;
                       auto dx = pgrad(self, 0).data();
                       std::vector<double> dh(C);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t c = 0; c < C; ++c) {
                           dh[c] = g[r * C + c] * (gam ? gam[c] : 1.0);
                           s1 += dh[c];
                           s2 += dh[c] * (*xhat)[r * C + c];
                         }
                         const double k = (*rstd)[r] / static_cast<double>(C);
                         for (std::size_t c = 0; c < C; ++c)
                           dx[r * C + c] += k * (static_cast<double>(C) * dh[c] - s1 -
                                                 (*xhat)[r * C + c] * s2);
                       }
                     });
}

}  // namespace

Value layer_norm(const Value& x, const Value& gamma, const Value& beta) {
  return layer_norm_impl(x, &gamma, &beta);
}

Value layer_norm(const Value& x) { return layer_norm_impl(x, nullptr, nullptr); }

Value batch_standardize(const Value& x, DenseArray* batch_mean, DenseArray* batch_var) {
  const std::size_t C = x.dim(x.rank() - 1), rows = x.size() / C;
  require(rows >= 2, "batch_standardize: need at least two rows, got " + std::to_string(rows));
  std::vector<double> mu(C, 0.0), var(C, 0.0);
  const auto in = x.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) mu[c] += in[r * C + c];
  for (auto& m : mu) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) var[c] += (in[r * C + c] - mu[c]) * (in[r * C + c] - mu[c]);
  for (auto& v : var) v /= static_cast<double>(rows);
  auto rstd = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c) (*rstd)[c] = 1.0 / std::sqrt(var[c] + kLayerNormEps);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  DenseArray out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (in[r * C + c] - mu[c]) * (*rstd)[c];
      (*xhat)[r * C + c] = h;
      out[r * C + c] = h;
    }
  if (batch_mean) *batch_mean = DenseArray({C}, mu);
  if (batch_var) *batch_var = DenseArray({C}, var);
  return make_result(std::move(out), {x}, "batch_standardize", [C, rows, xhat, rstd](Node& self) {
    const auto g = self.grad.data();
    auto dx = pgrad(self, 0).data();
    std::vector<double> s1(C, 0.0), s2(C, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        s1[c] += g[r * C + c];
        s2[c] += g[r * C + c] * (*xhat)[r * C + c];
      }
    const double n = static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < C; ++c)
        dx[r * C + c] += (*rstd)[c] / n * (n * g[r * C + c] - s1[c] - (*xhat)[r * C + c] * s2[c]);
  });
}

namespace {

struct ConvGeometry {
  std::size_t B, T, C, Cout, k, T_out, pad_left;
};

ConvGeometry conv_geometry(const Value& x, std::size_t k, Padding padding, const char* who) {
  require(x.rank() == 3, std::string(who) + ": input must be [B, T, C], got " + to_string(x.shape()));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), 0, k, 0, 0};
  switch (padding) {
    case Padding::same:
      require(k % 2 == 1, std::string(who) + ": same padding needs an odd kernel, got k=" +
                              std::to_string(k));
      g.T_out = g.T;
      g.pad_left = (k - 1) / 2;
      break;
    case Padding::causal:
      g.T_out = g.T;
      g.pad_left = k - 1;
      break;
    case Padding::valid:
      require(k <= g.T, std::string(who) + ": kernel " + std::to_string(k) +
                            " longer than sequence " + std::to_string(g.T) + " with valid padding");
      g.T_out = g.T - k + 1;
      g.pad_left = 0;
      break;
  }
  return g;
}

// Output rows [t0, t1) read input rows [t0 + j - pad, t1 + j - pad) for tap j.
std::pair<std::size_t, std::size_t> tap_range(const ConvGeometry& g, std::size_t j) {
  const long shift = static_cast<long>(j) - static_cast<long>(g.pad_left);
  const long lo = std::max<long>(0, -shift);
  const long hi = std::min<long>(static_cast<long>(g.T_out), static_cast<long>(g.T) - shift);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

Value conv1d(const Value& x, const Value& w, const Value& bias, Padding padding) {
  require(w.rank() == 3, "conv1d: weight must be [k, C, C'], got " + to_string(w.shape()));
  auto g = conv_geometry(x, w.dim(0), padding, "conv1d");
  require(w.dim(1) == g.C, "conv1d: weight expects " + std::to_string(w.dim(1)) +
                               " input channels, input has " + std::to_string(g.C));
  g.Cout = w.dim(2);
  if (bias) require(bias.shape() == Shape{g.Cout}, "conv1d: bias must be [C']");
  DenseArray out({g.B, g.T_out, g.Cout});
  const double* xv = x.value().data().data();
  const double* wv = w.value().data().data();
  for (std::size_t b = 0; b < g.B; ++b) {
    MutMap Y(out.data().data() + b * g.T_out * g.Cout, g.T_out, g.Cout);
    if (bias) Y.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(bias.value().data().data(), g.Cout);
    for (std::size_t j = 0; j < g.k; ++j) {
      auto [lo, hi] = tap_range(g, j);
      if (hi == lo) continue;
      const std::size_t src = lo + j - g.pad_left;
      Y.middleRows(lo, hi - lo).noalias() +=
          ConstMap(xv + (b * g.T + src) * g.C, hi - lo, g.C) *
          ConstMap(wv + j * g.C * g.Cout, g.C, g.Cout);
    }
  }
  std::vector<Value> parents{x, w};
  if (bias) parents.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return make_result(std::move(out), std::move(parents), "conv1d", [g, has_bias](Node& self) {
    const double* gv = self.grad.data().data();
    const double* xv = pval(self, 0).data().data();
    const double* wv = pval(self, 1).data().data();
    for (std::size_t b = 0; b < g.B; ++b) {
      ConstMap G(gv + b * g.T_out * g.Cout, g.T_out, g.Cout);
      for (std::size_t j = 0; j < g.k; ++j) {
        auto [lo, hi] = tap_range(g, j);
        if (hi == lo) continue;
        const std::size_t src = lo + j - g.pad_left;
        if (wants(self, 0)) {
          MutMap(pgrad(self, 0).data().data() + (b * g.T + src) * g.C, hi - lo, g.C).noalias() +=
              G.middleRows(lo, hi - lo) * ConstMap(wv + j * g.C * g.Cout, g.C, g.Cout).transpose();
        }
        if (wants(self, 1)) {
          MutMap(pgrad(self, 1).data().data() + j * g.C * g.Cout, g.C, g.Cout).noalias() +=
              ConstMap(xv + (b * g.T + src) * g.C, hi - lo, g.C).transpose() *
              G.middleRows(lo, hi - lo);
        }
      }
      if (has_bias && wants(self, 2)) {
        Eigen::Map<Eigen::RowVectorXd>(pgrad(self, 2).data().data(), g.Cout) += G.colwise().sum();
      }
    }
  });
}

Value depthwise_conv1d(const Value& x, const Value& w, const Value& bias, Padding padding) {
  require(w.rank() == 2, "depthwise_conv1d: weight must be [k, C], got " + to_string(w.shape()));
  auto g = conv_geometry(x, w.dim(0), padding, "depthwise_conv1d");
  require(w.dim(1) == g.C, "depthwise_conv1d: channel mismatch between weight " +
                               to_string(w.shape()) + " and input " + to_string(x.shape()));
  g.Cout = g.C;
  if (bias) require(bias.shape() == Shape{g.C}, "depthwise_conv1d: bias must be [C]");
  DenseArray out({g.B, g.T_out, g.C});
  const auto xv = x.value().data();
  const auto wv = w.value().data();
  for (std::size_t b = 0; b < g.B; ++b)
    for (std::size_t t = 0; t < g.T_out; ++t) {
      double* y = out.data().data() + (b * g.T_out + t) * g.C;
      if (bias) std::copy_n(bias.value().data().begin(), g.C, y);
      for (std::size_t j = 0; j < g.k; ++j) {
        const long src = static_cast<long>(t + j) - static_cast<long>(g.pad_left);
        if (src < 0 || src >= static_cast<long>(g.T)) continue;
        const double* xr = xv.data() + (b * g.T + static_cast<std::size_t>(src)) * g.C;
        const double* wr = wv.data() + j * g.C;
        for (std::size_t c = 0; c < g.C; ++c) y[c] += xr[c] * wr[c];
      }
    }
  std::vector<Value> parents{x, w};
  if (bias) parents.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return make_result(std::move(out), std::move(parents), "depthwise_conv1d",
                     [g, has_bias](Node& self) {
                       const auto gv = self.grad.data();
                       const auto xv = pval(self, 0).data();
                       const auto wv = pval(self, 1).data();
                       double* dx = wants(self, 0) ? pgrad(self, 0).data().data() : nullptr;
                       double* dw = wants(self, 1) ? pgrad(self, 1).data().data() : nullptr;
                       double* db = has_bias && wants(self, 2) ? pgrad(self, 2).data().data()
                                                                : nullptr;
                       for (std::size_t b = 0; b < g.B; ++b)
                         for (std::size_t t = 0; t < g.T_out; ++t) {
                           const double* gr = gv.data() + (b * g.T_out + t) * g.C;
                           if (db)
                             for (std::size_t c = 0; c < g.C; ++c) db[c] += gr[c];
                           for (std::size_t j = 0; j < g.k; ++j) {
                             const long src =
                                 static_cast<long>(t + j) - static_cast<long>(g.pad_left);
                             if (src < 0 || src >= static_cast<long>(g.T)) continue;
                             const std::size_t row = (b * g.T + static_cast<std::size_t>(src)) * g.C;
                             for (std::size_t c = 0; c < g.C; ++c) {
                               if (dx) dx[row + c] += gr[c] * wv[j * g.C + c];
                               if (dw) dw[j * g.C + c] += gr[c] * xv[row + c];
                             }
                           }
                         }
                     });
}

Value reshape(const Value& x, Shape shape) {
  DenseArray out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, "reshape", [](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Value permute(const Value& x, const std::vector<std::size_t>& perm) {
  const std::size_t R = x.rank();
  require(perm.size() == R, "permute: permutation rank mismatch for " + to_string(x.shape()));
  std::vector<bool> used(R, false);
  for (auto p : perm) {
    require(p < R && !used[p], "permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(R);
  for (std::size_t i = 0; i < R; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_stride(R, 1);
  for (std::size_t i = R - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * x.dim(i);
  // Source offset for every destination element, computed once.
  auto src = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> idx(R, 0);
  for (std::size_t o = 0; o < x.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < R; ++i) off += idx[i] * in_stride[perm[i]];
    (*src)[o] = off;
    for (std::size_t i = R; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  DenseArray out(out_shape);
  const auto in = x.value().data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = in[(*src)[o]];
  return make_result(std::move(out), {x}, "permute", [src](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto g = self.grad.data();
    for (std::size_t o = 0; o < g.size(); ++o) d[(*src)[o]] += g[o];
  });
}

Value slice_lastdim(const Value& x, std::size_t begin, std::size_t end) {
  const std::size_t C = x.dim(x.rank() - 1);
  require(begin < end && end <= C, "slice_lastdim: range [" + std::to_string(begin) + ", " +
                                       std::to_string(end) + ") invalid for " +
                                       to_string(x.shape()));
  const std::size_t rows = x.size() / C, w = end - begin;
  Shape out_shape = x.shape();
  out_shape.back() = w;
  DenseArray out(out_shape);
  const auto in = x.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(r * C + begin), w,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * w));
  return make_result(std::move(out), {x}, "slice", [C, rows, w, begin](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) d[r * C + begin + c] += g[r * w + c];
  });
}

Value concat(const std::vector<Value>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  require(axis < ref.size(), "concat: axis out of range");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      require(i == axis || p.dim(i) == ref[i],
              "concat: shape " + to_string(p.shape()) + " incompatible with " + to_string(ref));
    widths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  const auto s = split_at(ref, axis);
  Shape out_shape = ref;
  out_shape[axis] = total;
  DenseArray out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto in = parts[k].value().data();
    const std::size_t block = widths[k] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * total + offset) * s.inner));
    offset += widths[k];
  }
  return make_result(std::move(out), parts, "concat", [s, widths, total](Node& self) {
    const auto g = self.grad.data();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t block = widths[k] * s.inner;
      if (wants(self, k)) {
        auto d = pgrad(self, k).data();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < block; ++i)
            d[o * block + i] += g[(o * total + offset) * s.inner + i];
      }
      offset += widths[k];
    }
  });
}

Value gather_rows(const Value& x, const std::vector<std::size_t>& rows, std::size_t out_len) {
  require(x.rank() == 3, "gather_rows: input must be [B, T, C], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
  require(rows.size() == B * out_len, "gather_rows: expected " + std::to_string(B * out_len) +
                                          " indices, got " + std::to_string(rows.size()));
  for (auto r : rows) require(r < T, "gather_rows: row index " + std::to_string(r) + " >= " +
                                         std::to_string(T));
  DenseArray out({B, out_len, C});
  const auto in = x.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < out_len; ++t)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((b * T + rows[b * out_len + t]) * C), C,
                  out.data().begin() + static_cast<std::ptrdiff_t>((b * out_len + t) * C));
  return make_result(std::move(out), {x}, "gather_rows", [rows, B, T, C, out_len](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto g = self.grad.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < out_len; ++t)
        for (std::size_t c = 0; c < C; ++c)
          d[(b * T + rows[b * out_len + t]) * C + c] += g[(b * out_len + t) * C + c];
  });
}

Value embedding(const Value& table, const std::vector<std::size_t>& ids, Shape prefix) {
  require(table.rank() == 2, "embedding: table must be rank 2");
  require(shape_numel(prefix) == ids.size(), "embedding: prefix does not match id count");
  const std::size_t V = table.dim(0), C = table.dim(1);
  for (auto id : ids)
    require(id < V, "embedding: id " + std::to_string(id) + " outside table of " +
                        std::to_string(V) + " rows");
  Shape out_shape = std::move(prefix);
  out_shape.push_back(C);
  DenseArray out(out_shape);
  const auto tv = table.value().data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * C), C,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * C));
  return make_result(std::move(out), {table}, "embedding", [ids, C](Node& self) {
    if (!wants(self, 0)) return;
    auto d = pgrad(self, 0).data();
    const auto g = self.grad.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < C; ++c) d[ids[i] * C + c] += g[i * C + c];
  });
}

Value cross_entropy(const Value& logits, const std::vector<std::size_t>& labels) {
  require(logits.rank() == 2, "cross_entropy: logits must be [B, K]");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  require(labels.size() == B, "cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<double>>(B * K);
  const auto z = logits.value().data();
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    require(labels[b] < K, "cross_entropy: label out of range");
    const double* zr = z.data() + b * K;
    const double m = *std::max_element(zr, zr + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(zr[k] - m);
    const double lse = m + std::log(s);
    for (std::size_t k = 0; k < K; ++k) (*probs)[b * K + k] = std::exp(zr[k] - lse);
    loss += lse - zr[labels[b]];
  }
  loss /= static_cast<double>(B);
  return make_result(DenseArray::scalar(loss), {logits}, "cross_entropy",
                     [probs, labels, B, K](Node& self) {
                       if (!wants(self, 0)) return;
                       auto d = pgrad(self, 0).data();
                       const double g = self.grad[0] / static_cast<double>(B);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t k = 0; k < K; ++k)
                           d[b * K + k] +=
                               g * ((*probs)[b * K + k] - (k == labels[b] ? 1.0 : 0.0));
                     });
}

Value mse(const Value& prediction, const Value& target) {
  return mean(square(sub(prediction, target)));
}

}  // namespace pointlama
