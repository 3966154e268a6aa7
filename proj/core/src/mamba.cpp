#include "pointlama/mamba.hpp"

#include <cmath>
#include <memory>

namespace pointlama {

Discretized discretize(double A, double B, double delta) {
  const double da = delta * A;
  return {std::exp(da), std::expm1(da) / A * B};
}

namespace {

struct ScanDims {
  std::size_t B, T, C, N;
};

ScanDims check_scan_shapes(const Shape& x, const Shape& delta, const Shape& A, const Shape& Bm,
                           const Shape& Cm, const Shape& D) {
  if (x.size() != 3) throw ShapeError("selective_scan: x must be [B, T, C], got " + to_string(x));
  ScanDims d{x[0], x[1], x[2], A.size() == 2 ? A[1] : 0};
  if (delta != x) throw ShapeError("selective_scan: delta shape " + to_string(delta) + " != x shape " + to_string(x));
  if (A != Shape{d.C, d.N}) throw ShapeError("selective_scan: A must be [C, N], got " + to_string(A));
  if (Bm != Shape{d.B, d.T, d.N} || Cm != Shape{d.B, d.T, d.N})
    throw ShapeError("selective_scan: B and C must be [B, T, N], got " + to_string(Bm) + " and " +
                     to_string(Cm));
  if (D != Shape{d.C}) throw ShapeError("selective_scan: D must be [C], got " + to_string(D));
  return d;
}

// Fills hist[b, t, c, n] = h_t by stepping the recurrence in order.
void states_sequential(const ScanDims& d, const double* x, const double* delta, const double* A,
                       const double* Bm, double* hist) {
  const std::size_t CN = d.C * d.N;
  std::vector<double> h(CN);
  for (std::size_t b = 0; b < d.B; ++b) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < d.T; ++t) {
      const std::size_t bt = b * d.T + t;
      for (std::size_t c = 0; c < d.C; ++c) {
        const double xv = x[bt * d.C + c], dv = delta[bt * d.C + c];
        for (std::size_t n = 0; n < d.N; ++n) {
          const auto [a_bar, b_bar] = discretize(A[c * d.N + n], Bm[bt * d.N + n], dv);
          double& hs = h[c * d.N + n];
          hs = a_bar * hs + b_bar * xv;
        }
      }
      std::copy(h.begin(), h.end(), hist + bt * CN);
    }
  }
}

void states_parallel(const ScanDims& d, const double* x, const double* delta, const double* A,
                     const double* Bm, double* hist) {
  const std::size_t CN = d.C * d.N;
  std::vector<ScanElement> elems(d.T);
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t c = 0; c < d.C; ++c)
      for (std::size_t n = 0; n < d.N; ++n) {
        for (std::size_t t = 0; t < d.T; ++t) {
          const std::size_t bt = b * d.T + t;
          const auto [a_bar, b_bar] =
              discretize(A[c * d.N + n], Bm[bt * d.N + n], delta[bt * d.C + c]);
          elems[t] = {a_bar, b_bar * x[bt * d.C + c]};
        }
        associative_scan_inclusive(elems);
        for (std::size_t t = 0; t < d.T; ++t) hist[(b * d.T + t) * CN + c * d.N + n] = elems[t].b;
      }
}

void readout(const ScanDims& d, const double* x, const double* Cm, const double* D,
             const double* hist, double* y) {
  const std::size_t CN = d.C * d.N;
  for (std::size_t bt = 0; bt < d.B * d.T; ++bt)
    for (std::size_t c = 0; c < d.C; ++c) {
      double acc = D[c] * x[bt * d.C + c];
      const double* h = hist + bt * CN + c * d.N;
      for (std::size_t n = 0; n < d.N; ++n) acc += Cm[bt * d.N + n] * h[n];
      y[bt * d.C + c] = acc;
    }
}

DenseArray scan_dense(const ScanInputs& in, ScanMode mode) {
  const auto d = check_scan_shapes(in.x.shape(), in.delta.shape(), in.A.shape(), in.Bm.shape(),
                                   in.Cm.shape(), in.D.shape());
  std::vector<double> hist(d.B * d.T * d.C * d.N);
  if (mode == ScanMode::sequential)
    states_sequential(d, in.x.data().data(), in.delta.data().data(), in.A.data().data(),
                      in.Bm.data().data(), hist.data());
  else
    states_parallel(d, in.x.data().data(), in.delta.data().data(), in.A.data().data(),
                    in.Bm.data().data(), hist.data());
  DenseArray y(in.x.shape());
  readout(d, in.x.data().data(), in.Cm.data().data(), in.D.data().data(), hist.data(),
          y.data().data());
  return y;
}

}  // namespace

void associative_scan_inclusive(std::vector<ScanElement>& elems) {
  const std::size_t T = elems.size();
  if (T <= 1) return;
  std::size_t P = 1;
  while (P < T) P <<= 1;
  std::vector<ScanElement> tree(P);
  std::copy(elems.begin(), elems.end(), tree.begin());
  // Up-sweep: each right child becomes the combination of its subtree.
  for (std::size_t s = 1; s < P; s <<= 1)
    for (std::size_t k = 0; k < P; k += 2 * s) tree[k + 2 * s - 1] = combine(tree[k + s - 1], tree[k + 2 * s - 1]);
  // Down-sweep to exclusive prefixes.
  tree[P - 1] = ScanElement{};
  for (std::size_t s = P >> 1; s > 0; s >>= 1) {
    for (std::size_t k = 0; k < P; k += 2 * s) {
      const ScanElement left = tree[k + s - 1];
      tree[k + s - 1] = tree[k + 2 * s - 1];
      tree[k + 2 * s - 1] = combine(tree[k + 2 * s - 1], left);
    }
  }
  for (std::size_t t = 0; t < T; ++t) elems[t] = combine(tree[t], elems[t]);
}

DenseArray selective_scan_sequential(const ScanInputs& in) {
  return scan_dense(in, ScanMode::sequential);
}

DenseArray selective_scan_parallel(const ScanInputs& in) { return scan_dense(in, ScanMode::parallel); }

Value selective_scan(const Value& x, const Value& delta, const Value& A, const Value& Bm,
                     const Value& Cm, const Value& D, ScanMode mode) {
  const auto d = check_scan_shapes(x.shape(), delta.shape(), A.shape(), Bm.shape(), Cm.shape(),
                                   D.shape());
  auto hist = std::make_shared<std::vector<double>>(d.B * d.T * d.C * d.N);
  if (mode == ScanMode::sequential)
    states_sequential(d, x.value().data().data(), delta.value().data().data(),
                      A.value().data().data(), Bm.value().data().data(), hist->data());
  else
    states_parallel(d, x.value().data().data(), delta.value().data().data(),
                    A.value().data().data(), Bm.value().data().data(), hist->data());
  DenseArray y(x.shape());
  readout(d, x.value().data().data(), Cm.value().data().data(), D.value().data().data(),
          hist->data(), y.data().data());

  return make_result(std::move(y), {x, delta, A, Bm, Cm, D}, "selective_scan", [d, hist](Node& self) {
    const double* gy = self.grad.data().data();
    const double* xv = self.parents[0]->value.data().data();
    const double* dv = self.parents[1]->value.data().data();
    const double* Av = self.parents[2]->value.data().data();
    const double* Bv = self.parents[3]->value.data().data();
    const double* Cv = self.parents[4]->value.data().data();
    const double* Dv = self.parents[5]->value.data().data();
    auto grad_of = [&](std::size_t i) -> double* {
      return self.parents[i]->requires_grad ? self.parents[i]->grad_buffer().data().data() : nullptr;
    };
    double* gx = grad_of(0);
    double* gdelta = grad_of(1);
    double* gA = grad_of(2);
    double* gB = grad_of(3);
    double* gC = grad_of(4);
    double* gD = grad_of(5);

    const std::size_t CN = d.C * d.N;
    std::vector<double> gh(CN), a_next(CN);
    for (std::size_t b = 0; b < d.B; ++b) {
      std::fill(gh.begin(), gh.end(), 0.0);
      std::fill(a_next.begin(), a_next.end(), 0.0);
      for (std::size_t t = d.T; t-- > 0;) {
        const std::size_t bt = b * d.T + t;
        const double* h = hist->data() + bt * CN;
        const double* h_prev = t > 0 ? hist->data() + (bt - 1) * CN : nullptr;
        for (std::size_t c = 0; c < d.C; ++c) {
          const double g = gy[bt * d.C + c];
          const double x_t = xv[bt * d.C + c];
          const double dt = dv[bt * d.C + c];
          if (gD) gD[c] += g * x_t;
          double dx = g * Dv[c];
          double ddelta = 0.0;
          for (std::size_t n = 0; n < d.N; ++n) {
            const std::size_t cn = c * d.N + n;
            const double An = Av[cn];
            const double Bn = Bv[bt * d.N + n];
            if (gC) gC[bt * d.N + n] += g * h[cn];
            const double ghv = g * Cv[bt * d.N + n] + a_next[cn] * gh[cn];
            gh[cn] = ghv;
            const double a = std::exp(dt * An);
            const double beta = std::expm1(dt * An) / An;
            a_next[cn] = a;
            const double hp = h_prev ? h_prev[cn] : 0.0;
            const double d_a = ghv * hp;
            const double d_beta = ghv * x_t * Bn;
            dx += ghv * beta * Bn;
            if (gB) gB[bt * d.N + n] += ghv * beta * x_t;
            ddelta += d_a * An * a + d_beta * a;
            if (gA) gA[cn] += d_a * dt * a + d_beta * (dt * a - beta) / An;
          }
          if (gx) gx[bt * d.C + c] += dx;
          if (gdelta) gdelta[bt * d.C + c] += ddelta;
        }
      }
    }
  });
}

MambaBlock::MambaBlock(ParamStore& store, const std::string& prefix, const MambaConfig& cfg,
                       Rng& rng)
    : cfg_(cfg) {
  const std::size_t D = cfg.d_model, E = cfg.inner(), N = cfg.d_state, R = cfg.rank_dt();
  norm_g_ = store.add(prefix + ".norm.gamma", DenseArray({D}, 1.0));
  norm_b_ = store.add(prefix + ".norm.beta", DenseArray({D}, 0.0));
  in_proj_ = store.add_uniform(prefix + ".in_proj.weight", {D, 2 * E}, D, rng);
  conv_w_ = store.add_uniform(prefix + ".conv.weight", {cfg.conv_kernel, E}, cfg.conv_kernel, rng);
  conv_b_ = store.add(prefix + ".conv.bias", DenseArray({E}, 0.0));
  x_proj_ = store.add_uniform(prefix + ".x_proj.weight", {E, R + 2 * N}, E, rng);
  dt_w_ = store.add_uniform(prefix + ".dt_proj.weight", {R, E}, R, rng);

  // softplus(bias) log-uniform in [dt_min, dt_max].
  DenseArray dt_bias({E});
  for (double& v : dt_bias.data()) {
    const double dt = std::exp(rng.uniform(std::log(cfg.dt_min), std::log(cfg.dt_max)));
    v = dt + std::log(-std::expm1(-dt));
  }
  dt_b_ = store.add(prefix + ".dt_proj.bias", std::move(dt_bias));

  DenseArray a_log({E, N});
  for (std::size_t c = 0; c < E; ++c)
    for (std::size_t n = 0; n < N; ++n) a_log[c * N + n] = std::log(static_cast<double>(n + 1));
  a_log_ = store.add(prefix + ".A_log", std::move(a_log));
  d_ = store.add(prefix + ".D", DenseArray({E}, 1.0));
  out_proj_ = store.add_uniform(prefix + ".out_proj.weight", {E, D}, E, rng);
}

Value MambaBlock::branch(const Value& x) const {
  const std::size_t E = cfg_.inner(), N = cfg_.d_state, R = cfg_.rank_dt();
  Value h = layer_norm(x, norm_g_, norm_b_);
  Value xz = matmul(h, in_proj_);
  Value xs = slice_lastdim(xz, 0, E);
  Value z = slice_lastdim(xz, E, 2 * E);
  Value xc = silu(depthwise_conv1d(xs, conv_w_, conv_b_, Padding::causal));
  Value dbc = matmul(xc, x_proj_);
  Value dt_low = slice_lastdim(dbc, 0, R);
  Value Bm = slice_lastdim(dbc, R, R + N);
  Value Cm = slice_lastdim(dbc, R + N, R + 2 * N);
  Value delta = softplus(linear(dt_low, dt_w_, dt_b_));
  Value A = neg(exp(a_log_));
  Value y = selective_scan(xc, delta, A, Bm, Cm, d_, cfg_.scan);
  return matmul(mul(y, silu(z)), out_proj_);
}

Value MambaBlock::forward(const Value& x) const { return add(x, branch(x)); }

}  // namespace pointlama
