#include "flowbelief/flows.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flowbelief {

namespace {
constexpr double kScaleCap = 5.0;
constexpr double kDiagFloor = 1e-8;
}  // namespace

// ---- AffineCouplingLayer -----------------------------------------------------

AffineCouplingLayer::AffineCouplingLayer(const std::string& name, std::size_t dim_,
                                         std::size_t ctx_dim_, std::size_t hidden, int parity_,
                                         Rng& rng)
    : dim(dim_), ctx_dim(ctx_dim_), k(dim_ / 2), parity(parity_) {
  if (dim < 2) {
    throw Error(Error::Code::Config, "coupling layer needs dim >= 2, got " + std::to_string(dim));
  }
  net = ResidualParamNet(name + ".net", k + ctx_dim, hidden, 2 * (dim - k), rng);
}

Tensor AffineCouplingLayer::scales_and_shift(const Tensor& pass, const Tensor& ctx) {
  Tensor in = ctx_dim > 0 ? concat(pass, ctx) : pass;
  return net(in);
}

Tensor AffineCouplingLayer::forward(const Tensor& x, const Tensor& ctx, Tensor& logdet) {
  const std::size_t t = dim - k;  // transformed block width
  Tensor xa = parity == 0 ? slice(x, 0, k) : slice(x, t, dim);
  Tensor xb = parity == 0 ? slice(x, k, dim) : slice(x, 0, t);
  Tensor params = scales_and_shift(xa, ctx);
  Tensor s = scale(tanh_t(slice(params, 0, t)), kScaleCap);
  Tensor shift = slice(params, t, 2 * t);
  Tensor yb = add(mul(xb, exp_t(s)), shift);
  logdet = add(logdet, sum_last(s));
  return parity == 0 ? concat(xa, yb) : concat(yb, xa);
}

Tensor AffineCouplingLayer::inverse(const Tensor& y, const Tensor& ctx, Tensor& logdet) {
  const std::size_t t = dim - k;
  Tensor ya = parity == 0 ? slice(y, 0, k) : slice(y, t, dim);
  Tensor yb = parity == 0 ? slice(y, k, dim) : slice(y, 0, t);
  Tensor params = scales_and_shift(ya, ctx);
  Tensor s = scale(tanh_t(slice(params, 0, t)), kScaleCap);
  Tensor shift = slice(params, t, 2 * t);
  Tensor xb = mul(sub(yb, shift), exp_t(neg(s)));
  logdet = add(logdet, sum_last(s));
  return parity == 0 ? concat(ya, xb) : concat(xb, ya);
}

void AffineCouplingLayer::collect(std::vector<Parameter*>& out) { net.collect(out); }

// ---- LULinearLayer -----------------------------------------------------------

LULinearLayer::LULinearLayer(const std::string& name, std::size_t dim_, Rng& rng, bool random_perm)
    : dim(dim_),
      raw_a(name + ".raw_a", {dim_, dim_}, zeros_init(dim_ * dim_)),
      raw_b(name + ".raw_b", {dim_, dim_}, zeros_init(dim_ * dim_)),
      logdiag(name + ".logdiag", {dim_}, zeros_init(dim_)) {
  perm.resize(dim);
  std::iota(perm.begin(), perm.end(), 0);
  if (random_perm) {
    for (std::size_t i = dim; i > 1; --i) std::swap(perm[i - 1], perm[rng.u64() % i]);
  }
  // Batched rows are right-multiplied, so the constants are P^T and P.
  std::vector<double> q(dim * dim, 0.0), qt(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    q[perm[i] * dim + i] = 1.0;  // Q = P^T where P[i, perm[i]] = 1
    qt[i * dim + perm[i]] = 1.0;
  }
  Q = Tensor::from({dim, dim}, std::move(q));
  Qt = Tensor::from({dim, dim}, std::move(qt));
  std::vector<double> lo(dim * dim, 0.0), up(dim * dim, 0.0), id(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    id[i * dim + i] = 1.0;
    for (std::size_t j = 0; j < dim; ++j) {
      if (i > j) lo[i * dim + j] = 1.0;
      if (i < j) up[i * dim + j] = 1.0;
    }
  }
  lower_mask = Tensor::from({dim, dim}, std::move(lo));
  upper_mask = Tensor::from({dim, dim}, std::move(up));
  eye = Tensor::from({dim, dim}, std::move(id));
}

void LULinearLayer::check_diag() const {
  for (double ld : *logdiag.value) {
    if (std::exp(ld) < kDiagFloor) {
      throw Error(Error::Code::Singular,
                  "LU layer " + logdiag.name + ": diagonal entry below " + std::to_string(kDiagFloor));
    }
  }
}

Tensor LULinearLayer::factor_a() {
  // U^T: strictly-lower entries from raw_a, diagonal exp(logdiag).
  Tensor d = exp_t(logdiag.use());
  Tensor diag = mul(eye, broadcast_to(d, {dim, dim}));
  return add(mul(lower_mask, raw_a.use()), diag);
}

Tensor LULinearLayer::factor_b() {
  // L^T: unit upper-triangular.
  return add(eye, mul(upper_mask, raw_b.use()));
}

Tensor LULinearLayer::forward(const Tensor& x, Tensor& logdet) {
  check_diag();
  Tensor y = matmul(matmul(matmul(x, factor_a()), factor_b()), Q);
  logdet = add(logdet, sum_last(logdiag.use()));
  return y;
}

Tensor LULinearLayer::inverse(const Tensor& y, Tensor& logdet) {
  check_diag();
  const std::size_t D = dim;
  Tensor A = factor_a();
  Tensor Bm = factor_b();
  Tensor t1 = matmul(y, Qt);  // undo the permutation

  // Solve w * Bm = t1 (Bm unit upper-triangular):
  //   w_j = t1_j - sum_{i<j} w_i Bm[i,j], left to right.
  Tensor w_run;  // [B, j] columns solved so far
  for (std::size_t j = 0; j < D; ++j) {
    Tensor wj = slice(t1, j, j + 1);
    if (j > 0) {
      // Column j of Bm, rows 0..j-1 (Bm[i,j] = flat[i*D + j]): extract the
      // column via a last-axis slice, then its prefix.
      Tensor col = reshape(slice(Bm, j, j + 1), {D});
      Tensor pre = reshape(slice(col, 0, j), {j, 1});
      wj = sub(wj, matmul(w_run, pre));
    }
    w_run = j == 0 ? wj : concat(w_run, wj);
  }

  // Solve v * A = w (A lower-triangular, diag exp(logdiag)):
  //   v_j = (w_j - sum_{i>j} v_i A[i,j]) / A[j,j], right to left.
  Tensor d = exp_t(logdiag.use());
  Tensor v_run;  // columns j..D-1, ascending order, built by prepending
  for (std::size_t j = D; j-- > 0;) {
    Tensor vj = slice(w_run, j, j + 1);
    if (j + 1 < D) {
      Tensor col = reshape(slice(A, j, j + 1), {D});
      Tensor tail = reshape(slice(col, j + 1, D), {D - 1 - j, 1});
      vj = sub(vj, matmul(v_run, tail));
    }
    vj = div(vj, slice(d, j, j + 1));
    v_run = (j + 1 == D) ? vj : concat(vj, v_run);
  }
  logdet = add(logdet, sum_last(logdiag.use()));
  return v_run;
}

void LULinearLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&raw_a);
  out.push_back(&raw_b);
  out.push_back(&logdiag);
}

// ---- FlowStack ---------------------------------------------------------------

FlowStack::FlowStack(const std::string& name, std::size_t dim_, std::size_t ctx_dim_,
                     std::size_t n_couplings, std::size_t hidden, Rng& rng, bool random_perm)
    : dim(dim_), ctx_dim(ctx_dim_) {
  if (dim == 0 || n_couplings == 0) {
    throw Error(Error::Code::Config, "flow stack needs dim >= 1 and at least one layer");
  }
  if (dim == 1) {
    // No meaningful split exists; couplings are replaced by LU (pure scale)
    // layers so the stack stays invertible with an exact log-determinant.
    for (std::size_t i = 0; i < n_couplings; ++i) {
      lus.emplace_back(name + ".lu" + std::to_string(i), dim, rng, random_perm);
      order.push_back({true, i});
    }
    return;
  }
  couplings.reserve(n_couplings);
  lus.reserve(n_couplings - 1);
  for (std::size_t i = 0; i < n_couplings; ++i) {
    couplings.emplace_back(name + ".c" + std::to_string(i), dim, ctx_dim, hidden,
                           static_cast<int>(i % 2), rng);
    order.push_back({false, i});
    if (i + 1 < n_couplings) {
      lus.emplace_back(name + ".lu" + std::to_string(i), dim, rng, random_perm);
      order.push_back({true, i});
    }
  }
}

Tensor FlowStack::forward(Tensor x, const Tensor& ctx, Tensor& logdet) {
  for (const Entry& e : order) {
    x = e.is_lu ? lus[e.idx].forward(x, logdet) : couplings[e.idx].forward(x, ctx, logdet);
  }
  return x;
}

Tensor FlowStack::inverse(Tensor y, const Tensor& ctx, Tensor& logdet) {
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    y = it->is_lu ? lus[it->idx].inverse(y, logdet) : couplings[it->idx].inverse(y, ctx, logdet);
  }
  return y;
}

void FlowStack::collect(std::vector<Parameter*>& out) {
  for (const Entry& e : order) {
    if (e.is_lu) {
      lus[e.idx].collect(out);
    } else {
      couplings[e.idx].collect(out);
    }
  }
}

// ---- FlowDistribution --------------------------------------------------------

namespace {

Tensor zero_logdet_like(const Tensor& mean) {
  if (mean.rank() != 2) {
    throw Error(Error::Code::Shape, "flow base must be [B,D], got " + shape_str(mean.shape()));
  }
  return Tensor::zeros({mean.shape()[0], 1});
}

}  // namespace

std::pair<Tensor, Tensor> flow_sample_with_noise(const FlowDistribution& d, const Tensor& eps) {
  Tensor x0 = sample_with_noise(d.base, eps);
  Tensor lq0 = log_prob(d.base, x0);
  if (d.stack == nullptr) return {x0, lq0};
  Tensor logdet = zero_logdet_like(d.base.mean);
  Tensor x = d.stack->forward(x0, d.context, logdet);
  return {x, sub(lq0, logdet)};
}

std::pair<Tensor, Tensor> flow_sample(const FlowDistribution& d, Rng& rng) {
  return flow_sample_with_noise(d, noise_like(d.base.mean, rng));
}

Tensor flow_log_prob(const FlowDistribution& d, const Tensor& x) {
  if (d.stack == nullptr) return log_prob(d.base, x);
  Tensor logdet = zero_logdet_like(d.base.mean);
  Tensor x0 = d.stack->inverse(x, d.context, logdet);
  return sub(log_prob(d.base, x0), logdet);
}

}  // namespace flowbelief
