#pragma once

#include "flowbelief/rng.hpp"
#include "flowbelief/tensor.hpp"

namespace flowbelief {

inline constexpr double kLog2Pi = 1.8378770664093454836;

// Diagonal Gaussian over the last axis.  mean and std share a shape [..,D];
// std must be positive (use std_from_raw for trainable scales).  Per-row
// log-densities come back keep-dim, [B,D] -> [B,1].
struct DiagonalGaussian {
  Tensor mean;
  Tensor std;
};

// Positive scale from an unconstrained parameter: softplus(raw) + 1e-4.
// The floor keeps densities and KLs finite no matter how far raw drifts.
inline Tensor std_from_raw(const Tensor& raw) { return add_const(softplus_t(raw), 1e-4); }

inline DiagonalGaussian make_diag_gaussian(Tensor mean, Tensor raw_std) {
  return DiagonalGaussian{std::move(mean), std_from_raw(raw_std)};
}

// Constant standard-normal tensor with x's shape (not connected to the tape).
inline Tensor noise_like(const Tensor& x, Rng& rng) {
  std::vector<double> eps(x.size());
  rng.fill_normal(eps);
  return Tensor::from(x.shape(), std::move(eps));
}

// Reparameterised sample mean + std * eps: gradients flow into mean and std,
// the noise is a constant.
inline Tensor sample_with_noise(const DiagonalGaussian& d, const Tensor& eps) {
  return add(d.mean, mul(d.std, eps));
}

inline Tensor sample_reparam(const DiagonalGaussian& d, Rng& rng) {
  return sample_with_noise(d, noise_like(d.mean, rng));
}

inline Tensor log_prob(const DiagonalGaussian& d, const Tensor& x) {
  Tensor t = div(sub(x, d.mean), d.std);
  Tensor per_dim = sub(scale(square_t(t), -0.5), add_const(log_t(d.std), 0.5 * kLog2Pi));
  return sum_last(per_dim);
}

// KL(q || p) in closed form, per row.
inline Tensor analytic_kl(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  Tensor log_ratio = sub(log_t(p.std), log_t(q.std));
  Tensor num = add(square_t(q.std), square_t(sub(q.mean, p.mean)));
  Tensor frac = div(num, scale(square_t(p.std), 2.0));
  return sum_last(add_const(add(log_ratio, frac), -0.5));
}

// Single-sample-average estimate of KL(q || p) using reparameterised draws
// from q.  Converges to analytic_kl as n grows; stays differentiable.
inline Tensor monte_carlo_kl(const DiagonalGaussian& q, const DiagonalGaussian& p, int n, Rng& rng) {
  if (n <= 0) throw Error(Error::Code::Config, "monte_carlo_kl: need n >= 1 samples");
  Tensor acc;
  for (int i = 0; i < n; ++i) {
    Tensor x = sample_reparam(q, rng);
    Tensor diff = sub(log_prob(q, x), log_prob(p, x));
    acc = (i == 0) ? diff : add(acc, diff);
  }
  return scale(acc, 1.0 / n);
}

}  // namespace flowbelief
