#pragma once

#include <utility>
#include <vector>

#include "flowbelief/dist.hpp"
#include "flowbelief/nets.hpp"

namespace flowbelief {

// Conditional affine coupling layer.  One block of k = floor(D/2) dims passes
// through unchanged; the other block is scaled and shifted by functions of
// the pass-through block and the context.  Parity alternates which block
// passes through.  The conditioner output is zero at initialization, so the
// layer starts as the identity map.  Log-scales are stabilized through
// tanh(raw) * 5, bounding |log scale| by 5.
struct AffineCouplingLayer {
  std::size_t dim = 0, ctx_dim = 0, k = 0;
  int parity = 0;
  ResidualParamNet net;

  AffineCouplingLayer() = default;
  AffineCouplingLayer(const std::string& name, std::size_t dim, std::size_t ctx_dim,
                      std::size_t hidden, int parity, Rng& rng);

  // Appends the forward log|det Jacobian| (shape [B,1]) to logdet.
  Tensor forward(const Tensor& x, const Tensor& ctx, Tensor& logdet);
  // Exact inverse; logdet accumulates the forward log-determinant evaluated
  // at the preimage, so forward and inverse report identical totals.
  Tensor inverse(const Tensor& y, const Tensor& ctx, Tensor& logdet);
  void collect(std::vector<Parameter*>& out);

 private:
  Tensor scales_and_shift(const Tensor& pass, const Tensor& ctx);
};

// Invertible linear map realized as y = W x with W = P L U: P a frozen
// permutation, L unit lower-triangular, U upper-triangular with positive
// diagonal exp(logdiag).  log|det W| = sum(logdiag).  All factors start at
// identity.  The inverse is built from differentiable triangular solves; a
// diagonal entry below 1e-8 raises a Singular error.
struct LULinearLayer {
  std::size_t dim = 0;
  Parameter raw_a;    // strict lower part of U^T
  Parameter raw_b;    // strict upper part of L^T
  Parameter logdiag;  // log of U's diagonal
  std::vector<std::size_t> perm;  // P as an index map, row i of W takes from L U row perm[i]
  Tensor Q, Qt;                   // constant matrices: Q = P^T and its transpose
  Tensor lower_mask, upper_mask, eye;

  LULinearLayer() = default;
  LULinearLayer(const std::string& name, std::size_t dim, Rng& rng, bool random_perm);

  Tensor forward(const Tensor& x, Tensor& logdet);
  Tensor inverse(const Tensor& y, Tensor& logdet);
  void collect(std::vector<Parameter*>& out);

 private:
  void check_diag() const;
  Tensor factor_a();  // U^T: lower-triangular, diag exp(logdiag)
  Tensor factor_b();  // L^T: unit upper-triangular
};

// Alternating stack: n_couplings coupling layers with an LU layer between
// each consecutive pair (C LU C LU C for n_couplings = 3).  dim == 1 cannot
// support couplings, so the stack degenerates to n_couplings LU layers.
// The whole stack is the identity map at initialization.
struct FlowStack {
  std::size_t dim = 0, ctx_dim = 0;
  std::vector<AffineCouplingLayer> couplings;
  std::vector<LULinearLayer> lus;
  struct Entry {
    bool is_lu;
    std::size_t idx;
  };
  std::vector<Entry> order;

  FlowStack() = default;
  FlowStack(const std::string& name, std::size_t dim, std::size_t ctx_dim,
            std::size_t n_couplings, std::size_t hidden, Rng& rng, bool random_perm = false);

  Tensor forward(Tensor x, const Tensor& ctx, Tensor& logdet);
  Tensor inverse(Tensor y, const Tensor& ctx, Tensor& logdet);
  void collect(std::vector<Parameter*>& out);
};

// A distribution defined by pushing a diagonal-Gaussian base through a
// conditional flow stack.  stack == nullptr degenerates to the plain base
// Gaussian (the analytic-KL ablation path uses this).
struct FlowDistribution {
  DiagonalGaussian base;  // [B,D]
  FlowStack* stack = nullptr;
  Tensor context;  // [B,C]; may be undefined when the stack is unconditioned
};

// Draws x = f(x0, ctx) with x0 reparameterised from the base; returns
// (x, log q(x)) with log q = log q0(x0) - log|det df/dx0|  (both [B,.]).
std::pair<Tensor, Tensor> flow_sample_with_noise(const FlowDistribution& d, const Tensor& eps);
std::pair<Tensor, Tensor> flow_sample(const FlowDistribution& d, Rng& rng);

// Exact density of an arbitrary point: pulls x back through the inverse flow
// and applies the change of variables.
Tensor flow_log_prob(const FlowDistribution& d, const Tensor& x);

}  // namespace flowbelief
