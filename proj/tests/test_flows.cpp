#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "flowbelief/flows.hpp"
#include "oracles.hpp"

using namespace flowbelief;

namespace {

Tensor randt(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Kick a freshly built (identity) stack into a generic non-linear map.
void perturb(FlowStack& st, Rng& rng, double mag = 0.4) {
  std::vector<Parameter*> ps;
  st.collect(ps);
  for (Parameter* p : ps) {
    for (double& v : *p->value) v = rng.uniform(-mag, mag);
  }
}

std::vector<double> run_forward(FlowStack& st, const std::vector<double>& x, const Tensor& ctx,
                                double* logdet_out = nullptr) {
  Tensor ld = Tensor::zeros({1, 1});
  Tensor y = st.forward(Tensor::from({1, x.size()}, x), ctx, ld);
  if (logdet_out) *logdet_out = ld.value();
  return y.data();
}

}  // namespace

TEST_CASE("a fresh stack is exactly the identity with zero log-determinant") {
  Rng rng(41);
  FlowStack st("f", 4, 3, 3, 16, rng);
  Tensor x = randt({2, 4}, rng);
  Tensor ctx = randt({2, 3}, rng);
  Tensor ld = Tensor::zeros({2, 1});
  Tensor y = st.forward(x, ctx, ld);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  CHECK(ld[0] == 0.0);
  CHECK(ld[1] == 0.0);

  // Hence the flow density equals the base density exactly.
  FlowDistribution d{DiagonalGaussian{randt({2, 4}, rng), randt({2, 4}, rng, 0.5, 1.5)}, &st, ctx};
  Tensor lp = flow_log_prob(d, x);
  Tensor lp0 = log_prob(d.base, x);
  CHECK(lp[0] == doctest::Approx(lp0[0]).epsilon(1e-14));
  CHECK(lp[1] == doctest::Approx(lp0[1]).epsilon(1e-14));
}

TEST_CASE("a single coupling layer passes one block through unchanged") {
  Rng rng(42);
  FlowStack st("f", 5, 2, 1, 16, rng);  // one coupling, no LU
  perturb(st, rng);
  Tensor x = randt({1, 5}, rng);
  Tensor ctx = randt({1, 2}, rng);
  Tensor ld = Tensor::zeros({1, 1});
  Tensor y = st.forward(x, ctx, ld);
  // parity 0: first k = 2 dims pass through, last 3 transformed
  CHECK(y[0] == x[0]);
  CHECK(y[1] == x[1]);
  CHECK(y[2] != x[2]);
}

TEST_CASE("forward then inverse round-trips to 1e-9") {
  Rng rng(43);
  for (std::size_t D : {2, 3, 4, 5, 6}) {
    FlowStack st("f", D, 3, 3, 16, rng, /*random_perm=*/true);
    perturb(st, rng);
    Tensor x = randt({4, D}, rng);
    Tensor ctx = randt({4, 3}, rng);
    Tensor ld_f = Tensor::zeros({4, 1});
    Tensor y = st.forward(x, ctx, ld_f);
    Tensor ld_i = Tensor::zeros({4, 1});
    Tensor back = st.inverse(y, ctx, ld_i);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(back[i] - x[i]) < 1e-9);
    for (std::size_t b = 0; b < 4; ++b) CHECK(std::fabs(ld_f[b] - ld_i[b]) < 1e-9);
  }
}

TEST_CASE("reported log-determinant matches the numeric Jacobian") {
  Rng rng(44);
  for (std::size_t D : {2, 3, 4, 5, 6}) {
    FlowStack st("f", D, 2, 3, 12, rng, /*random_perm=*/true);
    perturb(st, rng, 0.3);
    Tensor ctx = randt({1, 2}, rng);
    std::vector<double> x0(D);
    for (double& v : x0) v = rng.uniform(-1, 1);

    double reported = 0.0;
    run_forward(st, x0, ctx, &reported);
    auto f = [&](const std::vector<double>& x) { return run_forward(st, x, ctx); };
    bool stable = false;
    const double numeric = oracle::numeric_logabsdet(f, x0, &stable);
    CHECK(stable);
    CHECK(std::fabs(reported - numeric) < 1e-6);
  }
}

TEST_CASE("sampled log-density agrees with the evaluated density at the sample") {
  Rng rng(45);
  FlowStack st("f", 4, 3, 3, 16, rng);
  perturb(st, rng);
  Tensor ctx = randt({3, 3}, rng);
  FlowDistribution d{DiagonalGaussian{randt({3, 4}, rng), randt({3, 4}, rng, 0.5, 1.5)}, &st, ctx};
  auto [x, logq] = flow_sample(d, rng);
  Tensor lp = flow_log_prob(d, x);
  for (std::size_t b = 0; b < 3; ++b) CHECK(std::fabs(logq[b] - lp[b]) < 1e-9);
}

TEST_CASE("flow density is normalized (2-D quadrature)") {
  Rng rng(46);
  FlowStack st("f", 2, 2, 3, 12, rng);
  perturb(st, rng, 0.05);  // mild map so the density mass stays inside the grid
  Tensor ctx1 = randt({1, 2}, rng);
  const std::vector<double> ctxv = ctx1.data();

  const int N = 801;
  const double lo = -20.0, hi = 20.0, h = (hi - lo) / (N - 1);
  // Evaluate row-chunks of the grid as batches to bound memory.
  double mass = 0.0;
  for (int i = 0; i < N; ++i) {
    std::vector<double> chunk;
    chunk.reserve(N * 2);
    for (int j = 0; j < N; ++j) {
      chunk.push_back(lo + i * h);
      chunk.push_back(lo + j * h);
    }
    const std::size_t rows = N;
    FlowDistribution d{DiagonalGaussian{broadcast_to(Tensor::from({2}, {0.2, -0.3}), {rows, 2}),
                                        broadcast_to(Tensor::from({2}, {0.9, 0.7}), {rows, 2})},
                       &st, broadcast_to(Tensor::from({2}, ctxv), {rows, 2})};
    Tensor lp = flow_log_prob(d, Tensor::from({rows, 2}, chunk));
    for (std::size_t r = 0; r < rows; ++r) mass += std::exp(lp[r]);
  }
  mass *= h * h;
  CHECK(mass == doctest::Approx(1.0).epsilon(2e-3));
}

TEST_CASE("gradients flow through both flow directions") {
  Rng rng(47);
  FlowStack st("f", 3, 2, 2, 8, rng);
  perturb(st, rng, 0.3);
  std::vector<Parameter*> ps;
  st.collect(ps);
  Parameter mean("mean", {2, 3}, {0.1, -0.2, 0.3, 0.0, 0.2, -0.1});
  Parameter raw("raw", {2, 3}, {0.2, 0.1, -0.1, 0.0, 0.3, 0.1});
  Tensor ctx = randt({2, 2}, rng);
  Tensor xq = randt({2, 3}, rng);

  // Density (inverse) path, including the triangular solves.
  auto build_inv = [&] {
    FlowDistribution d{make_diag_gaussian(mean.use(), raw.use()), &st, ctx};
    return sum(flow_log_prob(d, xq));
  };
  std::vector<Parameter*> all = ps;
  all.push_back(&mean);
  all.push_back(&raw);
  CHECK_LT(oracle::check_gradients(build_inv, all), 1e-5);

  // Sampling (forward) path with frozen noise.
  Tensor eps = randt({2, 3}, rng);
  auto build_fwd = [&] {
    FlowDistribution d{make_diag_gaussian(mean.use(), raw.use()), &st, ctx};
    auto [x, logq] = flow_sample_with_noise(d, eps);
    return add(sum(logq), sum(square_t(x)));
  };
  CHECK_LT(oracle::check_gradients(build_fwd, all), 1e-5);
}

TEST_CASE("context changes the transported density") {
  Rng rng(48);
  FlowStack st("f", 3, 2, 2, 12, rng);
  perturb(st, rng);
  Tensor x = randt({1, 3}, rng);
  Tensor ld1 = Tensor::zeros({1, 1}), ld2 = Tensor::zeros({1, 1});
  Tensor y1 = st.forward(x, Tensor::from({1, 2}, {0.5, -0.5}), ld1);
  Tensor y2 = st.forward(x, Tensor::from({1, 2}, {-1.0, 1.0}), ld2);
  double diff = 0.0;
  for (std::size_t i = 0; i < 3; ++i) diff += std::fabs(y1[i] - y2[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("one-dimensional stacks degenerate to LU-only and stay exact") {
  Rng rng(49);
  FlowStack st("f", 1, 0, 3, 8, rng);
  CHECK(st.couplings.empty());
  CHECK(st.lus.size() == 3);
  perturb(st, rng, 0.5);

  Tensor x = randt({3, 1}, rng);
  Tensor ld_f = Tensor::zeros({3, 1});
  Tensor y = st.forward(x, Tensor(), ld_f);
  Tensor ld_i = Tensor::zeros({3, 1});
  Tensor back = st.inverse(y, Tensor(), ld_i);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::fabs(back[i] - x[i]) < 1e-12);

  double reported = 0.0;
  std::vector<double> x0 = {0.37};
  run_forward(st, x0, Tensor(), &reported);
  auto f = [&](const std::vector<double>& v) { return run_forward(st, v, Tensor()); };
  CHECK(std::fabs(reported - oracle::logabsdet(oracle::numeric_jacobian(f, x0), 1)) < 1e-7);

  // 1-D normalization by quadrature.
  const int N = 20001;
  const double lo = -20, hi = 20, h = (hi - lo) / (N - 1);
  std::vector<double> grid(N);
  for (int i = 0; i < N; ++i) grid[i] = lo + i * h;
  FlowDistribution d{DiagonalGaussian{Tensor::zeros({static_cast<std::size_t>(N), 1}),
                                      Tensor::full({static_cast<std::size_t>(N), 1}, 0.8)},
                     &st, Tensor()};
  Tensor lp = flow_log_prob(d, Tensor::from({static_cast<std::size_t>(N), 1}, grid));
  double mass = 0.0;
  for (int i = 0; i < N; ++i) mass += std::exp(lp[i]);
  CHECK(mass * h == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("LU layers reject a collapsing diagonal") {
  Rng rng(50);
  FlowStack st("f", 3, 0, 2, 8, rng);
  for (double& v : *st.lus[0].logdiag.value) v = -30.0;
  Tensor ld = Tensor::zeros({1, 1});
  CHECK_THROWS_WITH_AS(st.forward(Tensor::zeros({1, 3}), Tensor(), ld),
                       doctest::Contains("[singular]"), Error);
}

TEST_CASE("frozen permutations permute at init and stay fixed") {
  Rng rng(51);
  LULinearLayer lu("lu", 4, rng, /*random_perm=*/true);
  // With zero raw factors the layer is exactly the permutation x -> P x.
  Tensor x = randt({1, 4}, rng);
  Tensor ld = Tensor::zeros({1, 1});
  Tensor y = lu.forward(x, ld);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == x[lu.perm[i]]);
  CHECK(ld.value() == 0.0);  // permutations preserve volume

  // The permutation is not a Parameter: collect() exposes only L/U factors.
  std::vector<Parameter*> ps;
  lu.collect(ps);
  CHECK(ps.size() == 3);
}
