#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "flowbelief/elbo.hpp"

using namespace flowbelief;

namespace {

Tensor randt(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v));
}

ModelConfig tiny_config(bool use_flows) {
  ModelConfig cfg;
  cfg.obs = ObservationSpec::vec(3);
  cfg.action_dim = 2;
  cfg.z_dim = 5;
  cfg.s_dim = 4;
  cfg.embed_dim = 4;
  cfg.hidden = 5;
  cfg.flow_couplings = 2;
  cfg.flow_hidden = 5;
  cfg.use_flows = use_flows;
  return cfg;
}

SequenceBatch make_batch(const ModelConfig& cfg, std::size_t B, std::size_t T, std::uint64_t seed) {
  Rng rng(seed);
  SequenceBatch b;
  for (std::size_t t = 0; t < T; ++t) {
    b.obs.push_back(randt({B, cfg.obs.dim}, rng));
    b.actions.push_back(randt({B, cfg.action_dim}, rng));
    b.rewards.push_back(randt({B, 1}, rng));
  }
  return b;
}

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.size());
}

}  // namespace

TEST_CASE("loss assembles the reported terms") {
  for (bool flows : {false, true}) {
    CAPTURE(flows);
    Rng rng(31);
    BeliefModel model(tiny_config(flows), rng);
    SequenceBatch batch = make_batch(model.cfg, 2, 3, 7);

    LossConfig cfg;
    cfg.free_nats = 1.0;
    cfg.kl_scale = 0.8;
    Rng noise(5);
    Tape tape;
    ModelLoss ml = compute_model_loss(model, batch, cfg, noise);
    CHECK(ml.loss.size() == 1);
    CHECK(ml.states.size() == 3);

    const double recomposed = -(ml.recon_ll + ml.reward_ll - cfg.kl_scale * ml.kl_clipped);
    CHECK(ml.loss.value() == doctest::Approx(recomposed).epsilon(1e-10));
    // free nats only ever raise the KL term
    CHECK(ml.kl_clipped >= ml.kl_raw - 1e-12);
    CHECK(ml.kl_clipped >= cfg.free_nats - 1e-12);
  }
}

TEST_CASE("reward term can be excluded") {
  Rng rng(32);
  BeliefModel model(tiny_config(false), rng);
  SequenceBatch batch = make_batch(model.cfg, 2, 2, 8);

  LossConfig cfg;
  cfg.include_reward = false;
  Rng noise(6);
  ModelLoss ml = compute_model_loss(model, batch, cfg, noise);
  CHECK(ml.reward_ll == 0.0);
  const double recomposed = -(ml.recon_ll - cfg.kl_scale * ml.kl_clipped);
  CHECK(ml.loss.value() == doctest::Approx(recomposed).epsilon(1e-10));
}

TEST_CASE("free nats zero the gradient into the prior when the floor binds") {
  for (bool flows : {false, true}) {
    CAPTURE(flows);
    Rng rng(33);
    BeliefModel model(tiny_config(flows), rng);
    SequenceBatch batch = make_batch(model.cfg, 2, 2, 9);
    std::vector<Parameter*> params = model.parameters();

    auto prior_grad_norm = [&](double free_nats) {
      LossConfig cfg;
      cfg.free_nats = free_nats;
      Rng noise(11);
      Tape tape;
      ModelLoss ml = compute_model_loss(model, batch, cfg, noise);
      tape.backward(ml.loss);
      double norm = 0.0;
      for (Parameter* p : params) {
        if (p->name.rfind("prior", 0) != 0) continue;
        Tensor leaf = p->use();
        if (!tape.has_grad(leaf.node())) continue;
        for (double g : tape.grad_view(leaf.node())) norm += g * g;
      }
      return std::sqrt(norm);
    };

    // A floor far above any achievable KL freezes every prior parameter.
    CHECK(prior_grad_norm(1e6) == 0.0);
    CHECK(prior_grad_norm(0.0) > 1e-12);
  }
}

TEST_CASE("multi-sample bound matches a hand-rolled filtering pass") {
  Rng rng(34);
  BeliefModel model(tiny_config(true), rng);
  SequenceBatch batch = make_batch(model.cfg, 2, 3, 10);

  Rng n1(21);
  const double got = evaluate_elbo(model, batch, 2, n1);

  Rng n2(21);
  double total = 0.0;
  for (int s = 0; s < 2; ++s) {
    BeliefState st = model.initial_belief(2);
    for (std::size_t t = 0; t < batch.length(); ++t) {
      st = model.observe_step(st, batch.actions[t], batch.obs[t], n2);
      total += mean_of(log_prob(model.decode(st.z, st.s), batch.obs[t])) -
               (mean_of(st.logq) - mean_of(st.logp));
    }
  }
  CHECK(got == doctest::Approx(total / 6.0).epsilon(1e-12));
}

TEST_CASE("same seed reproduces the loss bit for bit") {
  Rng rng(35);
  BeliefModel model(tiny_config(true), rng);
  SequenceBatch batch = make_batch(model.cfg, 2, 3, 12);
  LossConfig cfg;

  Rng a(77), b(77);
  ModelLoss la = compute_model_loss(model, batch, cfg, a);
  ModelLoss lb = compute_model_loss(model, batch, cfg, b);
  CHECK(la.loss.value() == lb.loss.value());
  CHECK(la.kl_raw == lb.kl_raw);
}

TEST_CASE("gap identity vanishes for the exact one-step posterior") {
  GapCheckSpec spec;
  spec.dim = 2;
  spec.steps = 4;
  spec.A = {0.9, 0.1, 0.0, 0.8};
  spec.q_var = {0.09, 0.09};
  spec.r_var = {0.01, 0.01};
  for (std::size_t i = 0; i < 2; ++i) {
    const double q = spec.q_var[i], r = spec.r_var[i];
    spec.gain.push_back(q / (q + r));
    spec.q_std.push_back(std::sqrt(q * r / (q + r)));
  }
  Rng sim(3);
  std::vector<double> s(2, 0.0);
  for (std::size_t t = 0; t < spec.steps; ++t) {
    std::vector<double> next(2, 0.0);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 2; ++j) next[i] += spec.A[i * 2 + j] * s[j];
      next[i] += std::sqrt(spec.q_var[i]) * sim.normal();
    }
    s = next;
    for (std::size_t i = 0; i < 2; ++i) {
      spec.obs.push_back(s[i] + std::sqrt(spec.r_var[i]) * sim.normal());
    }
  }

  Rng rng(41);
  GapCheckResult r = elbo_gap_check(spec, 500, rng);
  CHECK(std::fabs(r.lhs_mean) < 1e-10);
  CHECK(std::fabs(r.rhs_mean) < 1e-10);
  CHECK(r.consistent());
}

TEST_CASE("gap identity holds for a deliberately suboptimal filter") {
  GapCheckSpec spec;
  spec.dim = 2;
  spec.steps = 5;
  spec.A = {0.9, 0.1, 0.0, 0.8};
  spec.q_var = {0.09, 0.09};
  spec.r_var = {0.01, 0.01};
  spec.gain = {0.5, 0.6};
  spec.q_std = {0.15, 0.2};

  Rng sim(4);
  std::vector<double> s(2, 0.0);
  for (std::size_t t = 0; t < spec.steps; ++t) {
    std::vector<double> next(2, 0.0);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 2; ++j) next[i] += spec.A[i * 2 + j] * s[j];
      next[i] += std::sqrt(spec.q_var[i]) * sim.normal();
    }
    s = next;
    for (std::size_t i = 0; i < 2; ++i) {
      spec.obs.push_back(s[i] + std::sqrt(spec.r_var[i]) * sim.normal());
    }
  }

  Rng rng(42);
  GapCheckResult r = elbo_gap_check(spec, 20000, rng);
  CHECK(r.rhs_mean > 0.05);             // the filter really is off the posterior
  CHECK(r.consistent(3.0));             // yet both sides of the identity agree
  CHECK(r.lhs_se > 0.0);
  CHECK(r.rhs_se < r.lhs_se);           // closed-form side is the quieter one
}

TEST_CASE("bad inputs are rejected") {
  Rng rng(36);
  BeliefModel model(tiny_config(false), rng);

  SequenceBatch empty;
  Rng noise(1);
  CHECK_THROWS_WITH_AS(compute_model_loss(model, empty, LossConfig{}, noise),
                       doctest::Contains("[config]"), Error);

  SequenceBatch bad = make_batch(model.cfg, 2, 2, 13);
  bad.rewards.pop_back();
  CHECK_THROWS_WITH_AS(compute_model_loss(model, bad, LossConfig{}, noise),
                       doctest::Contains("[shape]"), Error);

  SequenceBatch ok = make_batch(model.cfg, 2, 2, 14);
  CHECK_THROWS_AS(evaluate_elbo(model, ok, 0, noise), Error);

  GapCheckSpec spec;
  spec.dim = 2;
  spec.steps = 1;
  CHECK_THROWS_AS(elbo_gap_check(spec, 10, noise), Error);
}
