#include "flowbelief/elbo.hpp"

#include <cmath>

namespace flowbelief {

namespace {

double mean_of(const Tensor& t) {
  const auto& v = t.data();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

void validate_batch(const BeliefModel& model, const SequenceBatch& batch) {
  const std::size_t T = batch.length();
  if (T == 0) throw Error(Error::Code::Config, "sequence batch is empty");
  if (batch.actions.size() != T || batch.rewards.size() != T) {
    throw Error(Error::Code::Shape, "sequence batch: obs/actions/rewards lengths differ");
  }
  const std::size_t B = batch.batch();
  for (std::size_t t = 0; t < T; ++t) {
    if (batch.obs[t].shape() != Shape{B, model.cfg.obs.dim} ||
        batch.actions[t].shape() != Shape{B, model.cfg.action_dim} ||
        batch.rewards[t].shape() != Shape{B, 1}) {
      throw Error(Error::Code::Shape, "sequence batch: bad tensor shape at step " +
                                          std::to_string(t));
    }
  }
}

}  // namespace

ModelLoss compute_model_loss(BeliefModel& model, const SequenceBatch& batch,
                             const LossConfig& cfg, Rng& rng) {
  validate_batch(model, batch);
  const std::size_t T = batch.length();

  ModelLoss out;
  out.states.reserve(T);

  BeliefState st = model.initial_belief(batch.batch());
  Tensor total;  // [B,1] running sum of per-row objectives
  for (std::size_t t = 0; t < T; ++t) {
    st = model.observe_step(st, batch.actions[t], batch.obs[t], rng);
    out.states.push_back(st);

    Tensor recon = log_prob(model.decode(st.z, st.s), batch.obs[t]);
    Tensor kl = model.cfg.use_flows ? sub(st.logq, st.logp) : analytic_kl(st.q0, st.p0);
    Tensor clipped = add_const(relu_t(add_const(kl, -cfg.free_nats)), cfg.free_nats);

    Tensor term = sub(recon, scale(clipped, cfg.kl_scale));
    out.recon_ll += mean_of(recon);
    out.kl_raw += mean_of(kl);
    out.kl_clipped += mean_of(clipped);
    if (cfg.include_reward) {
      Tensor rll = log_prob(model.predict_reward(st.z, st.s), batch.rewards[t]);
      term = add(term, rll);
      out.reward_ll += mean_of(rll);
    }
    total = (t == 0) ? term : add(total, term);
  }

  const double inv_T = 1.0 / static_cast<double>(T);
  out.loss = scale(mean(total), -inv_T);
  out.recon_ll *= inv_T;
  out.reward_ll *= inv_T;
  out.kl_raw *= inv_T;
  out.kl_clipped *= inv_T;
  return out;
}

double evaluate_elbo(BeliefModel& model, const SequenceBatch& batch, int n_samples, Rng& rng) {
  validate_batch(model, batch);
  if (n_samples <= 0) throw Error(Error::Code::Config, "evaluate_elbo: need n_samples >= 1");

  NoGradGuard guard;
  const std::size_t T = batch.length();
  double total = 0.0;
  for (int n = 0; n < n_samples; ++n) {
    BeliefState st = model.initial_belief(batch.batch());
    for (std::size_t t = 0; t < T; ++t) {
      st = model.observe_step(st, batch.actions[t], batch.obs[t], rng);
      Tensor recon = log_prob(model.decode(st.z, st.s), batch.obs[t]);
      total += mean_of(recon) - (mean_of(st.logq) - mean_of(st.logp));
    }
  }
  return total / (static_cast<double>(n_samples) * static_cast<double>(T));
}

namespace {

constexpr double kLog2PiGap = 1.8378770664093454836;

double diag_gauss_logpdf(const double* x, const double* mean, const double* var, std::size_t d) {
  double total = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = x[i] - mean[i];
    total += -0.5 * (diff * diff / var[i] + std::log(var[i]) + kLog2PiGap);
  }
  return total;
}

struct PathAccumulator {
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  void push(double v) {
    sum += v;
    sum_sq += v * v;
    ++n;
  }
  double mean() const { return sum / static_cast<double>(n); }
  double se() const {
    const double m = mean();
    const double var = sum_sq / static_cast<double>(n) - m * m;
    return std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
  }
};

void validate_gap_spec(const GapCheckSpec& s) {
  const std::size_t D = s.dim;
  if (D == 0 || s.steps == 0) throw Error(Error::Code::Config, "gap check: empty system");
  if (s.A.size() != D * D || s.q_var.size() != D || s.r_var.size() != D ||
      s.gain.size() != D || s.q_std.size() != D || s.obs.size() != s.steps * D) {
    throw Error(Error::Code::Shape, "gap check: inconsistent spec sizes");
  }
  for (std::size_t i = 0; i < D; ++i) {
    if (s.q_var[i] <= 0 || s.r_var[i] <= 0 || s.q_std[i] <= 0) {
      throw Error(Error::Code::Config, "gap check: variances must be positive");
    }
  }
}

}  // namespace

bool GapCheckResult::consistent(double n_se) const {
  const double combined = std::sqrt(lhs_se * lhs_se + rhs_se * rhs_se);
  // The absolute floor covers the degenerate exact-filter case where both
  // sides collapse to rounding noise and the standard errors vanish with them.
  return std::fabs(lhs_mean - rhs_mean) <= n_se * combined + 1e-9;
}

GapCheckResult elbo_gap_check(const GapCheckSpec& spec, std::size_t n_samples, Rng& rng) {
  validate_gap_spec(spec);
  if (n_samples < 2) throw Error(Error::Code::Config, "gap check: need at least 2 samples");

  const std::size_t D = spec.dim, T = spec.steps;
  std::vector<double> s_prev(D), m(D), pred_var(D), post_mean(D), post_var(D);
  std::vector<double> q_mean(D), q_var_vec(D), s_cur(D);
  for (std::size_t i = 0; i < D; ++i) q_var_vec[i] = spec.q_std[i] * spec.q_std[i];

  // One full filter pass; `want_lhs` selects which side of the identity the
  // path contributes to, so the two estimates use disjoint randomness.
  auto run_path = [&](bool want_lhs) {
    std::fill(s_prev.begin(), s_prev.end(), 0.0);
    double acc = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double* o = spec.obs.data() + t * D;
      // prior over s_t given the sampled s_{t-1}: N(A s_prev, q_var)
      for (std::size_t i = 0; i < D; ++i) {
        double mi = 0.0;
        for (std::size_t j = 0; j < D; ++j) mi += spec.A[i * D + j] * s_prev[j];
        m[i] = mi;
        pred_var[i] = spec.q_var[i] + spec.r_var[i];
        post_var[i] = spec.q_var[i] * spec.r_var[i] / (spec.q_var[i] + spec.r_var[i]);
        post_mean[i] = post_var[i] * (mi / spec.q_var[i] + o[i] / spec.r_var[i]);
        q_mean[i] = mi + spec.gain[i] * (o[i] - mi);
      }

      if (want_lhs) {
        for (std::size_t i = 0; i < D; ++i) s_cur[i] = q_mean[i] + spec.q_std[i] * rng.normal();
        const double log_pred = diag_gauss_logpdf(o, m.data(), pred_var.data(), D);
        const double log_obs = diag_gauss_logpdf(o, s_cur.data(), spec.r_var.data(), D);
        const double log_trans = diag_gauss_logpdf(s_cur.data(), m.data(), spec.q_var.data(), D);
        const double log_q = diag_gauss_logpdf(s_cur.data(), q_mean.data(), q_var_vec.data(), D);
        acc += log_pred - (log_obs + log_trans - log_q);
      } else {
        for (std::size_t i = 0; i < D; ++i) {
          const double lr = 0.5 * std::log(post_var[i] / q_var_vec[i]);
          const double diff = q_mean[i] - post_mean[i];
          acc += lr + (q_var_vec[i] + diff * diff) / (2.0 * post_var[i]) - 0.5;
          s_cur[i] = q_mean[i] + spec.q_std[i] * rng.normal();
        }
      }
      s_prev = s_cur;
    }
    return acc;
  };

  GapCheckResult out;
  PathAccumulator lhs, rhs;
  for (std::size_t n = 0; n < n_samples; ++n) lhs.push(run_path(true));
  for (std::size_t n = 0; n < n_samples; ++n) rhs.push(run_path(false));
  out.lhs_mean = lhs.mean();
  out.lhs_se = lhs.se();
  out.rhs_mean = rhs.mean();
  out.rhs_se = rhs.se();
  return out;
}

}  // namespace flowbelief
