#pragma once
// Simulation environments and datasets used for training and evaluation.
//
// Environments are deliberately small: every one of them exists to probe a
// specific property of the belief model (exact-filter comparison, multimodal
// posteriors, closed-loop control, pixel-like sequence prediction). All
// randomness flows through caller-supplied Rng streams so that episodes are
// reproducible from a seed.

#include <array>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "flowbelief/common.hpp"
#include "flowbelief/rng.hpp"

namespace flowbelief {

struct EnvStep {
  std::vector<double> obs;
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::size_t obs_dim() const = 0;
  virtual std::size_t action_dim() const = 0;
  virtual std::size_t horizon() const = 0;
  // Starts a new episode and returns the first observation.
  virtual std::vector<double> reset(Rng& rng) = 0;
  // Applies an action and returns the next observation. `done` is set on the
  // observation that ends the episode; stepping past it throws.
  virtual EnvStep step(const std::vector<double>& action, Rng& rng) = 0;
};

// ---------------------------------------------------------------------------
// Linear-Gaussian diagnostic system
// ---------------------------------------------------------------------------

// Uncontrolled linear-Gaussian system
//     s_t = A s_{t-1} + w_t,   w_t ~ N(0, diag(q_var))
//     o_t = s_t + v_t,         v_t ~ N(0, diag(r_var))
// with s_0 = 0, so the first latent state is a pure process-noise draw.
// The exact posterior over s_t given o_1..o_t is available in closed form
// (kalman_filter below), which makes this the calibration environment for
// the learned filter. Actions are accepted and ignored; rewards are zero.
class LinearGaussianEnv : public Environment {
 public:
  // Default system: 2-D rotation scaled to spectral radius 0.9,
  // process std 0.3 and observation std 0.1 per dimension.
  LinearGaussianEnv();
  LinearGaussianEnv(std::vector<double> a, std::vector<double> q_var,
                    std::vector<double> r_var, std::size_t horizon);

  std::size_t obs_dim() const override { return dim_; }
  std::size_t action_dim() const override { return 1; }
  std::size_t horizon() const override { return horizon_; }
  std::vector<double> reset(Rng& rng) override;
  EnvStep step(const std::vector<double>& action, Rng& rng) override;

  // System matrices, exposed for exact-filter comparisons.
  std::size_t dim() const { return dim_; }
  const std::vector<double>& transition() const { return a_; }
  const std::vector<double>& process_var() const { return q_var_; }
  const std::vector<double>& obs_var() const { return r_var_; }
  // Current hidden state (diagnostics only; an agent never sees this).
  const std::vector<double>& state() const { return state_; }

 private:
  std::vector<double> observe(Rng& rng);
  void advance(Rng& rng);

  std::size_t dim_ = 0;
  std::vector<double> a_;      // dim x dim, row-major
  std::vector<double> q_var_;  // dim
  std::vector<double> r_var_;  // dim
  std::size_t horizon_ = 0;
  std::vector<double> state_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Exact Kalman filtering (oracle for the linear-Gaussian system)
// ---------------------------------------------------------------------------

struct KalmanEstimate {
  std::vector<double> mean;  // filtered posterior mean, dim
  std::vector<double> cov;   // filtered posterior covariance, dim*dim row-major
  double step_loglik = 0.0;  // innovation log-density log p(o_t | o_<t)
};

struct KalmanResult {
  std::vector<KalmanEstimate> steps;  // one per observation
  double loglik = 0.0;                // exact log p(o_1..o_T)
};

// Runs the exact filter for the system above (C = I, s_0 = 0 deterministic):
// predict with (A, diag(q_var)), update with diag(r_var). `obs` holds one
// row per time step.
KalmanResult kalman_filter(const std::vector<double>& a,
                           const std::vector<double>& q_var,
                           const std::vector<double>& r_var,
                           const std::vector<std::vector<double>>& obs);

// Log-density of x under N(mean, cov) with a full row-major covariance.
double gaussian_logpdf_full(const std::vector<double>& x,
                            const std::vector<double>& mean,
                            const std::vector<double>& cov);

// ---------------------------------------------------------------------------
// Bimodal trajectory family
// ---------------------------------------------------------------------------

// Two-mode system with a shared prefix. A hidden mode m in {-1,+1} is drawn
// uniformly at reset and never observed directly. The 2-D observation is
// (x(t), y(t)) + noise with x(t) = 0.15 t advancing uniformly and
//     y(t) = 0                         for t <= prefix_steps
//     y(t) = m * 0.2 * (t - prefix)    afterwards,
// so during the prefix the two modes are observationally identical and at
// the final step (t = 12) the branches sit at y = +-1.4, i.e. 56 observation
// sigmas apart (sigma = 0.05). A filter that carries only a unimodal belief
// through the prefix cannot represent the genuine two-branch uncertainty.
// Actions are ignored; rewards are zero.
class BimodalEnv : public Environment {
 public:
  BimodalEnv() = default;

  std::size_t obs_dim() const override { return 2; }
  std::size_t action_dim() const override { return 1; }
  std::size_t horizon() const override { return kHorizon; }
  std::vector<double> reset(Rng& rng) override;
  EnvStep step(const std::vector<double>& action, Rng& rng) override;

  int mode() const { return mode_; }  // diagnostics only
  static constexpr std::size_t kHorizon = 12;
  static constexpr std::size_t kPrefixSteps = 5;
  static constexpr double kNoiseStd = 0.05;
  static constexpr double kBranchSlope = 0.2;

  // Noise-free observation for mode m at time t (1-based).
  static std::array<double, 2> clean_obs(int mode, std::size_t t);
  // Classifies which branch an observation belongs to from its y component:
  // +1 / -1 once clearly on a branch, 0 while unresolved.
  static int classify_mode(const std::vector<double>& obs);

 private:
  std::vector<double> observe(Rng& rng) const;

  int mode_ = 0;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Point-mass control task
// ---------------------------------------------------------------------------

// Planar point mass with damped velocity. The action is an acceleration in
// [-1,1]^2 (components clipped); dynamics
//     vel' = damping * vel + dt * accel
//     pos' = pos + dt * vel'
// The observation is pos + N(0, 0.1^2) only, so velocity must be inferred
// from consecutive observations. Reward is -||pos - goal||. Episodes start
// at pos ~ N(0, 0.2^2 I), vel = 0 and run a fixed 100 steps toward the
// fixed goal (0.6, -0.4).
class PointMassEnv : public Environment {
 public:
  PointMassEnv() = default;

  std::size_t obs_dim() const override { return 2; }
  std::size_t action_dim() const override { return 2; }
  std::size_t horizon() const override { return kHorizon; }
  std::vector<double> reset(Rng& rng) override;
  EnvStep step(const std::vector<double>& action, Rng& rng) override;

  static constexpr std::size_t kHorizon = 100;
  static constexpr double kDt = 0.1;
  static constexpr double kDamping = 0.9;
  static constexpr double kObsStd = 0.1;

  const std::array<double, 2>& goal() const { return goal_; }
  // Exact state, diagnostics only.
  const std::array<double, 2>& position() const { return pos_; }
  const std::array<double, 2>& velocity() const { return vel_; }

 private:
  std::array<double, 2> goal_{0.6, -0.4};
  std::array<double, 2> pos_{0.0, 0.0};
  std::array<double, 2> vel_{0.0, 0.0};
  std::size_t t_ = 0;
};

// Builds one of the named environments: "lingauss", "bimodal", "pointmass".
std::unique_ptr<Environment> make_env(const std::string& name);

// ---------------------------------------------------------------------------
// Stroke sequence datasets
// ---------------------------------------------------------------------------

// A stroke episode is an ordered list of pixel coordinates on a fixed grid.
// The observation sequence derived from it is the *cumulative* rasterization:
// frame t shows the first t+1 points, so the drawing grows over time and
// early frames are consistent with every continuation that shares the
// prefix.
struct StrokeEpisode {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::array<int, 2>> points;  // (row, col) in draw order
};

// Plain-text serialization:
//   strokes v1
//   episode <id> <n_points> <height> <width>
//   <row> <col>
//   ...
std::vector<StrokeEpisode> load_strokes_text(const std::string& path);
void save_strokes_text(const std::string& path,
                       const std::vector<StrokeEpisode>& episodes);

// All cumulative frames of one episode. Each frame is height*width doubles,
// row-major, with on-pixels at +0.5 and background at -0.5.
std::vector<std::vector<double>> rasterize_cumulative(const StrokeEpisode& ep);

// Synthetic two-class stroke corpus on a side x side grid. Episodes come in
// pairs drawn with the same horizontal jitter: both members trace the same
// 15-point stem-and-foot prefix, then branch into a top hook (class 0) or a
// bottom foot (class 1). Because pair members share the jitter, their
// cumulative frames are identical for the whole prefix and only diverge
// afterwards - the class is genuinely ambiguous while the prefix is drawn.
std::vector<StrokeEpisode> make_synthetic_strokes(std::size_t n_pairs,
                                                  std::size_t side, Rng& rng);

}  // namespace flowbelief
