#include "flowbelief/env.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <utility>

namespace flowbelief {

namespace {

constexpr double kLog2PiLocal = 1.8378770664093454836;

void check_action(const std::vector<double>& action, std::size_t want,
                  const char* env) {
  if (action.size() != want) {
    throw Error(Error::Code::Shape, std::string(env) + ": expected action of size " +
                                        std::to_string(want) + ", got " +
                                        std::to_string(action.size()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// LinearGaussianEnv
// ---------------------------------------------------------------------------

LinearGaussianEnv::LinearGaussianEnv()
    : LinearGaussianEnv(
          // 0.9 * rotation(0.3): both eigenvalues have modulus 0.9.
          {0.9 * std::cos(0.3), -0.9 * std::sin(0.3),
           0.9 * std::sin(0.3), 0.9 * std::cos(0.3)},
          {0.09, 0.09}, {0.01, 0.01}, 50) {}

LinearGaussianEnv::LinearGaussianEnv(std::vector<double> a,
                                     std::vector<double> q_var,
                                     std::vector<double> r_var,
                                     std::size_t horizon)
    : dim_(q_var.size()),
      a_(std::move(a)),
      q_var_(std::move(q_var)),
      r_var_(std::move(r_var)),
      horizon_(horizon) {
  if (dim_ == 0 || horizon_ == 0) {
    throw Error(Error::Code::Config, "linear-gaussian env: empty dimension or horizon");
  }
  if (a_.size() != dim_ * dim_ || r_var_.size() != dim_) {
    throw Error(Error::Code::Shape, "linear-gaussian env: A must be dim x dim and "
                                    "noise variances per-dimension");
  }
  for (std::size_t i = 0; i < dim_; ++i) {
    if (q_var_[i] <= 0.0 || r_var_[i] <= 0.0) {
      throw Error(Error::Code::Config, "linear-gaussian env: noise variances must be positive");
    }
  }
  state_.assign(dim_, 0.0);
}

void LinearGaussianEnv::advance(Rng& rng) {
  std::vector<double> next(dim_, 0.0);
  for (std::size_t i = 0; i < dim_; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) acc += a_[i * dim_ + j] * state_[j];
    next[i] = acc;
  }
  for (std::size_t i = 0; i < dim_; ++i) next[i] += std::sqrt(q_var_[i]) * rng.normal();
  state_ = std::move(next);
}

std::vector<double> LinearGaussianEnv::observe(Rng& rng) {
  std::vector<double> obs(dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    obs[i] = state_[i] + std::sqrt(r_var_[i]) * rng.normal();
  }
  return obs;
}

std::vector<double> LinearGaussianEnv::reset(Rng& rng) {
  state_.assign(dim_, 0.0);
  t_ = 1;
  advance(rng);  // s_1 = A*0 + w
  return observe(rng);
}

EnvStep LinearGaussianEnv::step(const std::vector<double>& action, Rng& rng) {
  check_action(action, 1, "linear-gaussian env");
  if (t_ == 0 || t_ >= horizon_) {
    throw Error(Error::Code::Logic, "linear-gaussian env: episode is done; call reset");
  }
  ++t_;
  advance(rng);
  EnvStep out;
  out.obs = observe(rng);
  out.reward = 0.0;
  out.done = (t_ == horizon_);
  return out;
}

// ---------------------------------------------------------------------------
// Kalman filter
// ---------------------------------------------------------------------------

KalmanResult kalman_filter(const std::vector<double>& a,
                           const std::vector<double>& q_var,
                           const std::vector<double>& r_var,
                           const std::vector<std::vector<double>>& obs) {
  const std::size_t dim = q_var.size();
  if (dim == 0 || a.size() != dim * dim || r_var.size() != dim) {
    throw Error(Error::Code::Shape, "kalman_filter: inconsistent system sizes");
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMat> A(a.data(), static_cast<Eigen::Index>(dim),
                                   static_cast<Eigen::Index>(dim));
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) {
    Q(i, i) = q_var[i];
    R(i, i) = r_var[i];
  }

  Eigen::VectorXd m = Eigen::VectorXd::Zero(dim);
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(dim, dim);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(dim, dim);

  KalmanResult result;
  result.steps.reserve(obs.size());
  for (std::size_t t = 0; t < obs.size(); ++t) {
    if (obs[t].size() != dim) {
      throw Error(Error::Code::Shape, "kalman_filter: observation " + std::to_string(t) +
                                          " has wrong dimension");
    }
    const Eigen::Map<const Eigen::VectorXd> o(obs[t].data(),
                                              static_cast<Eigen::Index>(dim));
    // Predict.
    m = A * m;
    P = A * P * A.transpose() + Q;
    // Innovation.
    const Eigen::MatrixXd S = P + R;
    const Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) {
      throw Error(Error::Code::Numeric, "kalman_filter: innovation covariance not positive definite");
    }
    const Eigen::VectorXd y = o - m;
    double logdet = 0.0;
    for (std::size_t i = 0; i < dim; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    const double maha = y.dot(llt.solve(y));
    const double step_ll =
        -0.5 * (static_cast<double>(dim) * kLog2PiLocal + logdet + maha);
    // Update.
    const Eigen::MatrixXd K = P * llt.solve(I);  // P * S^{-1}
    m = m + K * y;
    P = (I - K) * P;
    P = 0.5 * (P + P.transpose());  // keep symmetric under roundoff

    KalmanEstimate est;
    est.mean.assign(m.data(), m.data() + dim);
    est.cov.resize(dim * dim);
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = 0; j < dim; ++j) est.cov[i * dim + j] = P(i, j);
    }
    est.step_loglik = step_ll;
    result.loglik += step_ll;
    result.steps.push_back(std::move(est));
  }
  return result;
}

double gaussian_logpdf_full(const std::vector<double>& x,
                            const std::vector<double>& mean,
                            const std::vector<double>& cov) {
  const std::size_t dim = x.size();
  if (dim == 0 || mean.size() != dim || cov.size() != dim * dim) {
    throw Error(Error::Code::Shape, "gaussian_logpdf_full: inconsistent sizes");
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMat> C(cov.data(), static_cast<Eigen::Index>(dim),
                                   static_cast<Eigen::Index>(dim));
  const Eigen::LLT<Eigen::MatrixXd> llt(C);
  if (llt.info() != Eigen::Success) {
    throw Error(Error::Code::Numeric, "gaussian_logpdf_full: covariance not positive definite");
  }
  Eigen::VectorXd d(dim);
  for (std::size_t i = 0; i < dim; ++i) d(i) = x[i] - mean[i];
  double logdet = 0.0;
  for (std::size_t i = 0; i < dim; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  const double maha = d.dot(llt.solve(d));
  return -0.5 * (static_cast<double>(dim) * kLog2PiLocal + logdet + maha);
}

// ---------------------------------------------------------------------------
// BimodalEnv
// ---------------------------------------------------------------------------

std::array<double, 2> BimodalEnv::clean_obs(int mode, std::size_t t) {
  const double x = 0.15 * static_cast<double>(t);
  double y = 0.0;
  if (t > kPrefixSteps) {
    y = static_cast<double>(mode) * kBranchSlope * static_cast<double>(t - kPrefixSteps);
  }
  return {x, y};
}

int BimodalEnv::classify_mode(const std::vector<double>& obs) {
  if (obs.size() < 2) {
    throw Error(Error::Code::Shape, "bimodal env: classify_mode needs a 2-D observation");
  }
  const double y = obs[1];
  // Half-way to the terminal branch value; far outside the noise band.
  if (y > 0.7) return 1;
  if (y < -0.7) return -1;
  return 0;
}

std::vector<double> BimodalEnv::observe(Rng& rng) const {
  const std::array<double, 2> clean = clean_obs(mode_, t_);
  return {clean[0] + kNoiseStd * rng.normal(), clean[1] + kNoiseStd * rng.normal()};
}

std::vector<double> BimodalEnv::reset(Rng& rng) {
  mode_ = rng.uniform() < 0.5 ? -1 : 1;
  t_ = 1;
  return observe(rng);
}

EnvStep BimodalEnv::step(const std::vector<double>& action, Rng& rng) {
  check_action(action, 1, "bimodal env");
  if (t_ == 0 || t_ >= kHorizon) {
    throw Error(Error::Code::Logic, "bimodal env: episode is done; call reset");
  }
  ++t_;
  EnvStep out;
  out.obs = observe(rng);
  out.reward = 0.0;
  out.done = (t_ == kHorizon);
  return out;
}

// ---------------------------------------------------------------------------
// PointMassEnv
// ---------------------------------------------------------------------------

std::vector<double> PointMassEnv::reset(Rng& rng) {
  pos_ = {0.2 * rng.normal(), 0.2 * rng.normal()};
  vel_ = {0.0, 0.0};
  t_ = 1;
  return {pos_[0] + kObsStd * rng.normal(), pos_[1] + kObsStd * rng.normal()};
}

EnvStep PointMassEnv::step(const std::vector<double>& action, Rng& rng) {
  check_action(action, 2, "point-mass env");
  if (t_ == 0 || t_ >= kHorizon) {
    throw Error(Error::Code::Logic, "point-mass env: episode is done; call reset");
  }
  ++t_;
  for (std::size_t i = 0; i < 2; ++i) {
    const double a = std::clamp(action[i], -1.0, 1.0);
    vel_[i] = kDamping * vel_[i] + kDt * a;
    pos_[i] += kDt * vel_[i];
  }
  EnvStep out;
  out.obs = {pos_[0] + kObsStd * rng.normal(), pos_[1] + kObsStd * rng.normal()};
  const double dx = pos_[0] - goal_[0];
  const double dy = pos_[1] - goal_[1];
  out.reward = -std::sqrt(dx * dx + dy * dy);
  out.done = (t_ == kHorizon);
  return out;
}

std::unique_ptr<Environment> make_env(const std::string& name) {
  if (name == "lingauss") return std::make_unique<LinearGaussianEnv>();
  if (name == "bimodal") return std::make_unique<BimodalEnv>();
  if (name == "pointmass") return std::make_unique<PointMassEnv>();
  throw Error(Error::Code::Config, "unknown environment '" + name + "'");
}

// ---------------------------------------------------------------------------
// Stroke datasets
// ---------------------------------------------------------------------------

std::vector<StrokeEpisode> load_strokes_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(Error::Code::Io, "cannot open stroke file '" + path + "'");
  }
  std::string header;
  std::getline(in, header);
  while (!header.empty() && (header.back() == '\r' || header.back() == ' ')) header.pop_back();
  if (header != "strokes v1") {
    throw Error(Error::Code::Io, "stroke file '" + path + "': expected 'strokes v1' header");
  }
  std::vector<StrokeEpisode> episodes;
  std::string word;
  while (in >> word) {
    if (word != "episode") {
      throw Error(Error::Code::Io, "stroke file '" + path + "': expected 'episode', got '" + word + "'");
    }
    long id = 0, n_points = 0, height = 0, width = 0;
    if (!(in >> id >> n_points >> height >> width) || n_points < 0 || height <= 0 || width <= 0) {
      throw Error(Error::Code::Io, "stroke file '" + path + "': malformed episode header");
    }
    StrokeEpisode ep;
    ep.height = static_cast<std::size_t>(height);
    ep.width = static_cast<std::size_t>(width);
    ep.points.reserve(static_cast<std::size_t>(n_points));
    for (long p = 0; p < n_points; ++p) {
      int r = 0, c = 0;
      if (!(in >> r >> c)) {
        throw Error(Error::Code::Io, "stroke file '" + path + "': episode " + std::to_string(id) +
                                         " truncated after " + std::to_string(p) + " points");
      }
      ep.points.push_back({r, c});
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

void save_strokes_text(const std::string& path,
                       const std::vector<StrokeEpisode>& episodes) {
  std::ofstream out(path);
  if (!out) {
    throw Error(Error::Code::Io, "cannot write stroke file '" + path + "'");
  }
  out << "strokes v1\n";
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const StrokeEpisode& ep = episodes[i];
    out << "episode " << i << ' ' << ep.points.size() << ' ' << ep.height << ' '
        << ep.width << '\n';
    for (const auto& pt : ep.points) out << pt[0] << ' ' << pt[1] << '\n';
  }
  if (!out) {
    throw Error(Error::Code::Io, "failed writing stroke file '" + path + "'");
  }
}

std::vector<std::vector<double>> rasterize_cumulative(const StrokeEpisode& ep) {
  if (ep.height == 0 || ep.width == 0) {
    throw Error(Error::Code::Shape, "rasterize_cumulative: empty grid");
  }
  std::vector<double> canvas(ep.height * ep.width, -0.5);
  std::vector<std::vector<double>> frames;
  frames.reserve(ep.points.size());
  for (const auto& pt : ep.points) {
    if (pt[0] < 0 || pt[1] < 0 || static_cast<std::size_t>(pt[0]) >= ep.height ||
        static_cast<std::size_t>(pt[1]) >= ep.width) {
      throw Error(Error::Code::Shape, "rasterize_cumulative: point (" + std::to_string(pt[0]) +
                                          "," + std::to_string(pt[1]) + ") outside grid");
    }
    canvas[static_cast<std::size_t>(pt[0]) * ep.width + static_cast<std::size_t>(pt[1])] = 0.5;
    frames.push_back(canvas);
  }
  return frames;
}

std::vector<StrokeEpisode> make_synthetic_strokes(std::size_t n_pairs,
                                                  std::size_t side, Rng& rng) {
  if (side < 14) {
    throw Error(Error::Code::Config, "make_synthetic_strokes: grid side must be >= 14");
  }
  std::vector<StrokeEpisode> episodes;
  episodes.reserve(2 * n_pairs);
  const int mid = static_cast<int>(side) / 2;
  for (std::size_t pair = 0; pair < n_pairs; ++pair) {
    const int jitter = static_cast<int>(rng.uniform() * 3.0) - 1;  // {-1, 0, 1}
    const int c0 = mid + jitter;
    // Shared 15-point prefix: vertical stem, then a left foot.
    std::vector<std::array<int, 2>> prefix;
    for (int r = 1; r <= 10; ++r) prefix.push_back({r, c0});
    prefix.push_back({11, c0});
    prefix.push_back({12, c0});
    prefix.push_back({12, c0 - 1});
    prefix.push_back({12, c0 - 2});
    prefix.push_back({12, c0 - 3});

    for (int cls = 0; cls < 2; ++cls) {
      StrokeEpisode ep;
      ep.height = side;
      ep.width = side;
      ep.points = prefix;
      if (cls == 0) {
        // Top hook to the right.
        ep.points.push_back({1, c0 + 1});
        ep.points.push_back({1, c0 + 2});
        ep.points.push_back({2, c0 + 3});
        ep.points.push_back({3, c0 + 3});
        ep.points.push_back({4, c0 + 3});
        ep.points.push_back({5, c0 + 3});
        ep.points.push_back({6, c0 + 2});
        ep.points.push_back({6, c0 + 1});
        ep.points.push_back({7, c0 + 1});
      } else {
        // Bottom foot to the right.
        ep.points.push_back({12, c0 + 1});
        ep.points.push_back({12, c0 + 2});
        ep.points.push_back({12, c0 + 3});
        ep.points.push_back({11, c0 + 3});
        ep.points.push_back({10, c0 + 3});
        ep.points.push_back({9, c0 + 3});
        ep.points.push_back({8, c0 + 3});
        ep.points.push_back({8, c0 + 2});
        ep.points.push_back({8, c0 + 1});
      }
      episodes.push_back(std::move(ep));
    }
  }
  return episodes;
}

}  // namespace flowbelief
