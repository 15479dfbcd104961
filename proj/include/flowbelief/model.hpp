#pragma once

#include <memory>
#include <vector>

#include "flowbelief/flows.hpp"
#include "flowbelief/nets.hpp"

namespace flowbelief {

// What one observation looks like.  Vector observations feed an MLP encoder;
// square image observations (H == W, H = 4k+2, H >= 10) feed a two-layer
// strided conv encoder that mirrors exactly in the decoder.
struct ObservationSpec {
  enum class Kind { vector, image };
  Kind kind = Kind::vector;
  std::size_t dim = 0;  // flattened size; for images H*W*C
  std::size_t h = 0, w = 0, c = 0;

  static ObservationSpec vec(std::size_t d) { return {Kind::vector, d, 0, 0, 0}; }
  static ObservationSpec image(std::size_t h, std::size_t w, std::size_t c);
};

struct ModelConfig {
  ObservationSpec obs;
  std::size_t action_dim = 0;
  std::size_t z_dim = 32;        // deterministic recurrent path
  std::size_t s_dim = 8;         // stochastic latent
  std::size_t embed_dim = 32;    // encoder output
  std::size_t hidden = 64;       // MLP hidden width (two hidden layers)
  std::size_t flow_couplings = 3;
  std::size_t flow_hidden = 32;  // coupling conditioner width
  bool use_flows = true;         // false: plain Gaussian beliefs (ablation)
  bool lu_random_perm = false;
  double decoder_std = 1.0;      // fixed decoder scale (unit by default)
  // Diagnostic anchor: replace the learned decoder by the fixed linear map
  // mean = s * matrix with a fixed observation noise.  Pins the latent to the
  // coordinates of a known emission model so beliefs can be compared against
  // an exact filter.
  bool fixed_decoder = false;
  std::vector<double> fixed_decoder_matrix;  // row-major [s_dim, obs.dim]
  double fixed_decoder_std = 0.1;
  std::size_t conv_c1 = 16, conv_c2 = 32;  // image encoder channel widths
};

// One step of recurrent belief.  z is the deterministic path, s the sampled
// stochastic latent; logq and logp are the per-row log-densities of s under
// the (flow) posterior and prior; q0/p0 are the diagonal-Gaussian bases
// (the ablation's analytic KL reads these).
struct BeliefState {
  Tensor z;     // [B,Z]
  Tensor s;     // [B,S]
  Tensor logq;  // [B,1]
  Tensor logp;  // [B,1]
  DiagonalGaussian q0, p0;
};

class BeliefModel {
 public:
  ModelConfig cfg;

  BeliefModel(ModelConfig config, Rng& rng);
  BeliefModel(const BeliefModel&) = delete;  // parameter addresses must not move
  BeliefModel& operator=(const BeliefModel&) = delete;

  // Observation -> embedding [B,embed].
  Tensor encode(const Tensor& obs);
  // Deterministic transition z' = GRU(z, f(s, a)).
  Tensor recur(const Tensor& z, const Tensor& s, const Tensor& a);
  // Belief over the next latent given only the deterministic path.
  FlowDistribution prior_belief(const Tensor& z);
  // Belief after also seeing the observation embedding.
  FlowDistribution posterior_belief(const Tensor& z, const Tensor& embed);

  BeliefState initial_belief(std::size_t batch) const;
  // Filtering step: advance the deterministic path with the previous action,
  // then sample the posterior given the new observation.  logp is the prior
  // density at the posterior sample (one-sample KL substitute).
  BeliefState observe_step(const BeliefState& prev, const Tensor& action, const Tensor& obs,
                           Rng& rng);
  // Imagination step: advance and sample from the prior (logq == logp).
  BeliefState imagine_step(const BeliefState& prev, const Tensor& action, Rng& rng);

  // Decoder p(o | z, s): unit-std Gaussian head by default, or the fixed
  // linear emission when cfg.fixed_decoder is set.
  DiagonalGaussian decode(const Tensor& z, const Tensor& s);
  // Reward head p(r | z, s): unit-std scalar Gaussian.
  DiagonalGaussian predict_reward(const Tensor& z, const Tensor& s);

  std::vector<Parameter*> parameters();
  void collect(std::vector<Parameter*>& out);

 private:
  // encoder (one of)
  MLP enc_mlp_;
  Parameter enc_k1_, enc_k2_;
  Dense enc_fc_;
  // dynamics
  MLP prenet_;
  GRUCell gru_;
  MLP prior_head_, post_head_;
  std::unique_ptr<FlowStack> prior_flow_, post_flow_;
  // heads (learned decoder only when not anchored)
  MLP dec_mlp_;
  Dense dec_fc_;
  Parameter dec_k1_, dec_k2_;
  Tensor fixed_dec_matrix_;
  MLP reward_head_;
};

}  // namespace flowbelief
