#include "flowbelief/model.hpp"

#include <utility>

namespace flowbelief {

namespace {

constexpr std::size_t kConvKernel = 4;
constexpr std::size_t kConvStride = 2;

// Two strided conv layers shrink H -> h1 -> h2; the transposed pair grows
// h2 -> h1 -> H exactly.  Requires H = 4k + 2 with H >= 10.
void conv_geometry(std::size_t h, std::size_t& h1, std::size_t& h2) {
  if (h < 10 || (h + 2) % 4 != 0) {
    throw Error(Error::Code::Config,
                "image observations need square side 4k+2 with side >= 10, got side " +
                    std::to_string(h));
  }
  h1 = (h - kConvKernel) / kConvStride + 1;
  h2 = (h1 - kConvKernel) / kConvStride + 1;
}

Parameter conv_param(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng) {
  const std::size_t n = kConvKernel * kConvKernel * cin * cout;
  return Parameter(name, {kConvKernel, kConvKernel, cin, cout},
                   glorot_uniform(kConvKernel * kConvKernel * cin, cout, n, rng));
}

}  // namespace

ObservationSpec ObservationSpec::image(std::size_t h, std::size_t w, std::size_t c) {
  if (h != w) throw Error(Error::Code::Config, "image observations must be square");
  if (c == 0) throw Error(Error::Code::Config, "image observations need at least one channel");
  std::size_t h1 = 0, h2 = 0;
  conv_geometry(h, h1, h2);
  return {Kind::image, h * w * c, h, w, c};
}

BeliefModel::BeliefModel(ModelConfig config, Rng& rng) : cfg(std::move(config)) {
  const ObservationSpec& o = cfg.obs;
  if (o.dim == 0) throw Error(Error::Code::Config, "observation size must be positive");
  if (cfg.action_dim == 0) throw Error(Error::Code::Config, "action size must be positive");
  if (cfg.z_dim == 0 || cfg.s_dim == 0) {
    throw Error(Error::Code::Config, "latent sizes must be positive");
  }

  const std::size_t Z = cfg.z_dim, S = cfg.s_dim, E = cfg.embed_dim, H = cfg.hidden;

  if (o.kind == ObservationSpec::Kind::vector) {
    enc_mlp_ = MLP("enc", o.dim, {H, H}, E, rng);
  } else {
    std::size_t h1 = 0, h2 = 0;
    conv_geometry(o.h, h1, h2);
    enc_k1_ = conv_param("enc.k1", o.c, cfg.conv_c1, rng);
    enc_k2_ = conv_param("enc.k2", cfg.conv_c1, cfg.conv_c2, rng);
    enc_fc_ = Dense("enc.fc", h2 * h2 * cfg.conv_c2, E, rng);
  }

  prenet_ = MLP("prenet", S + cfg.action_dim, {H}, H, rng);
  gru_ = GRUCell("gru", H, Z, rng);
  prior_head_ = MLP("prior", Z, {H, H}, 2 * S, rng);
  post_head_ = MLP("post", Z + E, {H, H}, 2 * S, rng);

  if (cfg.use_flows) {
    prior_flow_ = std::make_unique<FlowStack>("prior_flow", S, Z, cfg.flow_couplings,
                                              cfg.flow_hidden, rng, cfg.lu_random_perm);
    post_flow_ = std::make_unique<FlowStack>("post_flow", S, Z + E, cfg.flow_couplings,
                                             cfg.flow_hidden, rng, cfg.lu_random_perm);
  }

  if (cfg.fixed_decoder) {
    std::vector<double> m = cfg.fixed_decoder_matrix;
    if (m.empty()) {
      if (S != o.dim) {
        throw Error(Error::Code::Config,
                    "fixed decoder without a matrix needs latent size == observation size");
      }
      m.assign(S * o.dim, 0.0);
      for (std::size_t i = 0; i < S; ++i) m[i * o.dim + i] = 1.0;
    }
    if (m.size() != S * o.dim) {
      throw Error(Error::Code::Config, "fixed decoder matrix must be latent x observation");
    }
    fixed_dec_matrix_ = Tensor::from({S, o.dim}, std::move(m));
  } else if (o.kind == ObservationSpec::Kind::vector) {
    dec_mlp_ = MLP("dec", S + Z, {H, H}, o.dim, rng);
  } else {
    std::size_t h1 = 0, h2 = 0;
    conv_geometry(o.h, h1, h2);
    dec_fc_ = Dense("dec.fc", S + Z, h2 * h2 * cfg.conv_c2, rng);
    dec_k1_ = conv_param("dec.k1", cfg.conv_c2, cfg.conv_c1, rng);
    dec_k2_ = conv_param("dec.k2", cfg.conv_c1, o.c, rng);
  }

  reward_head_ = MLP("reward", S + Z, {H, H}, 1, rng);
}

Tensor BeliefModel::encode(const Tensor& obs) {
  if (obs.rank() != 2 || obs.shape()[1] != cfg.obs.dim) {
    throw Error(Error::Code::Shape,
                "encode expects flattened observations [B," + std::to_string(cfg.obs.dim) +
                    "], got " + shape_str(obs.shape()));
  }
  if (cfg.obs.kind == ObservationSpec::Kind::vector) return enc_mlp_(obs);

  const std::size_t B = obs.shape()[0];
  Tensor x = reshape(obs, {B, cfg.obs.h, cfg.obs.w, cfg.obs.c});
  x = relu_t(conv2d(x, enc_k1_.use(), kConvStride));
  x = relu_t(conv2d(x, enc_k2_.use(), kConvStride));
  const Shape& s = x.shape();
  x = reshape(x, {B, s[1] * s[2] * s[3]});
  return enc_fc_(x);
}

Tensor BeliefModel::recur(const Tensor& z, const Tensor& s, const Tensor& a) {
  Tensor y = prenet_(concat(s, a));
  return gru_.step(z, y);
}

FlowDistribution BeliefModel::prior_belief(const Tensor& z) {
  Tensor h = prior_head_(z);
  Tensor mean = slice(h, 0, cfg.s_dim);
  Tensor raw = slice(h, cfg.s_dim, 2 * cfg.s_dim);
  return {make_diag_gaussian(mean, raw), cfg.use_flows ? prior_flow_.get() : nullptr, z};
}

FlowDistribution BeliefModel::posterior_belief(const Tensor& z, const Tensor& embed) {
  Tensor in = concat(z, embed);
  Tensor h = post_head_(in);
  Tensor mean = slice(h, 0, cfg.s_dim);
  Tensor raw = slice(h, cfg.s_dim, 2 * cfg.s_dim);
  return {make_diag_gaussian(mean, raw), cfg.use_flows ? post_flow_.get() : nullptr, in};
}

BeliefState BeliefModel::initial_belief(std::size_t batch) const {
  DiagonalGaussian unit{Tensor::zeros({batch, cfg.s_dim}), Tensor::full({batch, cfg.s_dim}, 1.0)};
  return BeliefState{Tensor::zeros({batch, cfg.z_dim}), Tensor::zeros({batch, cfg.s_dim}),
                     Tensor::zeros({batch, 1}), Tensor::zeros({batch, 1}), unit, unit};
}

BeliefState BeliefModel::observe_step(const BeliefState& prev, const Tensor& action,
                                      const Tensor& obs, Rng& rng) {
  Tensor z = recur(prev.z, prev.s, action);
  Tensor embed = encode(obs);
  FlowDistribution q = posterior_belief(z, embed);
  auto [s, logq] = flow_sample(q, rng);
  FlowDistribution p = prior_belief(z);
  Tensor logp = flow_log_prob(p, s);
  return BeliefState{z, s, logq, logp, q.base, p.base};
}

BeliefState BeliefModel::imagine_step(const BeliefState& prev, const Tensor& action, Rng& rng) {
  Tensor z = recur(prev.z, prev.s, action);
  FlowDistribution p = prior_belief(z);
  auto [s, logp] = flow_sample(p, rng);
  return BeliefState{z, s, logp, logp, p.base, p.base};
}

DiagonalGaussian BeliefModel::decode(const Tensor& z, const Tensor& s) {
  const std::size_t B = s.shape()[0];
  if (cfg.fixed_decoder) {
    Tensor mean = matmul(s, fixed_dec_matrix_);
    return {mean, Tensor::full({B, cfg.obs.dim}, cfg.fixed_decoder_std)};
  }
  Tensor in = concat(s, z);
  Tensor mean;
  if (cfg.obs.kind == ObservationSpec::Kind::vector) {
    mean = dec_mlp_(in);
  } else {
    std::size_t h1 = 0, h2 = 0;
    conv_geometry(cfg.obs.h, h1, h2);
    Tensor x = relu_t(dec_fc_(in));
    x = reshape(x, {B, h2, h2, cfg.conv_c2});
    x = relu_t(conv2d_transpose(x, dec_k1_.use(), kConvStride));
    x = conv2d_transpose(x, dec_k2_.use(), kConvStride);
    mean = reshape(x, {B, cfg.obs.dim});
  }
  return {mean, Tensor::full({B, cfg.obs.dim}, cfg.decoder_std)};
}

DiagonalGaussian BeliefModel::predict_reward(const Tensor& z, const Tensor& s) {
  Tensor mean = reward_head_(concat(s, z));
  return {mean, Tensor::full({s.shape()[0], 1}, 1.0)};
}

void BeliefModel::collect(std::vector<Parameter*>& out) {
  if (cfg.obs.kind == ObservationSpec::Kind::vector) {
    enc_mlp_.collect(out);
  } else {
    out.push_back(&enc_k1_);
    out.push_back(&enc_k2_);
    enc_fc_.collect(out);
  }
  prenet_.collect(out);
  gru_.collect(out);
  prior_head_.collect(out);
  post_head_.collect(out);
  if (cfg.use_flows) {
    prior_flow_->collect(out);
    post_flow_->collect(out);
  }
  if (!cfg.fixed_decoder) {
    if (cfg.obs.kind == ObservationSpec::Kind::vector) {
      dec_mlp_.collect(out);
    } else {
      dec_fc_.collect(out);
      out.push_back(&dec_k1_);
      out.push_back(&dec_k2_);
    }
  }
  reward_head_.collect(out);
}

std::vector<Parameter*> BeliefModel::parameters() {
  std::vector<Parameter*> out;
  collect(out);
  return out;
}

}  // namespace flowbelief
