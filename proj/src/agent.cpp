#include "flowbelief/agent.hpp"

#include <cmath>

namespace flowbelief {

Actor::Actor(const std::string& name, std::size_t feat_dim, std::size_t action_dim_,
             std::size_t hidden, Rng& rng, double std_floor_, double init_std)
    : action_dim(action_dim_),
      std_floor(std_floor_),
      // Inverse softplus, so the zero-initialised head starts at init_std.
      raw_std_bias(std::log(std::expm1(std::max(init_std - std_floor_, 1e-6)))),
      net(name, feat_dim, {hidden, hidden}, 2 * action_dim_, rng, /*zero_init_out=*/true) {}

namespace {

Tensor bounded_mean(const Tensor& raw, double mean_scale) {
  return scale(tanh_t(scale(raw, 1.0 / mean_scale)), mean_scale);
}

}  // namespace

Tensor Actor::sample(const Tensor& feat, Rng& rng) {
  Tensor h = net(feat);
  Tensor mu = bounded_mean(slice(h, 0, action_dim), mean_scale);
  Tensor std = add_const(softplus_t(add_const(slice(h, action_dim, 2 * action_dim), raw_std_bias)),
                         std_floor);
  Tensor eps = noise_like(mu, rng);
  return tanh_t(add(mu, mul(std, eps)));
}

Tensor Actor::mean_action(const Tensor& feat) {
  return tanh_t(bounded_mean(slice(net(feat), 0, action_dim), mean_scale));
}

void Actor::collect(std::vector<Parameter*>& out) { net.collect(out); }

std::vector<Parameter*> Actor::parameters() {
  std::vector<Parameter*> out;
  collect(out);
  return out;
}

Critic::Critic(const std::string& name, std::size_t feat_dim, std::size_t hidden, Rng& rng)
    : net(name, feat_dim, {hidden, hidden}, 1, rng) {}

Tensor Critic::value(const Tensor& feat) { return net(feat); }

Tensor Critic::value_frozen(const Tensor& feat) {
  FreezeParamsGuard freeze;
  return net(feat);
}

void Critic::collect(std::vector<Parameter*>& out) { net.collect(out); }

std::vector<Parameter*> Critic::parameters() {
  std::vector<Parameter*> out;
  collect(out);
  return out;
}

namespace {

// Stack the given per-state rows (all starts except the last), replicated
// n_replicas times, into one detached constant matrix.
Tensor stack_starts(const std::vector<BeliefState>& starts, std::size_t n_replicas,
                    bool take_s) {
  const std::size_t W = starts.size() - 1;
  const Tensor& probe = take_s ? starts[0].s : starts[0].z;
  const std::size_t B = probe.shape()[0], D = probe.shape()[1];
  std::vector<double> data;
  data.reserve(n_replicas * W * B * D);
  for (std::size_t r = 0; r < n_replicas; ++r) {
    for (std::size_t t = 0; t < W; ++t) {
      const auto& src = (take_s ? starts[t].s : starts[t].z).data();
      data.insert(data.end(), src.begin(), src.end());
    }
  }
  return Tensor::from({n_replicas * W * B, D}, std::move(data));
}

}  // namespace

ImaginedRollout imagine_trajectories(BeliefModel& model, Actor& actor, Critic& critic,
                                     const std::vector<BeliefState>& starts,
                                     const AgentConfig& cfg, Rng& rng) {
  if (starts.size() < 2) {
    throw Error(Error::Code::Config, "imagine_trajectories: need at least two filtered states");
  }
  if (cfg.horizon == 0 || cfg.n_replicas == 0) {
    throw Error(Error::Code::Config, "imagine_trajectories: horizon and replicas must be positive");
  }

  BeliefState state;
  state.z = stack_starts(starts, cfg.n_replicas, /*take_s=*/false);
  state.s = stack_starts(starts, cfg.n_replicas, /*take_s=*/true);

  ImaginedRollout roll;
  roll.feats.reserve(cfg.horizon + 1);
  roll.rewards.reserve(cfg.horizon);
  roll.values.reserve(cfg.horizon + 1);
  roll.feats.push_back(concat(state.s, state.z));

  for (std::size_t t = 0; t < cfg.horizon; ++t) {
    Tensor a = actor.sample(roll.feats.back(), rng);
    {
      FreezeParamsGuard freeze;
      state = model.imagine_step(state, a, rng);
      roll.rewards.push_back(model.predict_reward(state.z, state.s).mean);
    }
    roll.feats.push_back(concat(state.s, state.z));
  }
  for (const Tensor& f : roll.feats) roll.values.push_back(critic.value_frozen(f));
  return roll;
}

std::vector<Tensor> td_lambda_targets(const std::vector<Tensor>& rewards,
                                      const std::vector<Tensor>& values, double gamma,
                                      double lambda) {
  const std::size_t H = rewards.size();
  if (H == 0 || values.size() != H + 1) {
    throw Error(Error::Code::Shape, "td_lambda_targets: need H rewards and H+1 values");
  }
  std::vector<Tensor> targets(H);
  targets[H - 1] = add(rewards[H - 1], scale(values[H], gamma));
  for (std::size_t i = H - 1; i-- > 0;) {
    Tensor boot = add(scale(values[i + 1], 1.0 - lambda), scale(targets[i + 1], lambda));
    targets[i] = add(rewards[i], scale(boot, gamma));
  }
  return targets;
}

Tensor actor_loss(const std::vector<Tensor>& targets) {
  if (targets.empty()) throw Error(Error::Code::Config, "actor_loss: no targets");
  Tensor acc;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    Tensor m = mean(targets[i]);
    acc = (i == 0) ? m : add(acc, m);
  }
  return scale(acc, -1.0 / static_cast<double>(targets.size()));
}

Tensor critic_loss(Critic& critic, const ImaginedRollout& roll,
                   const std::vector<Tensor>& targets) {
  if (targets.size() + 1 != roll.feats.size()) {
    throw Error(Error::Code::Shape, "critic_loss: targets do not match the rollout");
  }
  Tensor acc;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    Tensor v = critic.value(stop_gradient(roll.feats[i]));
    Tensor err = square_t(sub(v, stop_gradient(targets[i])));
    Tensor m = mean(err);
    acc = (i == 0) ? m : add(acc, m);
  }
  return scale(acc, 1.0 / static_cast<double>(targets.size()));
}

}  // namespace flowbelief
