#pragma once

#include <string>
#include <vector>

#include "flowbelief/model.hpp"

namespace flowbelief {

// Policy/value heads both read the full belief feature (s, z).
inline Tensor belief_features(const BeliefState& st) { return concat(st.s, st.z); }

// Tanh-squashed Gaussian policy. sample() reparameterises, so gradients flow
// back through the action into whatever produced the features.
//
// The pre-squash mean is soft-bounded as mean_scale * tanh(raw / mean_scale):
// a plain tanh(raw) head saturates once |raw| drifts past ~3 and the policy
// gradient dies, whereas the scaled form keeps unit slope near zero and only
// flattens near +-mean_scale.  init_std sets the spread of the zero-initialised
// head through a constant bias inside the softplus.
struct Actor {
  std::size_t action_dim = 0;
  double std_floor = 1e-3;
  double mean_scale = 5.0;
  double raw_std_bias = 0.0;
  MLP net;  // feat -> [mean, raw_std] per action dim

  Actor() = default;
  Actor(const std::string& name, std::size_t feat_dim, std::size_t action_dim, std::size_t hidden,
        Rng& rng, double std_floor = 1e-3, double init_std = 1.0);

  Tensor sample(const Tensor& feat, Rng& rng);  // tanh(mu + std * eps), in (-1,1)
  Tensor mean_action(const Tensor& feat);       // tanh(mu), the evaluation policy
  void collect(std::vector<Parameter*>& out);
  std::vector<Parameter*> parameters();
};

struct Critic {
  MLP net;  // feat -> scalar value

  Critic() = default;
  Critic(const std::string& name, std::size_t feat_dim, std::size_t hidden, Rng& rng);

  Tensor value(const Tensor& feat);         // [B,1]
  Tensor value_frozen(const Tensor& feat);  // same, with the weights as constants
  void collect(std::vector<Parameter*>& out);
  std::vector<Parameter*> parameters();
};

struct AgentConfig {
  std::size_t horizon = 15;    // imagined transitions per trajectory
  std::size_t n_replicas = 4;  // imagined trajectories per start state
  double gamma = 0.99;
  double lambda = 0.95;
};

// One batched imagined rollout.  Row count M = n_replicas * (#starts - 1) * B.
// feats[0] is the detached start; rewards[t] is the predicted reward on
// entering state t+1; values[t] is the frozen-weight critic at state t.
struct ImaginedRollout {
  std::vector<Tensor> feats;    // horizon+1 x [M, S+Z]
  std::vector<Tensor> rewards;  // horizon   x [M, 1]
  std::vector<Tensor> values;   // horizon+1 x [M, 1]
};

// Rolls the actor through the model's prior dynamics, starting from every
// posterior state of the filtered window except the last, each replicated
// n_replicas times.  Starts are detached, and the model and critic weights
// are applied frozen, so the rollout's gradients reach the actor parameters
// alone.
ImaginedRollout imagine_trajectories(BeliefModel& model, Actor& actor, Critic& critic,
                                     const std::vector<BeliefState>& starts,
                                     const AgentConfig& cfg, Rng& rng);

// Lambda-weighted bootstrap targets over one rollout, one per transition:
//   targets[H-1] = rewards[H-1] + gamma * values[H]
//   targets[t]   = rewards[t]   + gamma * ((1-lambda) * values[t+1] + lambda * targets[t+1])
// Built from tensor ops, so the actor can differentiate through them.
std::vector<Tensor> td_lambda_targets(const std::vector<Tensor>& rewards,
                                      const std::vector<Tensor>& values, double gamma,
                                      double lambda);

// Mean value objective: minimizing this ascends the lambda-targets.
Tensor actor_loss(const std::vector<Tensor>& targets);

// Mean squared regression of the live critic onto the (detached) targets at
// the (detached) imagined states.
Tensor critic_loss(Critic& critic, const ImaginedRollout& roll,
                   const std::vector<Tensor>& targets);

}  // namespace flowbelief
