#include "flowbelief/replay.hpp"

#include <utility>

namespace flowbelief {

namespace {

void check_episode(const Episode& ep) {
  if (ep.obs.empty()) {
    throw Error(Error::Code::Config, "replay: episode has no observations");
  }
  if (ep.actions.size() != ep.obs.size() || ep.rewards.size() != ep.obs.size()) {
    throw Error(Error::Code::Shape, "replay: obs/actions/rewards rows must align");
  }
  const std::size_t obs_dim = ep.obs[0].size();
  const std::size_t act_dim = ep.actions[0].size();
  if (obs_dim == 0 || act_dim == 0) {
    throw Error(Error::Code::Shape, "replay: empty observation or action rows");
  }
  for (std::size_t t = 0; t < ep.obs.size(); ++t) {
    if (ep.obs[t].size() != obs_dim || ep.actions[t].size() != act_dim) {
      throw Error(Error::Code::Shape, "replay: ragged episode at step " + std::to_string(t));
    }
  }
}

}  // namespace

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) {
    throw Error(Error::Code::Config, "replay: capacity must be positive");
  }
}

void ReplayBuffer::add(Episode ep) {
  check_episode(ep);
  if (episodes_.size() == capacity_) {
    total_steps_ -= episodes_.front().length();
    episodes_.pop_front();
  }
  total_steps_ += ep.length();
  episodes_.push_back(std::move(ep));
}

bool ReplayBuffer::can_sample(std::size_t length) const {
  if (length == 0) return false;
  for (const Episode& ep : episodes_) {
    if (ep.length() >= length) return true;
  }
  return false;
}

SequenceBatch ReplayBuffer::sample(std::size_t batch, std::size_t length, Rng& rng) const {
  if (batch == 0 || length == 0) {
    throw Error(Error::Code::Config, "replay: batch and window length must be positive");
  }
  std::vector<std::size_t> eligible;
  eligible.reserve(episodes_.size());
  for (std::size_t i = 0; i < episodes_.size(); ++i) {
    if (episodes_[i].length() >= length) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw Error(Error::Code::Config, "replay: no stored episode is long enough for a window of " +
                                         std::to_string(length) + " steps");
  }

  const std::size_t obs_dim = episodes_[eligible[0]].obs[0].size();
  const std::size_t act_dim = episodes_[eligible[0]].actions[0].size();

  // Gather per-row (episode, start) picks, then assemble time-major tensors.
  std::vector<const Episode*> pick(batch);
  std::vector<std::size_t> start(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const Episode& ep =
        episodes_[eligible[static_cast<std::size_t>(rng.uniform() * static_cast<double>(eligible.size())) %
                           eligible.size()]];
    if (ep.obs[0].size() != obs_dim || ep.actions[0].size() != act_dim) {
      throw Error(Error::Code::Shape, "replay: episodes disagree on observation/action sizes");
    }
    const std::size_t slack = ep.length() - length;
    pick[b] = &ep;
    start[b] = slack == 0 ? 0
                          : static_cast<std::size_t>(rng.uniform() * static_cast<double>(slack + 1)) %
                                (slack + 1);
  }

  SequenceBatch out;
  out.obs.reserve(length);
  out.actions.reserve(length);
  out.rewards.reserve(length);
  for (std::size_t t = 0; t < length; ++t) {
    std::vector<double> o(batch * obs_dim), a(batch * act_dim), r(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const Episode& ep = *pick[b];
      const std::size_t at = start[b] + t;
      for (std::size_t d = 0; d < obs_dim; ++d) o[b * obs_dim + d] = ep.obs[at][d];
      for (std::size_t d = 0; d < act_dim; ++d) a[b * act_dim + d] = ep.actions[at][d];
      r[b] = ep.rewards[at];
    }
    out.obs.push_back(Tensor::from({batch, obs_dim}, std::move(o)));
    out.actions.push_back(Tensor::from({batch, act_dim}, std::move(a)));
    out.rewards.push_back(Tensor::from({batch, 1}, std::move(r)));
  }
  return out;
}

SequenceBatch episode_to_batch(const Episode& ep) {
  check_episode(ep);
  const std::size_t obs_dim = ep.obs[0].size();
  const std::size_t act_dim = ep.actions[0].size();
  SequenceBatch out;
  out.obs.reserve(ep.length());
  for (std::size_t t = 0; t < ep.length(); ++t) {
    out.obs.push_back(Tensor::from({1, obs_dim}, std::vector<double>(ep.obs[t])));
    out.actions.push_back(Tensor::from({1, act_dim}, std::vector<double>(ep.actions[t])));
    out.rewards.push_back(Tensor::from({1, 1}, {ep.rewards[t]}));
  }
  return out;
}

}  // namespace flowbelief
