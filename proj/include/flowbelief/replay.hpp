#pragma once
// FIFO episode replay with whole-episode granularity. Training batches are
// fixed-length windows sampled uniformly from stored episodes; a window is
// always taken from a single episode, never stitched across boundaries.

#include <cstddef>
#include <deque>
#include <vector>

#include "flowbelief/elbo.hpp"
#include "flowbelief/rng.hpp"

namespace flowbelief {

// One recorded episode. Rows are aligned the way the sequence objective
// consumes them: actions[t] is the action taken just before obs[t] (all
// zeros for the first observation of the episode) and rewards[t] is the
// reward that arrived together with obs[t] (zero at the first observation).
struct Episode {
  std::vector<std::vector<double>> obs;
  std::vector<std::vector<double>> actions;
  std::vector<double> rewards;

  std::size_t length() const { return obs.size(); }
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1000);

  // Appends an episode, evicting the oldest one when full.
  void add(Episode ep);

  std::size_t size() const { return episodes_.size(); }
  std::size_t total_steps() const { return total_steps_; }
  std::size_t capacity() const { return capacity_; }
  const Episode& episode(std::size_t i) const { return episodes_.at(i); }

  // True if at least one stored episode can supply a window of this length.
  bool can_sample(std::size_t length) const;

  // Samples `batch` windows of `length` steps. Each window lies entirely
  // inside one episode (chosen uniformly among long-enough episodes, with a
  // uniform start offset). Throws if no stored episode is long enough.
  SequenceBatch sample(std::size_t batch, std::size_t length, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::deque<Episode> episodes_;
  std::size_t total_steps_ = 0;
};

// Converts a full episode into a batch-of-one sequence (used for filtering
// and evaluation passes over whole episodes).
SequenceBatch episode_to_batch(const Episode& ep);

}  // namespace flowbelief
