#pragma once
// Training orchestration: resolves a flat config into typed settings, runs
// the collect/update loop, and manages run directories of the form
//   <run_dir>/<run_name>/
//     config.resolved      every key with its final value, sorted
//     metrics.csv          one row per collect cycle, %.17g formatting
//     checkpoints/         step_<env_steps>.ckpt parameter snapshots
//     renders/             prediction filmstrips/traces written at the end
//
// Reproducibility contract: a run is a pure function of (config, seed).
// Metrics files from two runs with identical resolved configs are
// byte-identical.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "flowbelief/agent.hpp"
#include "flowbelief/config.hpp"
#include "flowbelief/env.hpp"
#include "flowbelief/model.hpp"
#include "flowbelief/replay.hpp"

namespace flowbelief {

// Typed view of a training config. `resolve_train_settings` rejects unknown
// keys, fills every default, and applies the `auto` rules (agent training
// and reward modelling default to on only for the control task).
struct TrainSettings {
  std::string env;           // lingauss | bimodal | pointmass | strokes
  std::string strokes_path;  // dataset file, env=strokes only
  std::string run_dir;
  std::string run_name;
  std::string mode;      // flow | gaussian | flow_n1 | gaussian_n4
  std::string obs_kind;  // vector | image
  std::uint64_t seed = 1;
  std::size_t steps = 0;  // env-step budget (update budget for offline data)
  std::size_t seed_episodes = 0;
  std::size_t updates_per_collect = 0;
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::size_t z_dim = 0, s_dim = 0, embed_dim = 0, hidden = 0;
  std::size_t flow_couplings = 0, flow_hidden = 0;
  std::size_t horizon = 0, n_replicas = 0;
  std::size_t replay_capacity = 0, checkpoint_every = 0, eval_episodes = 0;
  bool train_agent = false;
  bool include_reward = false;
  bool fixed_decoder = false;
  bool use_flows = true;  // derived from mode
  double holdout_fraction = 0.0;
  double fixed_decoder_std = 0.1, decoder_std = 1.0;
  double model_lr = 0.0, value_lr = 0.0, action_lr = 0.0;
  double grad_clip = 0.0, free_nats = 0.0, kl_scale = 0.0;
  double gamma = 0.0, lambda = 0.0, explore_noise = 0.0;

  FlatConfig resolved;  // full key set with final values
};

TrainSettings resolve_train_settings(const FlatConfig& user);

// The model configuration a run uses, given the data source's dimensions.
ModelConfig model_config_from_settings(const TrainSettings& s, std::size_t obs_dim,
                                       std::size_t action_dim);

struct TrainResult {
  std::string run_path;
  std::size_t env_steps = 0;
  std::size_t updates = 0;
  std::size_t episodes = 0;
  double final_model_loss = 0.0;
};

TrainResult run_training(const FlatConfig& user_config);

// A run directory loaded back into memory: settings, rebuilt networks with
// the latest checkpoint applied, and (for dataset runs) the held-out split.
struct LoadedRun {
  TrainSettings settings;
  std::unique_ptr<BeliefModel> model;
  Actor actor;
  Critic critic;
  bool has_agent = false;
  std::size_t obs_dim = 0, action_dim = 0;
  std::vector<Episode> holdout;  // env=strokes only
  std::string checkpoint_path;
};

LoadedRun load_run(const std::string& run_path);

struct EvalResult {
  std::size_t episodes = 0;
  double mean_return = 0.0;  // meaningful for reward-bearing tasks
  double mean_elbo = 0.0;    // mean per-step evidence bound
};

// Evaluates the latest checkpoint of a run: fresh episodes under the mean
// policy for environments, the held-out split for dataset runs. seed_bump
// shifts the evaluation seed so repeated calls can use fresh episodes.
EvalResult run_evaluation(const std::string& run_path, std::size_t episodes,
                          std::uint64_t seed_bump = 0);

// Filters `context` observations of one episode, imagines `horizon` more
// steps, and writes <out_prefix>.csv (truth/filtered/imagined traces) plus
// <out_prefix>.pgm (filmstrip for square observations, heatmap otherwise).
void run_predict_render(const std::string& run_path, const std::string& out_prefix,
                        std::size_t context = 15, std::size_t horizon = 15);

struct AblationRow {
  std::string mode;
  std::string run_path;
  double final_model_loss = 0.0;
  double eval_return = 0.0;
  double eval_elbo = 0.0;
};

// Trains one run per mode from the same base config (run names get a
// _<mode> suffix) and writes <run_dir>/<run_name>_ablation.csv.
std::vector<AblationRow> run_ablation(const FlatConfig& base,
                                      const std::vector<std::string>& modes);

// Parameter snapshots. The format is a magic line, a count, then per
// parameter: name, shape, and raw float64 data (host endianness). Loading
// is strict: both sides must hold exactly the same named shapes.
void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params);
void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params);

// Binary 8-bit PGM (P5). `gray` is row-major in [0,1], clamped.
void write_pgm(const std::string& path, std::size_t rows, std::size_t cols,
               const std::vector<double>& gray);

}  // namespace flowbelief
