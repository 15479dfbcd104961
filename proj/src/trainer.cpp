#include "flowbelief/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include "flowbelief/elbo.hpp"

namespace fs = std::filesystem;

namespace flowbelief {

namespace {

// ---------------------------------------------------------------------------
// Config registry
// ---------------------------------------------------------------------------

struct KeyDefault {
  const char* key;
  const char* value;
};

// Every recognised key with its default. `strokes_path` is the one optional
// key without a default: it is required exactly when env = strokes.
const KeyDefault kRegistry[] = {
    {"env", "lingauss"},
    {"run_dir", "run"},
    {"run_name", "default"},
    {"seed", "1"},
    {"steps", "5000"},
    {"seed_episodes", "5"},
    {"updates_per_collect", "100"},
    {"batch_size", "16"},
    {"seq_len", "16"},
    {"holdout_fraction", "0.2"},
    {"mode", "flow"},
    {"train_agent", "auto"},
    {"include_reward", "auto"},
    {"z_dim", "32"},
    {"s_dim", "8"},
    {"embed_dim", "32"},
    {"hidden", "64"},
    {"flow_couplings", "3"},
    {"flow_hidden", "32"},
    {"obs_kind", "vector"},
    {"fixed_decoder", "false"},
    {"fixed_decoder_std", "0.1"},
    {"decoder_std", "1.0"},
    {"model_lr", "5e-4"},
    {"value_lr", "8e-5"},
    {"action_lr", "8e-5"},
    {"grad_clip", "100"},
    {"free_nats", "3"},
    {"kl_scale", "1"},
    {"horizon", "15"},
    {"gamma", "0.99"},
    {"lambda", "0.95"},
    {"explore_noise", "0.3"},
    {"replay_capacity", "1000"},
    {"checkpoint_every", "0"},
    {"eval_episodes", "10"},
};

bool known_key(const std::string& key) {
  if (key == "strokes_path") return true;
  for (const KeyDefault& kd : kRegistry) {
    if (key == kd.key) return true;
  }
  return false;
}

std::size_t positive_size(const FlatConfig& cfg, const std::string& key) {
  const long long v = cfg.get_int(key);
  if (v <= 0) {
    throw Error(Error::Code::Config, "config: key '" + key + "' must be positive");
  }
  return static_cast<std::size_t>(v);
}

std::size_t nonneg_size(const FlatConfig& cfg, const std::string& key) {
  const long long v = cfg.get_int(key);
  if (v < 0) {
    throw Error(Error::Code::Config, "config: key '" + key + "' must be non-negative");
  }
  return static_cast<std::size_t>(v);
}

// Tri-state flags: explicit on/off, or auto-resolved by the caller.
bool resolve_tristate(const std::string& value, bool auto_value, const std::string& key) {
  if (value == "auto") return auto_value;
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  throw Error(Error::Code::Config,
              "config: key '" + key + "' must be auto/on/off, got '" + value + "'");
}

}  // namespace

TrainSettings resolve_train_settings(const FlatConfig& user) {
  for (const auto& [key, value] : user.entries()) {
    (void)value;
    if (!known_key(key)) {
      throw Error(Error::Code::Config, "config: unknown key '" + key + "'");
    }
  }

  FlatConfig full;
  for (const KeyDefault& kd : kRegistry) {
    full.set(kd.key, user.get_string(kd.key, kd.value));
  }
  if (user.has("strokes_path")) full.set("strokes_path", user.get_string("strokes_path"));

  TrainSettings s;
  s.env = full.get_string("env");
  if (s.env != "lingauss" && s.env != "bimodal" && s.env != "pointmass" && s.env != "strokes") {
    throw Error(Error::Code::Config, "config: env must be one of lingauss/bimodal/pointmass/strokes");
  }
  s.strokes_path = full.get_string("strokes_path", "");
  if (s.env == "strokes" && s.strokes_path.empty()) {
    throw Error(Error::Code::Config, "config: env = strokes requires strokes_path");
  }
  s.run_dir = full.get_string("run_dir");
  s.run_name = full.get_string("run_name");
  s.mode = full.get_string("mode");
  if (s.mode == "flow") {
    s.use_flows = true;
    s.n_replicas = 4;
  } else if (s.mode == "gaussian") {
    s.use_flows = false;
    s.n_replicas = 1;
  } else if (s.mode == "flow_n1") {
    s.use_flows = true;
    s.n_replicas = 1;
  } else if (s.mode == "gaussian_n4") {
    s.use_flows = false;
    s.n_replicas = 4;
  } else {
    throw Error(Error::Code::Config,
                "config: mode must be one of flow/gaussian/flow_n1/gaussian_n4");
  }
  s.obs_kind = full.get_string("obs_kind");
  if (s.obs_kind != "vector" && s.obs_kind != "image") {
    throw Error(Error::Code::Config, "config: obs_kind must be vector or image");
  }

  s.seed = full.get_u64("seed", 1);
  s.steps = positive_size(full, "steps");
  s.seed_episodes = positive_size(full, "seed_episodes");
  s.updates_per_collect = positive_size(full, "updates_per_collect");
  s.batch_size = positive_size(full, "batch_size");
  s.seq_len = positive_size(full, "seq_len");
  if (s.seq_len < 2) {
    throw Error(Error::Code::Config, "config: seq_len must be at least 2");
  }
  s.z_dim = positive_size(full, "z_dim");
  s.s_dim = positive_size(full, "s_dim");
  s.embed_dim = positive_size(full, "embed_dim");
  s.hidden = positive_size(full, "hidden");
  s.flow_couplings = positive_size(full, "flow_couplings");
  s.flow_hidden = positive_size(full, "flow_hidden");
  s.horizon = positive_size(full, "horizon");
  s.replay_capacity = positive_size(full, "replay_capacity");
  s.checkpoint_every = nonneg_size(full, "checkpoint_every");
  s.eval_episodes = positive_size(full, "eval_episodes");

  const bool agent_auto = (s.env == "pointmass");
  s.train_agent = resolve_tristate(full.get_string("train_agent"), agent_auto, "train_agent");
  s.include_reward =
      resolve_tristate(full.get_string("include_reward"), s.train_agent, "include_reward");
  s.fixed_decoder = full.get_bool("fixed_decoder");
  s.fixed_decoder_std = full.get_double("fixed_decoder_std");
  s.decoder_std = full.get_double("decoder_std");
  s.holdout_fraction = full.get_double("holdout_fraction");
  if (s.holdout_fraction < 0.0 || s.holdout_fraction >= 1.0) {
    throw Error(Error::Code::Config, "config: holdout_fraction must lie in [0, 1)");
  }
  s.model_lr = full.get_double("model_lr");
  s.value_lr = full.get_double("value_lr");
  s.action_lr = full.get_double("action_lr");
  s.grad_clip = full.get_double("grad_clip");
  if (s.model_lr <= 0.0 || s.value_lr <= 0.0 || s.action_lr <= 0.0 || s.grad_clip <= 0.0) {
    throw Error(Error::Code::Config, "config: learning rates and grad_clip must be positive");
  }
  s.free_nats = full.get_double("free_nats");
  s.kl_scale = full.get_double("kl_scale");
  if (s.free_nats < 0.0 || s.kl_scale < 0.0) {
    throw Error(Error::Code::Config, "config: free_nats and kl_scale must be non-negative");
  }
  s.gamma = full.get_double("gamma");
  s.lambda = full.get_double("lambda");
  if (s.gamma <= 0.0 || s.gamma > 1.0 || s.lambda < 0.0 || s.lambda > 1.0) {
    throw Error(Error::Code::Config, "config: gamma in (0,1], lambda in [0,1]");
  }
  s.explore_noise = full.get_double("explore_noise");
  if (s.explore_noise < 0.0) {
    throw Error(Error::Code::Config, "config: explore_noise must be non-negative");
  }

  // Record the auto flags as the values they resolved to.
  full.set("train_agent", s.train_agent ? "on" : "off");
  full.set("include_reward", s.include_reward ? "on" : "off");
  s.resolved = full;
  return s;
}

ModelConfig model_config_from_settings(const TrainSettings& s, std::size_t obs_dim,
                                       std::size_t action_dim) {
  ModelConfig mc;
  if (s.obs_kind == "image") {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(obs_dim))));
    if (side * side != obs_dim) {
      throw Error(Error::Code::Config, "config: obs_kind = image needs square observations, got " +
                                           std::to_string(obs_dim) + " values");
    }
    mc.obs = ObservationSpec::image(side, side, 1);
  } else {
    mc.obs = ObservationSpec::vec(obs_dim);
  }
  mc.action_dim = action_dim;
  mc.z_dim = s.z_dim;
  mc.s_dim = s.s_dim;
  mc.embed_dim = s.embed_dim;
  mc.hidden = s.hidden;
  mc.flow_couplings = s.flow_couplings;
  mc.flow_hidden = s.flow_hidden;
  mc.use_flows = s.use_flows;
  mc.decoder_std = s.decoder_std;
  mc.fixed_decoder = s.fixed_decoder;
  mc.fixed_decoder_std = s.fixed_decoder_std;
  return mc;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[] = "flowbelief-ckpt v1\n";

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::ifstream& in, T& v, const std::string& path) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) {
    throw Error(Error::Code::Io, "checkpoint '" + path + "' is truncated");
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error(Error::Code::Io, "cannot write checkpoint '" + path + "'");
  }
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  write_raw(out, static_cast<std::uint64_t>(params.size()));
  for (const Parameter* p : params) {
    write_raw(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_raw(out, static_cast<std::uint32_t>(p->shape.size()));
    for (std::size_t d : p->shape) write_raw(out, static_cast<std::uint64_t>(d));
    const std::vector<double>& data = *p->value;
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) {
    throw Error(Error::Code::Io, "failed writing checkpoint '" + path + "'");
  }
}

void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(Error::Code::Io, "cannot open checkpoint '" + path + "'");
  }
  char magic[sizeof(kCheckpointMagic)] = {};
  in.read(magic, sizeof(kCheckpointMagic) - 1);
  if (!in || std::string(magic) != kCheckpointMagic) {
    throw Error(Error::Code::Io, "checkpoint '" + path + "' has a wrong header");
  }
  std::uint64_t count = 0;
  read_raw(in, count, path);
  if (count != params.size()) {
    throw Error(Error::Code::Config, "checkpoint '" + path + "' holds " + std::to_string(count) +
                                         " parameters, the networks expect " +
                                         std::to_string(params.size()));
  }
  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : params) by_name[p->name] = p;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    read_raw(in, name_len, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw Error(Error::Code::Io, "checkpoint '" + path + "' is truncated");
    std::uint32_t rank = 0;
    read_raw(in, rank, path);
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint64_t dim = 0;
      read_raw(in, dim, path);
      shape[d] = static_cast<std::size_t>(dim);
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw Error(Error::Code::Config,
                  "checkpoint '" + path + "' holds unknown parameter '" + name + "'");
    }
    Parameter* p = it->second;
    if (p->shape != shape) {
      throw Error(Error::Code::Config, "checkpoint '" + path + "': parameter '" + name +
                                           "' has shape " + shape_str(shape) + ", expected " +
                                           shape_str(p->shape));
    }
    std::vector<double>& data = *p->value;
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw Error(Error::Code::Io, "checkpoint '" + path + "' is truncated");
  }
}

// ---------------------------------------------------------------------------
// PGM rendering
// ---------------------------------------------------------------------------

void write_pgm(const std::string& path, std::size_t rows, std::size_t cols,
               const std::vector<double>& gray) {
  if (gray.size() != rows * cols || rows == 0 || cols == 0) {
    throw Error(Error::Code::Shape, "write_pgm: pixel count does not match rows x cols");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error(Error::Code::Io, "cannot write image '" + path + "'");
  }
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  std::vector<unsigned char> bytes(gray.size());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const double v = std::clamp(gray[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw Error(Error::Code::Io, "failed writing image '" + path + "'");
  }
}

// ---------------------------------------------------------------------------
// Data sources and collection
// ---------------------------------------------------------------------------

namespace {

Tensor row_tensor(const std::vector<double>& row) {
  return Tensor::from({1, row.size()}, std::vector<double>(row));
}

// Loads the stroke dataset and splits off the held-out tail. The split is
// positional and deterministic: the last round(fraction * N) episodes are
// held out.
void load_stroke_episodes(const TrainSettings& s, std::vector<Episode>* train,
                          std::vector<Episode>* holdout, std::size_t* obs_dim) {
  const std::vector<StrokeEpisode> raw = load_strokes_text(s.strokes_path);
  if (raw.empty()) {
    throw Error(Error::Code::Config, "stroke dataset '" + s.strokes_path + "' is empty");
  }
  const std::size_t dim = raw[0].height * raw[0].width;
  const std::size_t n_hold =
      static_cast<std::size_t>(std::llround(s.holdout_fraction * static_cast<double>(raw.size())));
  const std::size_t n_train = raw.size() - n_hold;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].height * raw[i].width != dim) {
      throw Error(Error::Code::Shape, "stroke dataset: episodes disagree on the grid size");
    }
    Episode ep;
    for (std::vector<double>& frame : rasterize_cumulative(raw[i])) {
      ep.obs.push_back(std::move(frame));
      ep.actions.push_back({0.0});
      ep.rewards.push_back(0.0);
    }
    (i < n_train ? train : holdout)->push_back(std::move(ep));
  }
  *obs_dim = dim;
}

// Rolls one episode. With a model+actor the action is the mean policy plus
// exploration noise on a belief filtered online; otherwise actions are
// uniform random. All draws come from `rng` in a fixed order.
Episode collect_episode(Environment& env, BeliefModel* model, Actor* actor, double noise,
                        Rng& rng) {
  NoGradGuard no_grad;
  Episode ep;
  const std::size_t act_dim = env.action_dim();
  const std::vector<double> zero_action(act_dim, 0.0);

  std::vector<double> obs = env.reset(rng);
  ep.obs.push_back(obs);
  ep.actions.push_back(zero_action);
  ep.rewards.push_back(0.0);

  const bool policy = (model != nullptr && actor != nullptr);
  BeliefState belief;
  if (policy) {
    belief = model->initial_belief(1);
    belief = model->observe_step(belief, row_tensor(zero_action), row_tensor(obs), rng);
  }

  bool done = false;
  while (!done) {
    std::vector<double> action(act_dim);
    if (policy) {
      const Tensor mean = actor->mean_action(belief_features(belief));
      for (std::size_t d = 0; d < act_dim; ++d) {
        action[d] = std::clamp(mean.data()[d] + noise * rng.normal(), -1.0, 1.0);
      }
    } else {
      for (std::size_t d = 0; d < act_dim; ++d) action[d] = rng.uniform(-1.0, 1.0);
    }
    const EnvStep step = env.step(action, rng);
    if (policy) {
      belief = model->observe_step(belief, row_tensor(action), row_tensor(step.obs), rng);
    }
    ep.obs.push_back(step.obs);
    ep.actions.push_back(action);
    ep.rewards.push_back(step.reward);
    done = step.done;
  }
  return ep;
}

struct UpdateStats {
  double model_loss = 0.0, recon_ll = 0.0, reward_ll = 0.0;
  double kl_raw = 0.0, kl_clipped = 0.0;
  double actor_loss = 0.0, critic_loss = 0.0;
};

struct Networks {
  BeliefModel* model = nullptr;
  Actor* actor = nullptr;
  Critic* critic = nullptr;
  std::vector<Parameter*> model_params, actor_params, critic_params;
};

// One gradient update: the model loss first, then (for agent runs) the
// imagination rollout with actor and critic updates. The rollout applies
// model and critic weights frozen, so each backward pass reaches exactly
// one parameter group; zero_grad between passes keeps the tape clean.
UpdateStats one_update(Networks& nets, ReplayBuffer& replay, const TrainSettings& s,
                       const LossConfig& loss_cfg, const AgentConfig& agent_cfg,
                       const AdamConfig& model_adam, const AdamConfig& actor_adam,
                       const AdamConfig& critic_adam, Rng& rng) {
  const SequenceBatch batch = replay.sample(s.batch_size, s.seq_len, rng);
  UpdateStats st;

  Tape tape;
  ModelLoss ml = compute_model_loss(*nets.model, batch, loss_cfg, rng);
  tape.backward(ml.loss);
  clip_grad_norm(tape, nets.model_params, s.grad_clip);
  adam_step(tape, nets.model_params, model_adam);
  st.model_loss = ml.loss.value();
  st.recon_ll = ml.recon_ll;
  st.reward_ll = ml.reward_ll;
  st.kl_raw = ml.kl_raw;
  st.kl_clipped = ml.kl_clipped;

  if (nets.actor != nullptr) {
    const ImaginedRollout roll =
        imagine_trajectories(*nets.model, *nets.actor, *nets.critic, ml.states, agent_cfg, rng);
    const std::vector<Tensor> targets =
        td_lambda_targets(roll.rewards, roll.values, s.gamma, s.lambda);

    const Tensor a_loss = actor_loss(targets);
    tape.zero_grad();
    tape.backward(a_loss);
    clip_grad_norm(tape, nets.actor_params, s.grad_clip);
    adam_step(tape, nets.actor_params, actor_adam);
    st.actor_loss = a_loss.value();

    const Tensor c_loss = critic_loss(*nets.critic, roll, targets);
    tape.zero_grad();
    tape.backward(c_loss);
    clip_grad_norm(tape, nets.critic_params, s.grad_clip);
    adam_step(tape, nets.critic_params, critic_adam);
    st.critic_loss = c_loss.value();
  }
  return st;
}

// Filters `context` steps of the episode, imagines `horizon` more, and
// writes a trace CSV plus a PGM (filmstrip when observations are square,
// heatmap otherwise).
void render_episode(BeliefModel& model, Actor* actor, const Episode& ep,
                    const std::string& out_prefix, std::size_t context, std::size_t horizon,
                    Rng& rng) {
  NoGradGuard no_grad;
  const std::size_t obs_dim = ep.obs[0].size();
  const std::size_t act_dim = ep.actions[0].size();
  const std::size_t ctx = std::min(context, ep.length());

  std::vector<std::vector<double>> filtered;  // decoded means along the filter
  BeliefState belief = model.initial_belief(1);
  for (std::size_t t = 0; t < ctx; ++t) {
    belief = model.observe_step(belief, row_tensor(ep.actions[t]), row_tensor(ep.obs[t]), rng);
    const DiagonalGaussian dec = model.decode(belief.z, belief.s);
    filtered.push_back(dec.mean.data());
  }

  std::vector<std::vector<double>> imagined;  // decoded means along the dream
  BeliefState state = belief;
  for (std::size_t h = 0; h < horizon; ++h) {
    Tensor action;
    if (actor != nullptr) {
      action = actor->mean_action(belief_features(state));
    } else {
      action = Tensor::zeros({1, act_dim});
    }
    state = model.imagine_step(state, action, rng);
    const DiagonalGaussian dec = model.decode(state.z, state.s);
    imagined.push_back(dec.mean.data());
  }

  // Trace CSV: ground truth for the whole episode, decoded filter means for
  // the context, decoded imagination means afterwards.
  {
    FILE* f = std::fopen((out_prefix + ".csv").c_str(), "w");
    if (f == nullptr) {
      throw Error(Error::Code::Io, "cannot write render '" + out_prefix + ".csv'");
    }
    std::fprintf(f, "t,kind");
    for (std::size_t d = 0; d < obs_dim; ++d) std::fprintf(f, ",v%zu", d);
    std::fprintf(f, "\n");
    auto write_row = [&](std::size_t t, const char* kind, const std::vector<double>& row) {
      std::fprintf(f, "%zu,%s", t, kind);
      for (std::size_t d = 0; d < obs_dim; ++d) std::fprintf(f, ",%.17g", row[d]);
      std::fprintf(f, "\n");
    };
    for (std::size_t t = 0; t < ep.length(); ++t) write_row(t, "truth", ep.obs[t]);
    for (std::size_t t = 0; t < filtered.size(); ++t) write_row(t, "filtered", filtered[t]);
    for (std::size_t h = 0; h < imagined.size(); ++h) write_row(ctx + h, "imagined", imagined[h]);
    std::fclose(f);
  }

  const std::size_t columns = ctx + horizon;
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(obs_dim))));
  if (side >= 4 && side * side == obs_dim) {
    // Filmstrip: truth on top, model (filtered then imagined) below.
    const std::size_t tile = side + 1;
    const std::size_t rows_px = 2 * tile + 1;
    const std::size_t cols_px = columns * tile + 1;
    std::vector<double> img(rows_px * cols_px, 0.25);  // gutter gray
    auto blit = [&](std::size_t row_idx, std::size_t col_idx, const std::vector<double>& frame) {
      for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) {
          img[(row_idx * tile + 1 + r) * cols_px + col_idx * tile + 1 + c] =
              std::clamp(frame[r * side + c] + 0.5, 0.0, 1.0);
        }
      }
    };
    for (std::size_t t = 0; t < columns && t < ep.length(); ++t) blit(0, t, ep.obs[t]);
    for (std::size_t t = 0; t < filtered.size(); ++t) blit(1, t, filtered[t]);
    for (std::size_t h = 0; h < imagined.size(); ++h) blit(1, ctx + h, imagined[h]);
    write_pgm(out_prefix + ".pgm", rows_px, cols_px, img);
  } else {
    // Heatmap: one row per observation dimension, truth above the model,
    // scaled together to [0,1].
    double lo = ep.obs[0][0], hi = ep.obs[0][0];
    auto absorb = [&](const std::vector<std::vector<double>>& rows) {
      for (const auto& row : rows) {
        for (double v : row) {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
    };
    absorb(ep.obs);
    absorb(filtered);
    absorb(imagined);
    const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
    const std::size_t rows_px = 2 * obs_dim + 1;
    std::vector<double> img(rows_px * columns, 0.5);
    for (std::size_t t = 0; t < columns; ++t) {
      for (std::size_t d = 0; d < obs_dim; ++d) {
        if (t < ep.length()) img[d * columns + t] = (ep.obs[t][d] - lo) / span;
        if (t < filtered.size()) {
          img[(obs_dim + 1 + d) * columns + t] = (filtered[t][d] - lo) / span;
        } else if (t >= ctx && t - ctx < imagined.size()) {
          img[(obs_dim + 1 + d) * columns + t] = (imagined[t - ctx][d] - lo) / span;
        }
      }
    }
    write_pgm(out_prefix + ".pgm", rows_px, columns, img);
  }
}

std::vector<Parameter*> all_parameters(Networks& nets) {
  std::vector<Parameter*> all = nets.model_params;
  all.insert(all.end(), nets.actor_params.begin(), nets.actor_params.end());
  all.insert(all.end(), nets.critic_params.begin(), nets.critic_params.end());
  return all;
}

}  // namespace

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainResult run_training(const FlatConfig& user_config) {
  TrainSettings s = resolve_train_settings(user_config);
  const std::string run_path = s.run_dir + "/" + s.run_name;
  fs::create_directories(run_path + "/checkpoints");
  fs::create_directories(run_path + "/renders");
  s.resolved.save(run_path + "/config.resolved");

  Rng root(s.seed);
  Rng init_rng = root.split(1);
  Rng collect_rng = root.split(2);
  Rng update_rng = root.split(3);
  Rng render_rng = root.split(4);

  // Data source.
  std::unique_ptr<Environment> env;
  std::vector<Episode> train_set, holdout;
  std::size_t obs_dim = 0, action_dim = 1;
  const bool offline = (s.env == "strokes");
  if (offline) {
    load_stroke_episodes(s, &train_set, &holdout, &obs_dim);
  } else {
    env = make_env(s.env);
    obs_dim = env->obs_dim();
    action_dim = env->action_dim();
    if (s.seq_len > env->horizon()) {
      throw Error(Error::Code::Config, "config: seq_len exceeds the environment horizon");
    }
  }

  BeliefModel model(model_config_from_settings(s, obs_dim, action_dim), init_rng);
  Actor actor;
  Critic critic;
  if (s.train_agent) {
    actor = Actor("actor", s.s_dim + s.z_dim, action_dim, s.hidden, init_rng);
    critic = Critic("critic", s.s_dim + s.z_dim, s.hidden, init_rng);
  }
  Networks nets;
  nets.model = &model;
  nets.model_params = model.parameters();
  if (s.train_agent) {
    nets.actor = &actor;
    nets.critic = &critic;
    nets.actor_params = actor.parameters();
    nets.critic_params = critic.parameters();
  }

  ReplayBuffer replay(s.replay_capacity);
  if (offline) {
    for (Episode& ep : train_set) replay.add(std::move(ep));
    if (!replay.can_sample(s.seq_len)) {
      throw Error(Error::Code::Config, "config: no dataset episode is seq_len steps long");
    }
  }

  FILE* metrics = std::fopen((run_path + "/metrics.csv").c_str(), "w");
  if (metrics == nullptr) {
    throw Error(Error::Code::Io, "cannot write '" + run_path + "/metrics.csv'");
  }
  std::fprintf(metrics,
               "env_steps,updates,model_loss,recon_ll,reward_ll,kl_raw,kl_clipped,"
               "actor_loss,critic_loss,episode_return\n");

  const LossConfig loss_cfg{s.free_nats, s.kl_scale, s.include_reward};
  const AgentConfig agent_cfg{s.horizon, s.n_replicas, s.gamma, s.lambda};
  const AdamConfig model_adam{s.model_lr, 0.9, 0.999, 1e-8};
  const AdamConfig actor_adam{s.action_lr, 0.9, 0.999, 1e-8};
  const AdamConfig critic_adam{s.value_lr, 0.9, 0.999, 1e-8};

  TrainResult result;
  result.run_path = run_path;
  result.episodes = offline ? replay.size() : 0;

  if (!offline) {
    for (std::size_t i = 0; i < s.seed_episodes; ++i) {
      Episode ep = collect_episode(*env, nullptr, nullptr, 0.0, collect_rng);
      result.env_steps += ep.length();
      ++result.episodes;
      replay.add(std::move(ep));
    }
  }

  std::size_t cycles = 0;
  double last_loss = 0.0;
  auto progress = [&]() { return offline ? result.updates : result.env_steps; };
  while (progress() < s.steps) {
    UpdateStats sum;
    std::size_t k = 0;
    const std::size_t budget =
        offline ? std::min(s.updates_per_collect, s.steps - result.updates)
                : s.updates_per_collect;
    for (std::size_t u = 0; u < budget; ++u) {
      // Warm-up: keep collecting until the buffer holds a full window.
      if (!replay.can_sample(s.seq_len)) break;
      const UpdateStats st = one_update(nets, replay, s, loss_cfg, agent_cfg, model_adam,
                                        actor_adam, critic_adam, update_rng);
      sum.model_loss += st.model_loss;
      sum.recon_ll += st.recon_ll;
      sum.reward_ll += st.reward_ll;
      sum.kl_raw += st.kl_raw;
      sum.kl_clipped += st.kl_clipped;
      sum.actor_loss += st.actor_loss;
      sum.critic_loss += st.critic_loss;
      ++result.updates;
      ++k;
    }

    double episode_return = 0.0;
    if (!offline) {
      Episode ep = collect_episode(*env, s.train_agent ? &model : nullptr,
                                   s.train_agent ? &actor : nullptr, s.explore_noise,
                                   collect_rng);
      for (double r : ep.rewards) episode_return += r;
      result.env_steps += ep.length();
      ++result.episodes;
      replay.add(std::move(ep));
    }

    const double n = k > 0 ? static_cast<double>(k) : 1.0;
    last_loss = sum.model_loss / n;
    std::fprintf(metrics, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                 result.env_steps, result.updates, sum.model_loss / n, sum.recon_ll / n,
                 sum.reward_ll / n, sum.kl_raw / n, sum.kl_clipped / n, sum.actor_loss / n,
                 sum.critic_loss / n, episode_return);
    ++cycles;
    if (s.checkpoint_every > 0 && cycles % s.checkpoint_every == 0) {
      save_checkpoint(run_path + "/checkpoints/step_" + std::to_string(progress()) + ".ckpt",
                      all_parameters(nets));
    }
  }
  std::fclose(metrics);
  result.final_model_loss = last_loss;

  save_checkpoint(run_path + "/checkpoints/step_" + std::to_string(progress()) + ".ckpt",
                  all_parameters(nets));

  // Final qualitative render: a fresh episode for environments, the first
  // held-out (or last training) episode for datasets.
  Episode render_ep;
  if (offline) {
    render_ep = holdout.empty() ? replay.episode(replay.size() - 1) : holdout.front();
  } else {
    render_ep = collect_episode(*env, s.train_agent ? &model : nullptr,
                                s.train_agent ? &actor : nullptr, 0.0, render_rng);
  }
  render_episode(model, s.train_agent ? &actor : nullptr, render_ep, run_path + "/renders/final",
                 std::min<std::size_t>(15, render_ep.length()), 15, render_rng);
  return result;
}

// ---------------------------------------------------------------------------
// Loading runs back
// ---------------------------------------------------------------------------

LoadedRun load_run(const std::string& run_path) {
  const std::string cfg_path = run_path + "/config.resolved";
  LoadedRun run;
  run.settings = resolve_train_settings(FlatConfig::from_file(cfg_path));
  const TrainSettings& s = run.settings;

  if (s.env == "strokes") {
    std::vector<Episode> train_set;
    load_stroke_episodes(s, &train_set, &run.holdout, &run.obs_dim);
    run.action_dim = 1;
  } else {
    std::unique_ptr<Environment> env = make_env(s.env);
    run.obs_dim = env->obs_dim();
    run.action_dim = env->action_dim();
  }

  // Checkpoint values overwrite the fresh initialization entirely; the rng
  // only shapes the construction order.
  Rng init_rng = Rng(s.seed).split(1);
  run.model = std::make_unique<BeliefModel>(model_config_from_settings(s, run.obs_dim, run.action_dim),
                                            init_rng);
  run.has_agent = s.train_agent;
  if (run.has_agent) {
    run.actor = Actor("actor", s.s_dim + s.z_dim, run.action_dim, s.hidden, init_rng);
    run.critic = Critic("critic", s.s_dim + s.z_dim, s.hidden, init_rng);
  }

  // Latest checkpoint by step number.
  const std::string ckpt_dir = run_path + "/checkpoints";
  long long best = -1;
  for (const auto& entry : fs::directory_iterator(ckpt_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("step_", 0) != 0 || name.size() <= 10) continue;
    if (name.substr(name.size() - 5) != ".ckpt") continue;
    const std::string num = name.substr(5, name.size() - 10);
    char* end = nullptr;
    const long long v = std::strtoll(num.c_str(), &end, 10);
    if (end != nullptr && *end == '\0' && v > best) {
      best = v;
      run.checkpoint_path = entry.path().string();
    }
  }
  if (best < 0) {
    throw Error(Error::Code::Io, "run '" + run_path + "' has no checkpoints");
  }

  std::vector<Parameter*> params = run.model->parameters();
  if (run.has_agent) {
    for (Parameter* p : run.actor.parameters()) params.push_back(p);
    for (Parameter* p : run.critic.parameters()) params.push_back(p);
  }
  load_checkpoint(run.checkpoint_path, params);
  return run;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalResult run_evaluation(const std::string& run_path, std::size_t episodes,
                          std::uint64_t seed_bump) {
  LoadedRun run = load_run(run_path);
  const TrainSettings& s = run.settings;
  if (episodes == 0) episodes = s.eval_episodes;
  Rng rng = Rng(s.seed ^ 0x52756e4556414cULL).split(100 + seed_bump);
  NoGradGuard no_grad;

  EvalResult out;
  if (s.env == "strokes") {
    if (run.holdout.empty()) {
      throw Error(Error::Code::Config, "run '" + run_path + "' has no held-out episodes");
    }
    const std::size_t n = std::min(episodes, run.holdout.size());
    for (std::size_t i = 0; i < n; ++i) {
      out.mean_elbo += evaluate_elbo(*run.model, episode_to_batch(run.holdout[i]), 1, rng);
    }
    out.mean_elbo /= static_cast<double>(n);
    out.episodes = n;
    return out;
  }

  std::unique_ptr<Environment> env = make_env(s.env);
  for (std::size_t i = 0; i < episodes; ++i) {
    Episode ep = collect_episode(*env, run.has_agent ? run.model.get() : nullptr,
                                 run.has_agent ? &run.actor : nullptr, 0.0, rng);
    for (double r : ep.rewards) out.mean_return += r;
    out.mean_elbo += evaluate_elbo(*run.model, episode_to_batch(ep), 1, rng);
  }
  out.mean_return /= static_cast<double>(episodes);
  out.mean_elbo /= static_cast<double>(episodes);
  out.episodes = episodes;
  return out;
}

void run_predict_render(const std::string& run_path, const std::string& out_prefix,
                        std::size_t context, std::size_t horizon) {
  LoadedRun run = load_run(run_path);
  const TrainSettings& s = run.settings;
  Rng rng = Rng(s.seed ^ 0x52656e646572ULL).split(7);

  Episode ep;
  if (s.env == "strokes") {
    if (run.holdout.empty()) {
      throw Error(Error::Code::Config, "run '" + run_path + "' has no held-out episodes");
    }
    ep = run.holdout.front();
  } else {
    std::unique_ptr<Environment> env = make_env(s.env);
    ep = collect_episode(*env, run.has_agent ? run.model.get() : nullptr,
                         run.has_agent ? &run.actor : nullptr, 0.0, rng);
  }

  const fs::path parent = fs::path(out_prefix).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  render_episode(*run.model, run.has_agent ? &run.actor : nullptr, ep, out_prefix, context,
                 horizon, rng);
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

std::vector<AblationRow> run_ablation(const FlatConfig& base,
                                      const std::vector<std::string>& modes) {
  if (modes.empty()) {
    throw Error(Error::Code::Config, "ablation: no modes requested");
  }
  const TrainSettings base_settings = resolve_train_settings(base);
  std::vector<AblationRow> rows;
  for (const std::string& mode : modes) {
    FlatConfig cfg = base;
    cfg.set("mode", mode);
    cfg.set("run_name", base_settings.run_name + "_" + mode);
    const TrainResult tr = run_training(cfg);
    const EvalResult ev = run_evaluation(tr.run_path, base_settings.eval_episodes);
    AblationRow row;
    row.mode = mode;
    row.run_path = tr.run_path;
    row.final_model_loss = tr.final_model_loss;
    row.eval_return = ev.mean_return;
    row.eval_elbo = ev.mean_elbo;
    rows.push_back(row);
  }

  const std::string summary_path =
      base_settings.run_dir + "/" + base_settings.run_name + "_ablation.csv";
  FILE* f = std::fopen(summary_path.c_str(), "w");
  if (f == nullptr) {
    throw Error(Error::Code::Io, "cannot write ablation summary '" + summary_path + "'");
  }
  std::fprintf(f, "mode,run_path,final_model_loss,eval_return,eval_elbo\n");
  for (const AblationRow& row : rows) {
    std::fprintf(f, "%s,%s,%.17g,%.17g,%.17g\n", row.mode.c_str(), row.run_path.c_str(),
                 row.final_model_loss, row.eval_return, row.eval_elbo);
  }
  std::fclose(f);
  return rows;
}

}  // namespace flowbelief
