// Command-line entry point: training runs, evaluation, prediction renders,
// ablation sweeps, the bound-gap diagnostic, and stroke dataset utilities.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "flowbelief/elbo.hpp"
#include "flowbelief/env.hpp"
#include "flowbelief/trainer.hpp"

namespace fs = std::filesystem;
using namespace flowbelief;

namespace {

FlatConfig load_with_overrides(const std::string& config_path,
                               const std::vector<std::string>& sets) {
  FlatConfig cfg =
      config_path.empty() ? FlatConfig() : FlatConfig::from_file(config_path);
  for (const std::string& kv : sets) cfg.apply_override(kv);
  return cfg;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets) {
  const FlatConfig cfg = load_with_overrides(config_path, sets);
  const TrainResult tr = run_training(cfg);
  std::printf("run: %s\n", tr.run_path.c_str());
  std::printf("env_steps: %zu\nupdates: %zu\nepisodes: %zu\n", tr.env_steps, tr.updates,
              tr.episodes);
  std::printf("final_model_loss: %.6g\n", tr.final_model_loss);
  return 0;
}

int cmd_evaluate(const std::string& run_path, std::size_t episodes, std::uint64_t seed_bump) {
  const EvalResult ev = run_evaluation(run_path, episodes, seed_bump);
  std::printf("episodes: %zu\n", ev.episodes);
  std::printf("mean_return: %.6g\n", ev.mean_return);
  std::printf("mean_elbo: %.6g\n", ev.mean_elbo);
  return 0;
}

int cmd_predict_render(const std::string& run_path, const std::string& out_prefix,
                       std::size_t context, std::size_t horizon) {
  run_predict_render(run_path, out_prefix, context, horizon);
  std::printf("wrote %s.csv\n", out_prefix.c_str());
  std::printf("wrote %s.pgm\n", out_prefix.c_str());
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& modes,
               const std::vector<std::string>& sets) {
  const FlatConfig cfg = load_with_overrides(config_path, sets);
  const std::vector<AblationRow> rows = run_ablation(cfg, modes);
  std::printf("%-12s %-14s %-14s %-14s %s\n", "mode", "model_loss", "eval_return",
              "eval_elbo", "run");
  for (const AblationRow& row : rows) {
    std::printf("%-12s %-14.6g %-14.6g %-14.6g %s\n", row.mode.c_str(),
                row.final_model_loss, row.eval_return, row.eval_elbo, row.run_path.c_str());
  }
  return 0;
}

// Numerical check of the identity between the filtering bound's gap and the
// accumulated KL to the exact one-step posterior, on a diagonal
// linear-Gaussian system with a deliberately suboptimal filter.
int cmd_check_gap(std::size_t dim, std::size_t steps, std::size_t samples,
                  std::uint64_t seed) {
  GapCheckSpec spec;
  spec.dim = dim;
  spec.steps = steps;
  spec.A.assign(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) spec.A[i * dim + i] = 0.9;
  spec.q_var.assign(dim, 0.09);
  spec.r_var.assign(dim, 0.01);
  spec.gain.assign(dim, 0.7);
  spec.q_std.assign(dim, 0.25);

  LinearGaussianEnv env(spec.A, spec.q_var, spec.r_var, steps);
  Rng env_rng(seed);
  std::vector<double> obs_row = env.reset(env_rng);
  spec.obs.insert(spec.obs.end(), obs_row.begin(), obs_row.end());
  for (std::size_t t = 1; t < steps; ++t) {
    obs_row = env.step({0.0}, env_rng).obs;
    spec.obs.insert(spec.obs.end(), obs_row.begin(), obs_row.end());
  }

  Rng rng(seed + 1);
  const GapCheckResult res = elbo_gap_check(spec, samples, rng);
  std::printf("predictive-minus-bound: %.6f +- %.6f\n", res.lhs_mean, res.lhs_se);
  std::printf("posterior-KL sum:       %.6f +- %.6f\n", res.rhs_mean, res.rhs_se);
  std::printf("difference:             %.6f (3-sigma budget %.6f)\n",
              res.lhs_mean - res.rhs_mean,
              3.0 * std::sqrt(res.lhs_se * res.lhs_se + res.rhs_se * res.rhs_se));
  if (!res.consistent()) {
    std::printf("INCONSISTENT: the two sides disagree beyond 3 standard errors\n");
    return 2;
  }
  std::printf("consistent within 3 standard errors\n");
  return 0;
}

int cmd_convert_strokes(const std::string& in_path, const std::string& out,
                        std::size_t synthesize, std::size_t side, std::uint64_t seed) {
  if (synthesize > 0) {
    if (out.empty()) throw Error(Error::Code::Config, "--synthesize needs --out FILE");
    Rng rng(seed);
    const std::vector<StrokeEpisode> eps = make_synthetic_strokes(synthesize, side, rng);
    const fs::path parent = fs::path(out).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    save_strokes_text(out, eps);
    std::printf("wrote %zu episodes (%zu pairs) to %s\n", eps.size(), synthesize,
                out.c_str());
    return 0;
  }
  if (in_path.empty() || out.empty()) {
    throw Error(Error::Code::Config,
                "convert-strokes needs either --synthesize N --out FILE or --in FILE --out DIR");
  }
  const std::vector<StrokeEpisode> eps = load_strokes_text(in_path);
  fs::create_directories(out);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const std::vector<std::vector<double>> frames = rasterize_cumulative(eps[i]);
    if (frames.empty()) continue;
    // Filmstrip of the episode: one tile per stroke point.
    const std::size_t side_px = eps[i].height;
    const std::size_t tile = side_px + 1;
    const std::size_t cols_px = frames.size() * tile + 1;
    const std::size_t rows_px = tile + 1;
    std::vector<double> img(rows_px * cols_px, 0.25);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      for (std::size_t r = 0; r < side_px; ++r) {
        for (std::size_t c = 0; c < eps[i].width; ++c) {
          img[(1 + r) * cols_px + t * tile + 1 + c] = frames[t][r * eps[i].width + c] + 0.5;
        }
      }
    }
    write_pgm(out + "/episode_" + std::to_string(i) + ".pgm", rows_px, cols_px, img);
  }
  std::printf("rendered %zu episodes into %s\n", eps.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"belief-state learning and control toolkit"};
  app.require_subcommand(1);

  // train
  std::string train_config;
  std::vector<std::string> train_sets;
  CLI::App* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", train_config, "config file")->required();
  train->add_option("--set", train_sets, "override, key=value (repeatable)");

  // evaluate
  std::string eval_run;
  std::size_t eval_episodes = 0;
  std::uint64_t eval_bump = 0;
  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a run's latest checkpoint");
  evaluate->add_option("--run", eval_run, "run directory")->required();
  evaluate->add_option("--episodes", eval_episodes, "episode count (default from config)");
  evaluate->add_option("--seed-bump", eval_bump, "shift the evaluation seed");

  // predict-render
  std::string render_run, render_out;
  std::size_t render_context = 15, render_horizon = 15;
  CLI::App* render = app.add_subcommand("predict-render",
                                        "filter a context, imagine ahead, render the result");
  render->add_option("--run", render_run, "run directory")->required();
  render->add_option("--out", render_out, "output path prefix")->required();
  render->add_option("--context", render_context, "observed steps before imagining");
  render->add_option("--horizon", render_horizon, "imagined steps");

  // ablate
  std::string abl_config;
  std::vector<std::string> abl_sets;
  std::vector<std::string> abl_modes = {"flow", "gaussian", "flow_n1", "gaussian_n4"};
  CLI::App* ablate = app.add_subcommand("ablate", "train one run per mode and summarize");
  ablate->add_option("--config", abl_config, "base config file")->required();
  ablate->add_option("--modes", abl_modes, "modes to sweep")->delimiter(',');
  ablate->add_option("--set", abl_sets, "override, key=value (repeatable)");

  // check-gap
  std::size_t gap_dim = 2, gap_steps = 10, gap_samples = 20000;
  std::uint64_t gap_seed = 1;
  CLI::App* gap = app.add_subcommand("check-gap",
                                     "verify the bound-gap identity on a linear-Gaussian system");
  gap->add_option("--dim", gap_dim, "state dimension");
  gap->add_option("--steps", gap_steps, "sequence length");
  gap->add_option("--samples", gap_samples, "Monte Carlo sample paths per side");
  gap->add_option("--seed", gap_seed, "rng seed");

  // convert-strokes
  std::string strokes_in, strokes_out;
  std::size_t strokes_synth = 0, strokes_side = 14;
  std::uint64_t strokes_seed = 1;
  CLI::App* strokes = app.add_subcommand("convert-strokes",
                                         "synthesize a stroke corpus or render one to images");
  strokes->add_option("--in", strokes_in, "stroke dataset to render");
  strokes->add_option("--out", strokes_out, "output file (synthesize) or directory (render)");
  strokes->add_option("--synthesize", strokes_synth, "generate this many episode pairs");
  strokes->add_option("--side", strokes_side, "grid side for synthesized strokes");
  strokes->add_option("--seed", strokes_seed, "rng seed for synthesis");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_config, train_sets);
    if (evaluate->parsed()) return cmd_evaluate(eval_run, eval_episodes, eval_bump);
    if (render->parsed()) {
      return cmd_predict_render(render_run, render_out, render_context, render_horizon);
    }
    if (ablate->parsed()) return cmd_ablate(abl_config, abl_modes, abl_sets);
    if (gap->parsed()) return cmd_check_gap(gap_dim, gap_steps, gap_samples, gap_seed);
    if (strokes->parsed()) {
      return cmd_convert_strokes(strokes_in, strokes_out, strokes_synth, strokes_side,
                                 strokes_seed);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
