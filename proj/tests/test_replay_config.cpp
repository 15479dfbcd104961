#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "flowbelief/config.hpp"
#include "flowbelief/replay.hpp"
#include "flowbelief/trainer.hpp"

using namespace flowbelief;

namespace {

// An episode whose observations all carry one marker value, so a sampled
// window reveals which episode it came from and at which offset.
Episode marked_episode(double marker, std::size_t length, std::size_t obs_dim = 3,
                       std::size_t act_dim = 2) {
  Episode ep;
  for (std::size_t t = 0; t < length; ++t) {
    std::vector<double> o(obs_dim, marker);
    o[0] = marker + static_cast<double>(t);  // position encodes the step
    ep.obs.push_back(o);
    ep.actions.push_back(std::vector<double>(act_dim, marker + 0.5));
    ep.rewards.push_back(marker * 10.0 + static_cast<double>(t));
  }
  return ep;
}

std::string write_temp(const char* name, const std::string& content) {
  const std::string path = std::string("/tmp/flowbelief_cfgtest_") + name;
  std::ofstream out(path);
  out << content;
  return path;
}

}  // namespace

TEST_CASE("replay evicts oldest episodes first") {
  ReplayBuffer buf(3);
  buf.add(marked_episode(1.0, 4));
  buf.add(marked_episode(2.0, 5));
  buf.add(marked_episode(3.0, 6));
  CHECK(buf.size() == 3);
  CHECK(buf.total_steps() == 15);

  buf.add(marked_episode(4.0, 7));
  CHECK(buf.size() == 3);
  CHECK(buf.total_steps() == 18);  // episode of length 4 evicted
  CHECK(buf.episode(0).obs[0][1] == 2.0);
  CHECK(buf.episode(2).obs[0][1] == 4.0);
}

TEST_CASE("sampled windows never cross episode boundaries") {
  ReplayBuffer buf(10);
  buf.add(marked_episode(1.0, 8));
  buf.add(marked_episode(2.0, 12));
  buf.add(marked_episode(3.0, 5));

  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    SequenceBatch batch = buf.sample(6, 5, rng);
    REQUIRE(batch.length() == 5);
    REQUIRE(batch.batch() == 6);
    for (std::size_t b = 0; b < 6; ++b) {
      // The marker (second obs component) stays constant across the window,
      // and the step encoding advances by exactly one per time index.
      const double marker = batch.obs[0].data()[b * 3 + 1];
      const double start = batch.obs[0].data()[b * 3] - marker;
      for (std::size_t t = 0; t < 5; ++t) {
        CHECK(batch.obs[t].data()[b * 3 + 1] == marker);
        CHECK(batch.obs[t].data()[b * 3] == marker + start + static_cast<double>(t));
        CHECK(batch.actions[t].data()[b * 2] == marker + 0.5);
        CHECK(batch.rewards[t].data()[b] ==
              marker * 10.0 + start + static_cast<double>(t));
      }
      // Window fits inside its source episode.
      const std::size_t ep_len = marker == 1.0 ? 8 : (marker == 2.0 ? 12 : 5);
      CHECK(start + 5 <= static_cast<double>(ep_len));
      CHECK(start >= 0.0);
    }
  }
}

TEST_CASE("episodes shorter than the window are skipped, not stitched") {
  ReplayBuffer buf(10);
  buf.add(marked_episode(1.0, 3));
  buf.add(marked_episode(2.0, 9));
  CHECK(buf.can_sample(9));
  CHECK(!buf.can_sample(10));

  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    SequenceBatch batch = buf.sample(4, 6, rng);
    for (std::size_t b = 0; b < 4; ++b) {
      CHECK(batch.obs[0].data()[b * 3 + 1] == 2.0);  // only the long episode qualifies
    }
  }

  ReplayBuffer tiny(4);
  tiny.add(marked_episode(1.0, 3));
  CHECK_THROWS_WITH_AS(tiny.sample(2, 6, rng), doctest::Contains("long enough"), Error);
}

TEST_CASE("replay rejects malformed episodes and bad arguments") {
  ReplayBuffer buf(4);
  CHECK_THROWS_WITH_AS(ReplayBuffer(0), doctest::Contains("[config]"), Error);

  Episode empty;
  CHECK_THROWS_WITH_AS(buf.add(empty), doctest::Contains("[config]"), Error);

  Episode ragged = marked_episode(1.0, 4);
  ragged.obs[2].push_back(0.0);
  CHECK_THROWS_WITH_AS(buf.add(ragged), doctest::Contains("ragged"), Error);

  Episode misaligned = marked_episode(1.0, 4);
  misaligned.rewards.pop_back();
  CHECK_THROWS_WITH_AS(buf.add(misaligned), doctest::Contains("align"), Error);

  buf.add(marked_episode(1.0, 6));
  Rng rng(1);
  CHECK_THROWS_WITH_AS(buf.sample(0, 3, rng), doctest::Contains("[config]"), Error);
  CHECK_THROWS_WITH_AS(buf.sample(2, 0, rng), doctest::Contains("[config]"), Error);
}

TEST_CASE("episode_to_batch preserves rows in order") {
  Episode ep = marked_episode(5.0, 4);
  SequenceBatch batch = episode_to_batch(ep);
  REQUIRE(batch.length() == 4);
  REQUIRE(batch.batch() == 1);
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(batch.obs[t].data() == ep.obs[t]);
    CHECK(batch.actions[t].data() == ep.actions[t]);
    CHECK(batch.rewards[t].data()[0] == ep.rewards[t]);
  }
}

TEST_CASE("flat config parses files with comments and whitespace") {
  const std::string path = write_temp("parse.cfg",
                                      "# a comment line\n"
                                      "env = pointmass\n"
                                      "\n"
                                      "  steps=250   # trailing comment\n"
                                      "model_lr = 5e-4\n"
                                      "fixed_decoder = true\n");
  FlatConfig cfg = FlatConfig::from_file(path);
  CHECK(cfg.get_string("env") == "pointmass");
  CHECK(cfg.get_int("steps") == 250);
  CHECK(cfg.get_double("model_lr") == 5e-4);
  CHECK(cfg.get_bool("fixed_decoder"));
  CHECK(!cfg.has("missing"));
  CHECK(cfg.get_string("missing", "fallback") == "fallback");
  CHECK(cfg.get_int("missing", 7) == 7);
  std::remove(path.c_str());
}

TEST_CASE("flat config rejects malformed input") {
  const std::string path = write_temp("bad.cfg", "just a line without equals\n");
  CHECK_THROWS_WITH_AS(FlatConfig::from_file(path), doctest::Contains("key = value"), Error);
  std::remove(path.c_str());

  CHECK_THROWS_WITH_AS(FlatConfig::from_file("/nonexistent.cfg"), doctest::Contains("[io]"),
                       Error);

  FlatConfig cfg;
  cfg.set("steps", "12x");
  CHECK_THROWS_WITH_AS(cfg.get_int("steps"), doctest::Contains("integer"), Error);
  cfg.set("flag", "maybe");
  CHECK_THROWS_WITH_AS(cfg.get_bool("flag"), doctest::Contains("boolean"), Error);
  CHECK_THROWS_WITH_AS(cfg.get_string("nope"), doctest::Contains("missing required"), Error);
  CHECK_THROWS_WITH_AS(cfg.apply_override("novalue"), doctest::Contains("key=value"), Error);
}

TEST_CASE("overrides win over file values and serialization is sorted") {
  const std::string path = write_temp("ovr.cfg", "steps = 100\nenv = lingauss\n");
  FlatConfig cfg = FlatConfig::from_file(path);
  cfg.apply_override("steps=200");
  cfg.apply_override("seed=9");
  CHECK(cfg.get_int("steps") == 200);
  CHECK(cfg.get_int("seed") == 9);
  CHECK(cfg.serialize() == "env = lingauss\nseed = 9\nsteps = 200\n");

  // Round-trips through save/from_file.
  const std::string path2 = write_temp("ovr2.cfg", "");
  cfg.save(path2);
  FlatConfig back = FlatConfig::from_file(path2);
  CHECK(back.serialize() == cfg.serialize());
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("train settings resolve defaults and auto flags") {
  FlatConfig cfg;
  cfg.set("env", "lingauss");
  TrainSettings s = resolve_train_settings(cfg);
  CHECK(s.steps == 5000);
  CHECK(s.batch_size == 16);
  CHECK(s.mode == "flow");
  CHECK(s.use_flows);
  CHECK(s.n_replicas == 4);
  CHECK(!s.train_agent);      // auto: off except for the control task
  CHECK(!s.include_reward);   // follows train_agent
  CHECK(s.free_nats == 3.0);
  CHECK(s.resolved.get_string("train_agent") == "off");
  CHECK(s.resolved.get_string("include_reward") == "off");
  CHECK(s.resolved.has("gamma"));

  FlatConfig pm;
  pm.set("env", "pointmass");
  TrainSettings sp = resolve_train_settings(pm);
  CHECK(sp.train_agent);
  CHECK(sp.include_reward);
  CHECK(sp.resolved.get_string("train_agent") == "on");

  // Explicit values beat auto.
  pm.set("train_agent", "off");
  CHECK(!resolve_train_settings(pm).train_agent);
}

TEST_CASE("train settings derive the ablation modes") {
  FlatConfig cfg;
  cfg.set("mode", "gaussian");
  TrainSettings s = resolve_train_settings(cfg);
  CHECK(!s.use_flows);
  CHECK(s.n_replicas == 1);

  cfg.set("mode", "flow_n1");
  s = resolve_train_settings(cfg);
  CHECK(s.use_flows);
  CHECK(s.n_replicas == 1);

  cfg.set("mode", "gaussian_n4");
  s = resolve_train_settings(cfg);
  CHECK(!s.use_flows);
  CHECK(s.n_replicas == 4);

  cfg.set("mode", "vae");
  CHECK_THROWS_WITH_AS(resolve_train_settings(cfg), doctest::Contains("mode"), Error);
}

TEST_CASE("train settings reject unknown keys and invalid values") {
  FlatConfig cfg;
  cfg.set("enviroment", "lingauss");  // typo must not pass silently
  CHECK_THROWS_WITH_AS(resolve_train_settings(cfg), doctest::Contains("unknown key"), Error);

  FlatConfig bad;
  bad.set("env", "atari");
  CHECK_THROWS_WITH_AS(resolve_train_settings(bad), doctest::Contains("env"), Error);

  FlatConfig strokes;
  strokes.set("env", "strokes");
  CHECK_THROWS_WITH_AS(resolve_train_settings(strokes), doctest::Contains("strokes_path"), Error);

  FlatConfig neg;
  neg.set("steps", "-5");
  CHECK_THROWS_WITH_AS(resolve_train_settings(neg), doctest::Contains("positive"), Error);

  FlatConfig frac;
  frac.set("holdout_fraction", "1.5");
  CHECK_THROWS_WITH_AS(resolve_train_settings(frac), doctest::Contains("holdout_fraction"), Error);

  FlatConfig shortseq;
  shortseq.set("seq_len", "1");
  CHECK_THROWS_WITH_AS(resolve_train_settings(shortseq), doctest::Contains("seq_len"), Error);
}

TEST_CASE("model config derives from settings and data dimensions") {
  FlatConfig cfg;
  cfg.set("z_dim", "12");
  cfg.set("s_dim", "3");
  cfg.set("mode", "gaussian");
  TrainSettings s = resolve_train_settings(cfg);
  ModelConfig mc = model_config_from_settings(s, 7, 2);
  CHECK(mc.obs.dim == 7);
  CHECK(mc.action_dim == 2);
  CHECK(mc.z_dim == 12);
  CHECK(mc.s_dim == 3);
  CHECK(!mc.use_flows);

  FlatConfig img;
  img.set("obs_kind", "image");
  TrainSettings si = resolve_train_settings(img);
  ModelConfig mi = model_config_from_settings(si, 14 * 14, 1);
  CHECK(mi.obs.h == 14);
  CHECK(mi.obs.w == 14);
  CHECK_THROWS_WITH_AS(model_config_from_settings(si, 15, 1), doctest::Contains("square"),
                       Error);
}
