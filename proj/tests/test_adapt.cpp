#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rpg/adapt.hpp"

using namespace rpg;
using namespace rpg::adapt;
namespace fs = std::filesystem;

namespace {

envs::EnvSpec Iterated() { return envs::EnvSpec{envs::EnvKind::kIteratedStagHunt, 2, 10}; }

ppo::PpoConfig SmallConfig() {
  ppo::PpoConfig cfg;
  cfg.hidden = 16;
  cfg.hidden_layers = 1;
  cfg.parallel_threads = 32;
  cfg.episode_length = 10;
  cfg.chunk_length = 10;
  cfg.minibatch_chunks = 32;
  return cfg;
}

// Column b of a 2 x B observation holds [own last, other last].
std::vector<int> ActAll(ppo::Opponent& o, const std::vector<std::pair<int, int>>& last,
                        std::vector<Rng>& rngs) {
  const int B = static_cast<int>(last.size());
  ppo::Matrix obs(2, B);
  std::vector<int> cols;
  for (int b = 0; b < B; ++b) {
    obs(0, b) = last[b].first;
    obs(1, b) = last[b].second;
    cols.push_back(b);
  }
  std::vector<int> actions(B, -1);
  o.Act(obs, cols, std::vector<uint8_t>(B, 0), rngs, actions);
  return actions;
}

ppo::Agent Committed(int action, uint64_t seed) {
  ppo::Agent a(ppo::ShapeFor(Iterated()), SmallConfig(), seed);
  a.params.Mat(a.params.FindSlice("pi/head/W")).setZero();
  auto b = a.params.Mat(a.params.FindSlice("pi/head/b"));
  b.setConstant(-60);
  b(action, 0) = 60;
  return a;
}

}  // namespace

TEST_CASE("tit-for-tat opens with Stag and mirrors the other player") {
  ScriptedOpponent tft(ScriptedKind::kTitForTat);
  std::vector<Rng> rngs(4);
  const auto a = ActAll(tft, {{-1, -1}, {0, 1}, {1, 0}, {1, 1}}, rngs);
  CHECK(a == std::vector<int>{envs::kStag, envs::kHare, envs::kStag, envs::kHare});
}

TEST_CASE("fixed scripted players and the random player") {
  std::vector<Rng> rngs;
  for (int b = 0; b < 10000; ++b) rngs.emplace_back(5, b);
  std::vector<std::pair<int, int>> last(10000, {0, 1});
  ScriptedOpponent stag(ScriptedKind::kStagAlways), hare(ScriptedKind::kHareAlways);
  for (int a : ActAll(stag, last, rngs)) CHECK(a == envs::kStag);
  for (int a : ActAll(hare, last, rngs)) CHECK(a == envs::kHare);
  ScriptedOpponent rnd(ScriptedKind::kRandomUniform);
  int stags = 0;
  for (int a : ActAll(rnd, last, rngs)) stags += a == envs::kStag;
  // 4 standard errors of a fair coin over 10000 draws.
  CHECK(std::abs(stags / 10000.0 - 0.5) < 4 * 0.005);
}

TEST_CASE("scripted opponents need the iterated game") {
  CHECK_THROWS_AS(make_scripted(ScriptedKind::kStagAlways, envs::EnvKind::kMonsterHunt),
                  std::invalid_argument);
  CHECK(make_scripted(ScriptedKind::kTitForTat, envs::EnvKind::kIteratedStagHunt)->label() ==
        "tft");
  CHECK(ParseScriptedKind("TitForTat") == ScriptedKind::kTitForTat);
  CHECK(ParseScriptedKind("stag") == ScriptedKind::kStagAlways);
  CHECK_THROWS_AS(ParseScriptedKind("grim"), std::invalid_argument);
}

TEST_CASE("opponent sampling is uniform") {
  ppo::OpponentSet set;
  for (int k = 0; k < 4; ++k) set.Add(std::make_shared<ScriptedOpponent>(ScriptedKind::kStagAlways));
  Rng rng(17);
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 10000; ++i) ++counts[set.Sample(rng)];
  const double sd = std::sqrt(10000 * 0.25 * 0.75);
  for (int c : counts) CHECK(std::abs(c - 2500) < 4 * sd);
}

TEST_CASE("adaptive training: frozen opponents, hidden identity, matching heads") {
  ppo::OpponentSet set;
  auto o0 = std::make_shared<ppo::FrozenPolicy>("stagger", Committed(envs::kStag, 1));
  ppo::Agent random_agent(ppo::ShapeFor(Iterated()), SmallConfig(), 3);
  auto o1 = std::make_shared<ppo::FrozenPolicy>("random", random_agent);
  set.Add(o0);
  set.Add(o1);
  set.Add(make_scripted(ScriptedKind::kTitForTat, envs::EnvKind::kIteratedStagHunt));
  const uint64_t h0 = o0->hash(), h1 = o1->hash();

  AdaptiveSpec spec;
  spec.env = Iterated();
  spec.weights = envs::OriginalWeights(spec.env.kind);
  spec.cfg = SmallConfig();
  spec.total_env_steps = 32 * 10 * 3;
  int64_t columns = 0, mismatched = 0;
  spec.on_rollout = [&](const ppo::Rollout& ro) {
    const ppo::RolloutBuffer& buf = ro.buffers[0];
    // The policy input is the plain game observation.
    CHECK(buf.obs.rows() == envs::ObsDim(spec.env));
    CHECK(buf.value_input.rows() == 2 * envs::ObsDim(spec.env) + 3);
    for (int c = 0; c < buf.steps * buf.threads; ++c) {
      ++columns;
      Eigen::Index id;
      buf.value_input.col(c).tail(3).maxCoeff(&id);
      if (buf.heads[c] != static_cast<int>(id)) ++mismatched;
    }
    CHECK(ro.buffers[1].steps == 0);
  };
  const AdaptiveResult r = train_adaptive(set, spec);
  CHECK(r.rows.size() == 3);
  CHECK(columns == 3 * 32 * 10);
  CHECK(mismatched == 0);
  CHECK(o0->hash() == h0);
  CHECK(o1->hash() == h1);
  CHECK(r.agent.recurrent());
  CHECK(r.agent.shape().value_heads == 3);
  int64_t eps = 0;
  for (int64_t e : r.opponent_episodes) eps += e;
  CHECK(eps == 3 * 32);

  ppo::OpponentSet empty;
  CHECK_THROWS_AS(train_adaptive(empty, spec), std::invalid_argument);
}

TEST_CASE("a single opponent reduces to best-response training") {
  ppo::OpponentSet set;
  set.Add(make_scripted(ScriptedKind::kStagAlways, envs::EnvKind::kIteratedStagHunt));
  AdaptiveSpec spec;
  spec.env = Iterated();
  spec.weights = envs::OriginalWeights(spec.env.kind);
  spec.cfg = SmallConfig();
  spec.cfg.parallel_threads = 64;
  spec.cfg.minibatch_chunks = 64;
  spec.total_env_steps = 64 * 10 * 150;
  const AdaptiveResult r = train_adaptive(set, spec);
  const auto stats =
      evaluate_adaptive(r.agent, {make_scripted(ScriptedKind::kStagAlways, spec.env.kind)},
                        spec.env, spec.weights, 200, 9);
  // Best response to an always-Stag player is Stag every round: 10 x a = 40.
  CHECK(stats[0].mean_returns[0] > 38.0);
  CHECK(stats[0].mean_stag > 9.5);
}

TEST_CASE("evaluate_adaptive counts the adaptive agent's actions") {
  const auto env = Iterated();
  const ppo::Agent hare = Committed(envs::kHare, 1);
  std::vector<std::shared_ptr<ppo::Opponent>> opps{
      make_scripted(ScriptedKind::kTitForTat, env.kind),
      make_scripted(ScriptedKind::kRandomUniform, env.kind)};
  const auto stats = evaluate_adaptive(hare, opps, env, envs::OriginalWeights(env.kind), 50, 2);
  REQUIRE(stats.size() == 2);
  CHECK(stats[0].label == "tft");
  CHECK(stats[0].mean_hare == 10);
  CHECK(stats[0].mean_stag == 0);
  // TFT: Stag in round 0 then Hare: b + 9 d = 3 + 9 for the hare player.
  CHECK(stats[0].mean_returns[0] == 12);
  CHECK(stats[0].mean_returns[1] == -50 + 9);
  CHECK(stats[1].mean_stag + stats[1].mean_hare == 10);
  CHECK(stats[1].episodes == 50);
}

TEST_CASE("opponent manifests and stats CSV") {
  const fs::path dir = fs::temp_directory_path() / "rpg_adapt_manifest";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Committed(envs::kStag, 1).ToCheckpoint().Save((dir / "s.ckpt").string());
  Committed(envs::kHare, 2).ToCheckpoint().Save((dir / "h.ckpt").string());
  WriteOpponentManifest({{"stagger", "s.ckpt"}, {"harer", (dir / "h.ckpt").string()}},
                        (dir / "opps.txt").string());
  const auto entries = ReadOpponentManifest((dir / "opps.txt").string());
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].label == "stagger");
  CHECK(entries[0].path == (dir / "s.ckpt").string());
  const auto opps = LoadOpponents(entries);
  CHECK(opps[1]->label() == "harer");

  const auto env = Iterated();
  const auto stats = evaluate_adaptive(Committed(envs::kStag, 5), opps, env,
                                       envs::OriginalWeights(env.kind), 10, 0);
  CHECK(stats[0].mean_returns[0] == 40);
  CHECK(stats[1].mean_returns[0] == -500);
  WriteOpponentStatsCsv(stats, (dir / "stats.csv").string());
  std::ifstream in(dir / "stats.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header.rfind("opponent,episodes,", 0) == 0);
  CHECK(row.rfind("stagger,10,40,", 0) == 0);
  fs::remove_all(dir);
}
