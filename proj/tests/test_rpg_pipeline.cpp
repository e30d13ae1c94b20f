#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "rpg/rpg_pipeline.hpp"

using namespace rpg;
using namespace rpg::pipeline;
namespace fs = std::filesystem;

namespace {

envs::EnvSpec Iterated(int rounds) {
  return envs::EnvSpec{envs::EnvKind::kIteratedStagHunt, 2, rounds};
}

ppo::PpoConfig SmallConfig(int horizon) {
  ppo::PpoConfig cfg;
  cfg.hidden = 8;
  cfg.parallel_threads = 8;
  cfg.episode_length = horizon;
  cfg.chunk_length = horizon;
  cfg.minibatch_chunks = 8;
  return cfg;
}

// A feedforward agent that plays `action` with probability ~1.
ppo::Agent Committed(const envs::EnvSpec& env, int action, uint64_t seed) {
  ppo::Agent a(ppo::ShapeFor(env), SmallConfig(env.episode_length), seed);
  a.params.Mat(a.params.FindSlice("pi/head/W")).setZero();
  auto b = a.params.Mat(a.params.FindSlice("pi/head/b"));
  b.setConstant(-60);
  b(action, 0) = 60;
  return a;
}

PopulationMember ScoredMember(int index, double score) {
  PopulationMember m;
  m.index = index;
  EvaluationResult r;
  r.score = score;
  m.evaluation = r;
  return m;
}

fs::path TempDir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rpg_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("explicit weight lists are returned verbatim") {
  WeightSpaceSpec spec;
  spec.weights = {{5, 1, -5}, {4, 2, -2}, {0, 5, 0}, {5, 0, 5}};
  spec.population_size = 4;
  spec.c_max = 5;
  const auto ws = sample_weights(spec, 123);
  REQUIRE(ws.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(ws[i].w() == spec.weights[i]);

  spec.population_size = 3;
  CHECK_THROWS_AS(sample_weights(spec, 0), std::invalid_argument);
  spec.population_size = 4;
  spec.c_max = 4;
  CHECK_THROWS_AS(sample_weights(spec, 0), std::invalid_argument);
}

TEST_CASE("uniform box samples respect c_max and the seed") {
  WeightSpaceSpec spec;
  spec.mode = WeightMode::kUniformBox;
  spec.low = {-5, -5, -5};
  spec.high = {5, 5, 5};
  spec.c_max = 5;
  spec.population_size = 500;
  const auto a = sample_weights(spec, 9);
  const auto b = sample_weights(spec, 9);
  const auto c = sample_weights(spec, 10);
  REQUIRE(a.size() == 500);
  double lo = 0, hi = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] == b[i]);
    for (double x : a[i].w()) {
      CHECK(std::abs(x) <= 5.0);
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  CHECK(lo < -4.9);
  CHECK(hi > 4.9);
  CHECK(a[0].w() != c[0].w());

  spec.population_size = 0;
  CHECK(sample_weights(spec, 0).empty());
  spec.high = {6, 5, 5};
  CHECK_THROWS_AS(sample_weights(spec, 0), std::invalid_argument);
}

TEST_CASE("always-Hare pair scores 10 on the original iterated game") {
  const auto env = Iterated(10);
  std::vector<ppo::Agent> pair{Committed(env, envs::kHare, 1), Committed(env, envs::kHare, 2)};
  const auto r = evaluate_pair(pair, env, envs::OriginalWeights(env.kind), EvaluationSpec{}, 4);
  CHECK(r.episodes == 100);
  CHECK(r.score == 10);
  CHECK(r.mean_returns[1] == 10);
  CHECK(r.std_returns[0] == 0);
  CHECK(r.mean_events[envs::events::kHareHare] == 10);
}

TEST_CASE("beta weights the two agents' returns") {
  const auto env = Iterated(10);
  // Stag versus Hare: agent 0 earns c = -50 per round, agent 1 earns b = 3.
  std::vector<ppo::Agent> pair{Committed(env, envs::kStag, 1), Committed(env, envs::kHare, 2)};
  const auto w = envs::OriginalWeights(env.kind);
  EvaluationSpec spec;
  spec.episodes = 10;
  CHECK(evaluate_pair(pair, env, w, spec, 0).score == -500);
  spec.beta = 0.0;
  CHECK(evaluate_pair(pair, env, w, spec, 0).score == 30);
  spec.beta = 0.25;
  CHECK(evaluate_pair(pair, env, w, spec, 0).score == doctest::Approx(0.25 * -500 + 0.75 * 30));
  spec.beta = 1.5;
  CHECK_THROWS_AS(evaluate_pair(pair, env, w, spec, 0), std::invalid_argument);
}

TEST_CASE("symmetric stochastic pair: beta = 0.5 matches either agent within CI") {
  const auto env = Iterated(10);
  ppo::Agent a(ppo::ShapeFor(env), SmallConfig(10), 5);
  std::vector<ppo::Agent> pair{a, a};
  EvaluationSpec spec;
  spec.episodes = 400;
  spec.beta = 0.5;
  const auto r = evaluate_pair(pair, env, envs::OriginalWeights(env.kind), spec, 11);
  const double se = std::max(r.std_returns[0], r.std_returns[1]) / std::sqrt(400.0);
  CHECK(std::abs(r.score - r.mean_returns[0]) < 3 * se);
  CHECK(std::abs(r.score - r.mean_returns[1]) < 3 * se);
}

TEST_CASE("evaluate_pair rejects agents built for another env") {
  const auto iter = Iterated(10);
  const envs::EnvSpec mh{envs::EnvKind::kMonsterHunt, 2, 50};
  std::vector<ppo::Agent> pair{Committed(iter, 0, 1), Committed(iter, 0, 2)};
  CHECK_THROWS_AS(evaluate_pair(pair, mh, envs::OriginalWeights(mh.kind), EvaluationSpec{}, 0),
                  std::invalid_argument);
  pair.pop_back();
  CHECK_THROWS_AS(evaluate_pair(pair, iter, envs::OriginalWeights(iter.kind), EvaluationSpec{}, 0),
                  std::invalid_argument);
}

TEST_CASE("select_best takes the argmax with ties to the lower index") {
  std::vector<PopulationMember> pop{ScoredMember(0, 75.5), ScoredMember(1, 56.7),
                                    ScoredMember(2, 221.5)};
  CHECK(select_best(pop) == 2);
  CHECK(select_best({ScoredMember(0, -3)}) == 0);
  CHECK(select_best({ScoredMember(0, 1), ScoredMember(1, 4), ScoredMember(2, 4)}) == 1);
  CHECK_THROWS_AS(select_best({}), std::invalid_argument);
  PopulationMember unscored;
  CHECK_THROWS_AS(select_best({unscored}), std::invalid_argument);
  PopulationMember failed = ScoredMember(0, 1000);
  failed.error = "boom";
  CHECK(select_best({failed, ScoredMember(1, 1)}) == 1);
}

TEST_CASE("select_best is invariant to population order up to ties") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<PopulationMember> pop;
    for (int i = 0; i < 6; ++i) pop.push_back(ScoredMember(i, rng.UniformInt(5)));
    const double best = pop[select_best(pop)].score();
    std::vector<int> perm{0, 1, 2, 3, 4, 5};
    for (int i = 5; i > 0; --i) std::swap(perm[i], perm[rng.UniformInt(i + 1)]);
    std::vector<PopulationMember> shuffled;
    for (int p : perm) shuffled.push_back(pop[p]);
    const int k = select_best(shuffled);
    CHECK(shuffled[k].score() == best);
    // Among tied maxima the earliest position wins.
    for (int j = 0; j < k; ++j) CHECK(shuffled[j].score() < best);
  }
}

TEST_CASE("train_population: determinism, accounting and per-member errors") {
  PopulationOptions opts;
  opts.env = Iterated(5);
  opts.cfg = SmallConfig(5);
  opts.member_env_steps = 8 * 5 * 3;
  opts.member_seeds = {7, 7, 8};
  opts.workers = 2;
  const envs::RewardWeights w({4, 3, -50, 1});
  auto pop = train_population({w, w, w}, opts);
  REQUIRE(pop.size() == 3);
  for (const auto& m : pop) REQUIRE(m.ok());
  CHECK(pop[0].agents[0].params.Hash() == pop[1].agents[0].params.Hash());
  CHECK(pop[0].agents[1].params.Hash() == pop[1].agents[1].params.Hash());
  CHECK(pop[0].agents[0].params.Hash() != pop[2].agents[0].params.Hash());
  CHECK(PopulationEnvSteps(pop) == 3 * opts.member_env_steps);
  CHECK(pop[0].rows.back().population_env_steps == 3 * opts.member_env_steps);

  // A weight vector of the wrong dimension fails only its own member.
  const envs::RewardWeights bad({1, 2});
  opts.member_seeds = {7, 7};
  pop = train_population({bad, w}, opts);
  CHECK_FALSE(pop[0].ok());
  CHECK(pop[0].agents.empty());
  CHECK(pop[1].ok());
  CHECK(pop[1].agents.size() == 2);
}

TEST_CASE("warm start leaves the policy bit-identical") {
  const auto env = Iterated(5);
  PopulationOptions opts;
  opts.env = env;
  opts.cfg = SmallConfig(5);
  opts.member_env_steps = 8 * 5 * 2;
  auto pop = train_population({envs::RewardWeights({4, 0, 0, 0})}, opts);
  PopulationMember& m = pop[0];
  const auto original = envs::OriginalWeights(env.kind);

  auto policy_hashes = [&] {
    std::vector<uint64_t> h;
    for (const auto& a : m.agents) h.push_back(a.params.Hash("pi/"));
    return h;
  };
  const auto before = policy_hashes();
  const uint64_t value_before = m.agents[0].params.Hash("v/");
  warm_start_critic(m, env, original, opts.cfg, 0, 1);
  CHECK(m.warm_started);
  CHECK(m.agents[0].params.Hash("v/") == value_before);

  warm_start_critic(m, env, original, opts.cfg, 8 * 5 * 4, 1);
  CHECK(policy_hashes() == before);
  CHECK(m.agents[0].params.Hash("v/") != value_before);
}

TEST_CASE("warm start lowers the value loss on a fixed buffer") {
  const auto env = Iterated(10);
  const auto original = envs::OriginalWeights(env.kind);
  ppo::PpoConfig cfg = SmallConfig(10);
  cfg.parallel_threads = 16;
  cfg.minibatch_chunks = 16;
  cfg.anneal_lr = false;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    PopulationMember m;
    for (int i = 0; i < 2; ++i) m.agents.emplace_back(ppo::ShapeFor(env), cfg, seed * 10 + i);

    std::vector<ppo::Agent> fixed = m.agents;
    ppo::Controllers who;
    who.learners = {&fixed[0], &fixed[1]};
    ppo::CollectOptions co;
    co.threads = 64;
    co.horizon = 10;
    co.reward_scale = cfg.reward_scale;
    ppo::Rollout ro = ppo::collect_rollouts(who, env, original, co, 1000 + seed);
    ppo::RolloutBuffer& buf = ro.buffers[0];
    // Monte Carlo targets, independent of the critic.
    ppo::compute_gae(buf, cfg.gamma, 1.0);
    auto value_loss = [&](const ppo::Agent& a) {
      std::vector<ppo::ChunkRef> chunks;
      for (int c = 0; c < buf.num_chunks() * buf.threads; ++c) chunks.push_back({&buf, c});
      return ppo::ppo_loss(a, chunks, cfg, false, true).stats.value_loss;
    };
    const double before = value_loss(m.agents[0]);
    warm_start_critic(m, env, original, cfg, 16 * 10 * 30, seed);
    const double after = value_loss(m.agents[0]);
    CHECK(after < before);
  }
}

TEST_CASE("fine_tune requires the warm start and a zero budget is verbatim") {
  const auto env = Iterated(5);
  PopulationMember m;
  ppo::PpoConfig cfg = SmallConfig(5);
  for (int i = 0; i < 2; ++i) m.agents.emplace_back(ppo::ShapeFor(env), cfg, i);
  const auto original = envs::OriginalWeights(env.kind);
  FineTuneOptions ft;
  ft.env_steps = 8 * 5;
  CHECK_THROWS_AS(fine_tune(m, env, original, cfg, ft), std::logic_error);

  ft.env_steps = 0;
  ft.skip_warm_start = true;
  auto r = fine_tune(m, env, original, cfg, ft);
  REQUIRE(r.agents.size() == 2);
  CHECK(r.agents[0].params.Hash() == m.agents[0].params.Hash());
  CHECK(r.rows.empty());

  warm_start_critic(m, env, original, cfg, 0, 0);
  ft.skip_warm_start = false;
  ft.env_steps = 8 * 5 * 2;
  ft.population_step_offset = 1000;
  r = fine_tune(m, env, original, cfg, ft);
  CHECK(r.rows.size() == 2);
  CHECK(r.rows.back().population_env_steps == 1000 + 80);
  CHECK(r.agents[0].params.Hash() != m.agents[0].params.Hash());
}

TEST_CASE("run directory round-trip through the population manifest") {
  const fs::path dir = TempDir("manifest");
  PopulationOptions opts;
  opts.env = Iterated(5);
  opts.cfg = SmallConfig(5);
  opts.member_env_steps = 8 * 5;
  opts.run_dir = dir.string();
  auto pop = train_population({envs::RewardWeights({4, 0, 0, 0}), envs::RewardWeights({4, 3, -50, 1})},
                              opts);
  evaluate_population(pop, opts.env, envs::OriginalWeights(opts.env.kind), EvaluationSpec{}, 3);
  WritePopulationManifest(pop, (dir / "population.json").string());
  CHECK(fs::exists(dir / "member_0" / "agent_0.ckpt"));
  CHECK(fs::exists(dir / "member_1" / "metrics.csv"));

  const auto loaded = LoadPopulation((dir / "population.json").string());
  REQUIRE(loaded.size() == 2);
  for (int i = 0; i < 2; ++i) {
    CHECK(loaded[i].w == pop[i].w);
    CHECK(loaded[i].seed == pop[i].seed);
    CHECK(loaded[i].score() == pop[i].score());
    CHECK(loaded[i].agents[1].params.Hash() == pop[i].agents[1].params.Hash());
  }
  CHECK(select_best(loaded) == select_best(pop));
  fs::remove_all(dir);
}
