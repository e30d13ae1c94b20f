#include "rpg/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "rpg/parallel.hpp"
#include "rpg/rng.hpp"

namespace rpg::harness {

namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void CheckKeys(const json& j, std::initializer_list<const char*> allowed,
               const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) {
      throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
    }
  }
}

template <typename T>
void Get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

// Infinity has no JSON spelling; null stands for it.
json Finite(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }
double ReadMaybeInf(const json& j) { return j.is_null() ? kInf : j.get<double>(); }

json EnvToJson(const envs::EnvSpec& e) {
  return {{"kind", envs::EnvKindName(e.kind)},
          {"n_agents", e.n_agents},
          {"episode_length", e.episode_length}};
}

envs::EnvSpec EnvFromJson(const json& j) {
  CheckKeys(j, {"kind", "n_agents", "episode_length"}, "env");
  envs::EnvSpec e;
  if (j.contains("kind")) e.kind = envs::ParseEnvKind(j.at("kind").get<std::string>());
  Get(j, "n_agents", e.n_agents);
  Get(j, "episode_length", e.episode_length);
  return e;
}

json WeightSpaceToJson(const pipeline::WeightSpaceSpec& w) {
  return {{"mode", pipeline::WeightModeName(w.mode)},
          {"weights", w.weights},
          {"low", w.low},
          {"high", w.high},
          {"c_max", Finite(w.c_max)},
          {"population_size", w.population_size}};
}

pipeline::WeightSpaceSpec WeightSpaceFromJson(const json& j) {
  CheckKeys(j, {"mode", "weights", "low", "high", "c_max", "population_size"}, "weight_space");
  pipeline::WeightSpaceSpec w;
  if (j.contains("mode")) w.mode = pipeline::ParseWeightMode(j.at("mode").get<std::string>());
  Get(j, "weights", w.weights);
  Get(j, "low", w.low);
  Get(j, "high", w.high);
  if (j.contains("c_max")) w.c_max = ReadMaybeInf(j.at("c_max"));
  Get(j, "population_size", w.population_size);
  return w;
}

json AdaptToJson(const AdaptSettings& a) {
  return {{"opponent_weights", a.opponent_weights},
          {"opponents_manifest", a.opponents_manifest},
          {"opponent_env_steps", a.opponent_env_steps},
          {"env_steps", a.env_steps},
          {"scripted", a.scripted},
          {"holdout_manifest", a.holdout_manifest},
          {"holdout_weights", a.holdout_weights},
          {"episodes", a.episodes}};
}

AdaptSettings AdaptFromJson(const json& j) {
  CheckKeys(j,
            {"opponent_weights", "opponents_manifest", "opponent_env_steps", "env_steps",
             "scripted", "holdout_manifest", "holdout_weights", "episodes"},
            "adapt");
  AdaptSettings a;
  Get(j, "opponent_weights", a.opponent_weights);
  Get(j, "opponents_manifest", a.opponents_manifest);
  Get(j, "opponent_env_steps", a.opponent_env_steps);
  Get(j, "env_steps", a.env_steps);
  Get(j, "scripted", a.scripted);
  Get(j, "holdout_manifest", a.holdout_manifest);
  Get(j, "holdout_weights", a.holdout_weights);
  Get(j, "episodes", a.episodes);
  return a;
}

json MatrixToJson(const MatrixSettings& m) {
  return {{"a", m.a},
          {"b", m.b},
          {"d", m.d},
          {"cs", m.cs},
          {"trials", m.trials},
          {"theorem2_n", m.theorem2_n},
          {"theorem2_trials", m.theorem2_trials},
          {"dynamics",
           {{"learning_rate", m.dynamics.learning_rate},
            {"max_steps", m.dynamics.max_steps},
            {"convergence_tol", m.dynamics.convergence_tol}}}};
}

MatrixSettings MatrixFromJson(const json& j) {
  CheckKeys(j, {"a", "b", "d", "cs", "trials", "theorem2_n", "theorem2_trials", "dynamics"},
            "matrix");
  MatrixSettings m;
  Get(j, "a", m.a);
  Get(j, "b", m.b);
  Get(j, "d", m.d);
  Get(j, "cs", m.cs);
  Get(j, "trials", m.trials);
  Get(j, "theorem2_n", m.theorem2_n);
  Get(j, "theorem2_trials", m.theorem2_trials);
  if (j.contains("dynamics")) {
    const json& d = j.at("dynamics");
    CheckKeys(d, {"learning_rate", "max_steps", "convergence_tol"}, "matrix.dynamics");
    Get(d, "learning_rate", m.dynamics.learning_rate);
    Get(d, "max_steps", m.dynamics.max_steps);
    Get(d, "convergence_tol", m.dynamics.convergence_tol);
  }
  return m;
}

json EvaluationToJson(const pipeline::EvaluationResult& e) {
  json j;
  j["score"] = e.score;
  j["episodes"] = e.episodes;
  j["mean_returns"] = e.mean_returns;
  j["std_returns"] = e.std_returns;
  json ev = json::object();
  for (size_t k = 0; k < e.event_names.size(); ++k) {
    ev[e.event_names[k]] = {{"mean", e.mean_events[k]}, {"std", e.std_events[k]}};
  }
  j["events"] = ev;
  return j;
}

std::string FormatWeights(const std::vector<double>& w) {
  std::ostringstream out;
  out << "w=[";
  for (size_t i = 0; i < w.size(); ++i) out << (i ? "," : "") << w[i];
  out << "]";
  return out.str();
}

}  // namespace

// --- config -----------------------------------------------------------------------

std::string AlgorithmName(Algorithm a) {
  switch (a) {
    case Algorithm::kPg: return "pg";
    case Algorithm::kPgShared: return "pg_shared";
    case Algorithm::kPgCount: return "pg_count";
    case Algorithm::kPbt: return "pbt";
    case Algorithm::kRpg: return "rpg";
    case Algorithm::kAdapt: return "adapt";
    case Algorithm::kVerifyMatrix: return "verify_matrix";
  }
  return "pg";
}

Algorithm ParseAlgorithm(std::string_view name) {
  for (Algorithm a : {Algorithm::kPg, Algorithm::kPgShared, Algorithm::kPgCount, Algorithm::kPbt,
                      Algorithm::kRpg, Algorithm::kAdapt, Algorithm::kVerifyMatrix}) {
    if (AlgorithmName(a) == name) return a;
  }
  throw std::invalid_argument("unknown algorithm '" + std::string(name) + "'");
}

envs::RewardWeights ExperimentConfig::OriginalWeights() const {
  if (original_weights.empty()) return envs::OriginalWeights(env.kind);
  return envs::RewardWeights(original_weights);
}

void ExperimentConfig::Validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (schema_version != kConfigSchemaVersion) fail("unsupported schema_version");
  if (seeds.empty()) fail("seeds must not be empty");
  if (algorithm == Algorithm::kVerifyMatrix) {
    if (matrix.trials < 1 || matrix.theorem2_trials < 1) fail("matrix trials must be >= 1");
    matrix.dynamics.Validate();
    return;
  }
  if (env.n_agents < 2) fail("env.n_agents must be >= 2");
  if (env.kind != envs::EnvKind::kMonsterHunt && env.n_agents != 2) {
    fail("only Monster-Hunt supports more than two agents");
  }
  if (env.episode_length < 1) fail("env.episode_length must be >= 1");
  if (static_cast<int>(OriginalWeights().size()) != envs::FeatureDim(env.kind)) {
    fail("original_weights must have one entry per feature");
  }
  ppo.Validate();
  if (ppo.episode_length != env.episode_length) fail("ppo.episode_length must match env");
  evaluation.Validate();
  if (record_episodes < 0 || record_episodes > evaluation.episodes) {
    fail("record_episodes must lie in [0, evaluation.episodes]");
  }
  switch (algorithm) {
    case Algorithm::kPg:
    case Algorithm::kPgShared:
    case Algorithm::kPgCount:
      if (total_env_steps <= 0) fail("total_env_steps must be > 0");
      if (algorithm == Algorithm::kPgCount && !(ppo.count_bonus_alpha > 0.0)) {
        fail("pg_count needs ppo.count_bonus_alpha > 0");
      }
      if (algorithm == Algorithm::kPgShared && !(prosociality >= 0.0 && prosociality <= 1.0)) {
        fail("prosociality must lie in [0, 1]");
      }
      break;
    case Algorithm::kPbt:
      if (total_env_steps <= 0) fail("total_env_steps must be > 0");
      if (pbt_population < 1) fail("pbt_population must be >= 1");
      break;
    case Algorithm::kRpg:
      if (total_env_steps <= 0) fail("total_env_steps must be > 0");
      if (fine_tune_env_steps < 0) fail("fine_tune_env_steps must be >= 0");
      if (warm_start_env_steps < -1) fail("warm_start_env_steps must be >= -1");
      weight_space.Validate();
      for (const auto& w : weight_space.weights) {
        if (static_cast<int>(w.size()) != envs::FeatureDim(env.kind)) {
          fail("weight_space entries must have one entry per feature");
        }
      }
      if (weight_space.mode == pipeline::WeightMode::kUniformBox &&
          static_cast<int>(weight_space.low.size()) != envs::FeatureDim(env.kind)) {
        fail("weight_space bounds must have one entry per feature");
      }
      break;
    case Algorithm::kAdapt:
      if (env.n_agents != 2) fail("adapt needs a two-agent game");
      if (adapt.opponents_manifest.empty() && adapt.opponent_weights.empty()) {
        fail("adapt needs opponent_weights or opponents_manifest");
      }
      if (!adapt.opponent_weights.empty() && adapt.opponent_env_steps <= 0) {
        fail("adapt.opponent_env_steps must be > 0");
      }
      if (!adapt.holdout_weights.empty() && adapt.opponent_env_steps <= 0) {
        fail("adapt.opponent_env_steps must be > 0");
      }
      if (adapt.env_steps <= 0) fail("adapt.env_steps must be > 0");
      if (adapt.episodes < 1) fail("adapt.episodes must be >= 1");
      for (const auto& s : adapt.scripted) adapt::ParseScriptedKind(s);
      if (!adapt.scripted.empty() && env.kind != envs::EnvKind::kIteratedStagHunt) {
        fail("scripted opponents need the iterated game");
      }
      break;
    case Algorithm::kVerifyMatrix:
      break;
  }
}

json PpoToJson(const ppo::PpoConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"anneal_lr", c.anneal_lr},
          {"adam_epsilon", c.adam_epsilon},
          {"gamma", c.gamma},
          {"gae_lambda", c.gae_lambda},
          {"clip", c.clip},
          {"value_loss_coeff", c.value_loss_coeff},
          {"entropy_coeff", c.entropy_coeff},
          {"grad_clip", c.grad_clip},
          {"ppo_epochs", c.ppo_epochs},
          {"minibatch_chunks", c.minibatch_chunks},
          {"parallel_threads", c.parallel_threads},
          {"reward_scale", c.reward_scale},
          {"episode_length", c.episode_length},
          {"chunk_length", c.chunk_length},
          {"buffer_reuse", c.buffer_reuse},
          {"normalize_advantages", c.normalize_advantages},
          {"count_bonus_alpha", c.count_bonus_alpha},
          {"shared_parameters", c.shared_parameters},
          {"recurrent", c.recurrent},
          {"hidden", c.hidden},
          {"hidden_layers", c.hidden_layers},
          {"activation", nn::ActivationName(c.activation)},
          {"input_scale", c.input_scale},
          {"policy_output_gain", c.policy_output_gain},
          {"uniform_initial_policy", c.uniform_initial_policy}};
}

ppo::PpoConfig PpoFromJson(const json& j, ppo::PpoConfig c) {
  CheckKeys(j,
            {"learning_rate", "anneal_lr", "adam_epsilon", "gamma", "gae_lambda", "clip",
             "value_loss_coeff", "entropy_coeff", "grad_clip", "ppo_epochs", "minibatch_chunks",
             "parallel_threads", "reward_scale", "episode_length", "chunk_length", "buffer_reuse",
             "normalize_advantages", "count_bonus_alpha", "shared_parameters", "recurrent",
             "hidden", "hidden_layers", "activation", "input_scale", "policy_output_gain",
             "uniform_initial_policy"},
            "ppo");
  Get(j, "learning_rate", c.learning_rate);
  Get(j, "anneal_lr", c.anneal_lr);
  Get(j, "adam_epsilon", c.adam_epsilon);
  Get(j, "gamma", c.gamma);
  Get(j, "gae_lambda", c.gae_lambda);
  Get(j, "clip", c.clip);
  Get(j, "value_loss_coeff", c.value_loss_coeff);
  Get(j, "entropy_coeff", c.entropy_coeff);
  Get(j, "grad_clip", c.grad_clip);
  Get(j, "ppo_epochs", c.ppo_epochs);
  Get(j, "minibatch_chunks", c.minibatch_chunks);
  Get(j, "parallel_threads", c.parallel_threads);
  Get(j, "reward_scale", c.reward_scale);
  Get(j, "episode_length", c.episode_length);
  Get(j, "chunk_length", c.chunk_length);
  Get(j, "buffer_reuse", c.buffer_reuse);
  Get(j, "normalize_advantages", c.normalize_advantages);
  Get(j, "count_bonus_alpha", c.count_bonus_alpha);
  Get(j, "shared_parameters", c.shared_parameters);
  Get(j, "recurrent", c.recurrent);
  Get(j, "hidden", c.hidden);
  Get(j, "hidden_layers", c.hidden_layers);
  if (j.contains("activation")) c.activation = nn::ParseActivation(j.at("activation").get<std::string>());
  Get(j, "input_scale", c.input_scale);
  Get(j, "policy_output_gain", c.policy_output_gain);
  Get(j, "uniform_initial_policy", c.uniform_initial_policy);
  return c;
}

json ToJson(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["name"] = c.name;
  j["algorithm"] = AlgorithmName(c.algorithm);
  j["env"] = EnvToJson(c.env);
  j["original_weights"] = c.original_weights;
  j["ppo"] = PpoToJson(c.ppo);
  j["weight_space"] = WeightSpaceToJson(c.weight_space);
  j["seeds"] = c.seeds;
  j["total_env_steps"] = c.total_env_steps;
  j["fine_tune_env_steps"] = c.fine_tune_env_steps;
  j["warm_start_env_steps"] = c.warm_start_env_steps;
  j["prosociality"] = c.prosociality;
  j["pbt_population"] = c.pbt_population;
  j["evaluation"] = {{"beta", c.evaluation.beta}, {"episodes", c.evaluation.episodes}};
  j["record_episodes"] = c.record_episodes;
  j["adapt"] = AdaptToJson(c.adapt);
  j["matrix"] = MatrixToJson(c.matrix);
  j["output_dir"] = c.output_dir;
  j["scale"] = c.scale;
  return j;
}

ExperimentConfig FromJson(const json& j) {
  CheckKeys(j,
            {"schema_version", "name", "algorithm", "env", "original_weights", "ppo",
             "weight_space", "seeds", "total_env_steps", "fine_tune_env_steps",
             "warm_start_env_steps", "prosociality", "pbt_population", "evaluation",
             "record_episodes", "adapt", "matrix", "output_dir", "scale"},
            "config");
  if (!j.contains("schema_version")) throw std::invalid_argument("config: missing schema_version");
  ExperimentConfig c;
  c.schema_version = j.at("schema_version").get<int>();
  if (c.schema_version != kConfigSchemaVersion) {
    throw std::invalid_argument("config: unsupported schema_version " +
                                std::to_string(c.schema_version));
  }
  Get(j, "name", c.name);
  if (j.contains("algorithm")) c.algorithm = ParseAlgorithm(j.at("algorithm").get<std::string>());
  if (j.contains("env")) c.env = EnvFromJson(j.at("env"));
  Get(j, "original_weights", c.original_weights);
  if (j.contains("ppo")) c.ppo = PpoFromJson(j.at("ppo"));
  if (j.contains("weight_space")) c.weight_space = WeightSpaceFromJson(j.at("weight_space"));
  Get(j, "seeds", c.seeds);
  Get(j, "total_env_steps", c.total_env_steps);
  Get(j, "fine_tune_env_steps", c.fine_tune_env_steps);
  Get(j, "warm_start_env_steps", c.warm_start_env_steps);
  Get(j, "prosociality", c.prosociality);
  Get(j, "pbt_population", c.pbt_population);
  if (j.contains("evaluation")) {
    const json& e = j.at("evaluation");
    CheckKeys(e, {"beta", "episodes"}, "evaluation");
    Get(e, "beta", c.evaluation.beta);
    Get(e, "episodes", c.evaluation.episodes);
  }
  Get(j, "record_episodes", c.record_episodes);
  if (j.contains("adapt")) c.adapt = AdaptFromJson(j.at("adapt"));
  if (j.contains("matrix")) c.matrix = MatrixFromJson(j.at("matrix"));
  Get(j, "output_dir", c.output_dir);
  Get(j, "scale", c.scale);
  return c;
}

ExperimentConfig LoadConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
  return FromJson(j);
}

void SaveConfig(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << ToJson(cfg).dump(2) << '\n';
}

// --- presets ------------------------------------------------------------------------

namespace {

ppo::PpoConfig GridPpo(int threads, bool recurrent) {
  ppo::PpoConfig c;
  c.parallel_threads = threads;
  c.episode_length = 50;
  c.chunk_length = 10;
  // Four minibatches per epoch, as with 320 chunks out of 256 threads.
  c.minibatch_chunks = threads * 5 / 4;
  c.input_scale = 0.25;
  c.recurrent = recurrent;
  return c;
}

ppo::PpoConfig IteratedPpo(int threads) {
  ppo::PpoConfig c;
  c.parallel_threads = threads;
  c.episode_length = 10;
  c.chunk_length = 10;
  c.minibatch_chunks = threads / 2;
  return c;
}

int64_t Scaled(double steps, double scale) {
  return std::max<int64_t>(1, static_cast<int64_t>(std::llround(steps * scale)));
}

}  // namespace

std::vector<std::string> PresetNames() {
  return {"fig2",
          "fig2-ppo",
          "monster-hunt",
          "escalation",
          "iterated",
          "adapt",
          "monster-hunt-pg",
          "monster-hunt-shared",
          "monster-hunt-count",
          "monster-hunt-pbt",
          "escalation-pg",
          "iterated-pg"};
}

ExperimentConfig MakePreset(const std::string& name, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("scale must be > 0");
  ExperimentConfig c;
  c.name = name;
  c.scale = scale;
  const envs::EnvSpec monster{envs::EnvKind::kMonsterHunt, 2, 50};
  const envs::EnvSpec escalation{envs::EnvKind::kEscalation, 2, 50};
  const envs::EnvSpec iterated{envs::EnvKind::kIteratedStagHunt, 2, 10};
  // Monster-Hunt: 1.75M steps per RR member, 14M fine-tune, and the
  // baselines get the whole RPG budget.
  const double mh_member = 1.75e6, mh_fine = 14e6, mh_total = 4 * mh_member + mh_fine;
  const double esc_member = 4e6;
  const double it_member = 1.6e6;

  if (name == "fig2") {
    c.algorithm = Algorithm::kVerifyMatrix;
    c.seeds = {0};
    return c;
  }
  if (name == "fig2-ppo") {
    c.algorithm = Algorithm::kPg;
    c.env = envs::EnvSpec{envs::EnvKind::kIteratedStagHunt, 2, 1};
    c.original_weights = {4, 3, -5, 1};
    c.ppo = IteratedPpo(64);
    c.ppo.episode_length = 1;
    c.ppo.chunk_length = 1;
    c.ppo.minibatch_chunks = 64;
    c.ppo.uniform_initial_policy = true;
    c.ppo.entropy_coeff = 0.0;
    c.total_env_steps = Scaled(64 * 1000 * 10, scale);
    c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    c.record_episodes = 0;
    return c;
  }
  if (name.rfind("monster-hunt", 0) == 0) {
    c.env = monster;
    c.ppo = GridPpo(64, false);
    c.seeds = {0, 1, 2};
    c.total_env_steps = Scaled(mh_total, scale);
    if (name == "monster-hunt") {
      c.algorithm = Algorithm::kRpg;
      c.weight_space.weights = {{5, 1, -5}, {4, 2, -2}, {0, 5, 0}, {5, 0, 5}};
      c.weight_space.population_size = 4;
      c.weight_space.c_max = 5;
      c.total_env_steps = Scaled(mh_member, scale);
      c.fine_tune_env_steps = Scaled(mh_fine, scale);
      return c;
    }
    if (name == "monster-hunt-pg") {
      c.algorithm = Algorithm::kPg;
      return c;
    }
    if (name == "monster-hunt-shared") {
      c.algorithm = Algorithm::kPgShared;
      c.prosociality = 1.0;
      return c;
    }
    if (name == "monster-hunt-count") {
      c.algorithm = Algorithm::kPgCount;
      c.ppo.count_bonus_alpha = 0.3;
      return c;
    }
    if (name == "monster-hunt-pbt") {
      c.algorithm = Algorithm::kPbt;
      c.pbt_population = 4;
      c.total_env_steps = Scaled(mh_total / 4, scale);
      return c;
    }
  }
  if (name == "escalation" || name == "escalation-pg") {
    c.env = escalation;
    // The GRU policy stalls at short streaks within these budgets.
    c.ppo = GridPpo(64, false);
    c.seeds = {0, 1, 2};
    if (name == "escalation") {
      c.algorithm = Algorithm::kRpg;
      c.weight_space.weights = {{1, 0}, {1, -0.3}, {1, -0.6}, {1, -0.9}};
      c.weight_space.population_size = 4;
      c.weight_space.c_max = 5;
      c.total_env_steps = Scaled(esc_member, scale);
      c.fine_tune_env_steps = 0;
    } else {
      c.algorithm = Algorithm::kPg;
      c.total_env_steps = Scaled(4 * esc_member, scale);
    }
    return c;
  }
  if (name == "iterated" || name == "iterated-pg") {
    c.env = iterated;
    c.ppo = IteratedPpo(64);
    c.seeds = {0, 1, 2};
    if (name == "iterated") {
      c.algorithm = Algorithm::kRpg;
      c.weight_space.weights = {{4, 0, 0, 0}, {0, 0, 0, 4}, {0, 4, 4, 0}, {4, 1, 4, 0}};
      c.weight_space.population_size = 4;
      c.weight_space.c_max = 4;
      c.total_env_steps = Scaled(it_member, scale);
      c.fine_tune_env_steps = Scaled(it_member, scale);
    } else {
      c.algorithm = Algorithm::kPg;
      c.total_env_steps = Scaled(5 * it_member, scale);
    }
    return c;
  }
  if (name == "adapt") {
    c.algorithm = Algorithm::kAdapt;
    c.env = iterated;
    c.ppo = IteratedPpo(64);
    c.ppo.recurrent = true;
    c.seeds = {0};
    c.adapt.opponent_weights = {{4, 0, 0, 0}, {0, 0, 0, 4}, {0, 4, 4, 0}, {4, 1, 4, 0}};
    c.adapt.opponent_env_steps = Scaled(it_member, scale);
    c.adapt.env_steps = Scaled(4 * it_member, scale);
    c.adapt.scripted = {"stag", "hare", "tft", "random"};
    c.total_env_steps = c.adapt.env_steps;
    return c;
  }
  throw std::invalid_argument("unknown preset '" + name + "'");
}

// --- trajectories ---------------------------------------------------------------------

namespace {

void WriteSnapshot(std::ostream& out, const envs::Snapshot& s) {
  out << "agents " << s.agents.size();
  for (const auto& p : s.agents) out << ' ' << p.row << ' ' << p.col;
  out << " monster " << s.monster.row << ' ' << s.monster.col << " apples " << s.apples[0].row
      << ' ' << s.apples[0].col << ' ' << s.apples[1].row << ' ' << s.apples[1].col << " lit "
      << s.lit.row << ' ' << s.lit.col << " streak " << s.streak << " round " << s.round
      << " last " << s.last_actions[0] << ' ' << s.last_actions[1];
}

void Expect(std::istream& in, const std::string& word) {
  std::string got;
  if (!(in >> got) || got != word) {
    throw std::runtime_error("trajectory file: expected '" + word + "', got '" + got + "'");
  }
}

template <typename T>
T ReadValue(std::istream& in) {
  T v;
  if (!(in >> v)) throw std::runtime_error("trajectory file: truncated");
  return v;
}

envs::Snapshot ReadSnapshot(std::istream& in) {
  envs::Snapshot s;
  Expect(in, "agents");
  const int n = ReadValue<int>(in);
  if (n < 0 || n > 64) throw std::runtime_error("trajectory file: bad agent count");
  s.agents.resize(n);
  for (auto& p : s.agents) {
    p.row = ReadValue<int>(in);
    p.col = ReadValue<int>(in);
  }
  Expect(in, "monster");
  s.monster.row = ReadValue<int>(in);
  s.monster.col = ReadValue<int>(in);
  Expect(in, "apples");
  for (auto& a : s.apples) {
    a.row = ReadValue<int>(in);
    a.col = ReadValue<int>(in);
  }
  Expect(in, "lit");
  s.lit.row = ReadValue<int>(in);
  s.lit.col = ReadValue<int>(in);
  Expect(in, "streak");
  s.streak = ReadValue<int>(in);
  Expect(in, "round");
  s.round = ReadValue<int>(in);
  Expect(in, "last");
  s.last_actions[0] = ReadValue<int>(in);
  s.last_actions[1] = ReadValue<int>(in);
  return s;
}

void WriteNumbers(std::ostream& out, const std::vector<double>& xs) {
  char buf[32];
  for (double x : xs) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    out << ' ' << buf;
  }
}

std::vector<double> ReadNumbers(std::istream& in, int n) {
  std::vector<double> xs(n);
  for (auto& x : xs) x = ReadValue<double>(in);
  return xs;
}

}  // namespace

void WriteTrajectories(const TrajectoryFile& file, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const int fdim = envs::FeatureDim(file.kind);
  const int nev = static_cast<int>(envs::EventCounters::Vocabulary(file.kind).size());
  out << "rpg-trajectory " << kTrajectorySchemaVersion << '\n';
  out << "kind " << envs::EnvKindName(file.kind) << '\n';
  out << "agents " << file.n_agents << " features " << fdim << " events " << nev << '\n';
  out << "episodes " << file.episodes.size() << '\n';
  for (size_t e = 0; e < file.episodes.size(); ++e) {
    const ppo::Trajectory& t = file.episodes[e];
    out << "episode " << e << " thread " << t.thread << " frames " << t.frames.size() << '\n';
    out << "returns";
    WriteNumbers(out, t.returns);
    out << "\nevents";
    WriteNumbers(out, t.events);
    out << "\ninit ";
    WriteSnapshot(out, t.initial);
    out << '\n';
    for (const ppo::Frame& f : t.frames) {
      out << "step actions";
      for (int a : f.actions) out << ' ' << a;
      out << " rewards";
      WriteNumbers(out, f.rewards);
      out << " features";
      for (const auto& phi : f.features) WriteNumbers(out, phi);
      out << ' ';
      WriteSnapshot(out, f.snapshot);
      out << '\n';
    }
  }
}

TrajectoryFile ReadTrajectories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("no trajectory file at " + path);
  Expect(in, "rpg-trajectory");
  if (ReadValue<int>(in) != kTrajectorySchemaVersion) {
    throw std::runtime_error("trajectory file: unsupported schema version");
  }
  TrajectoryFile file;
  Expect(in, "kind");
  file.kind = envs::ParseEnvKind(ReadValue<std::string>(in));
  Expect(in, "agents");
  file.n_agents = ReadValue<int>(in);
  Expect(in, "features");
  const int fdim = ReadValue<int>(in);
  Expect(in, "events");
  const int nev = ReadValue<int>(in);
  Expect(in, "episodes");
  const size_t count = ReadValue<size_t>(in);
  const int n = file.n_agents;
  for (size_t e = 0; e < count; ++e) {
    ppo::Trajectory t;
    Expect(in, "episode");
    ReadValue<size_t>(in);
    Expect(in, "thread");
    t.thread = ReadValue<int>(in);
    Expect(in, "frames");
    const size_t frames = ReadValue<size_t>(in);
    Expect(in, "returns");
    t.returns = ReadNumbers(in, n);
    Expect(in, "events");
    t.events = ReadNumbers(in, nev);
    Expect(in, "init");
    t.initial = ReadSnapshot(in);
    for (size_t k = 0; k < frames; ++k) {
      ppo::Frame f;
      Expect(in, "step");
      Expect(in, "actions");
      for (int i = 0; i < n; ++i) f.actions.push_back(ReadValue<int>(in));
      Expect(in, "rewards");
      f.rewards = ReadNumbers(in, n);
      Expect(in, "features");
      for (int i = 0; i < n; ++i) f.features.push_back(ReadNumbers(in, fdim));
      f.snapshot = ReadSnapshot(in);
      t.frames.push_back(std::move(f));
    }
    file.episodes.push_back(std::move(t));
  }
  return file;
}

std::vector<double> RecountEvents(envs::EnvKind kind, const ppo::Trajectory& t) {
  std::vector<double> ev(envs::EventCounters::Vocabulary(kind).size(), 0.0);
  switch (kind) {
    case envs::EnvKind::kIteratedStagHunt:
      for (const auto& f : t.frames) ev[f.actions[0] * 2 + f.actions[1]] += 1;
      break;
    case envs::EnvKind::kMonsterHunt:
      for (const auto& f : t.frames) {
        bool coop = false, single = false;
        for (const auto& phi : f.features) {
          coop = coop || phi[0] > 0;
          single = single || phi[2] > 0;
          ev[envs::events::kApple] += phi[1];
        }
        ev[envs::events::kCoopHunt] += coop;
        ev[envs::events::kSingleHunt] += single;
      }
      break;
    case envs::EnvKind::kEscalation: {
      int prev = t.initial.streak;
      for (const auto& f : t.frames) {
        const bool coop = f.features[0][0] > 0;
        const bool betrayal = f.features[0][1] > 0 || f.features[1][1] > 0;
        if (coop) ev[envs::events::kCoopStep] += 1;
        if (betrayal) ev[envs::events::kBetrayal] += 1;
        if (!coop && !betrayal && prev > 0) ev[envs::events::kJointLeave] += 1;
        ev[envs::events::kMaxStreak] =
            std::max<double>(ev[envs::events::kMaxStreak], f.snapshot.streak);
        prev = f.snapshot.streak;
      }
      break;
    }
  }
  return ev;
}

std::string Replay(const TrajectoryFile& file, int episode) {
  if (episode < 0 || episode >= static_cast<int>(file.episodes.size())) {
    throw std::out_of_range("no recorded episode " + std::to_string(episode));
  }
  const ppo::Trajectory& t = file.episodes[episode];
  std::ostringstream out;
  char buf[64];
  out << "episode " << episode << " (" << envs::EnvKindName(file.kind) << ", "
      << t.frames.size() << " steps)\nreturns";
  for (double r : t.returns) {
    std::snprintf(buf, sizeof buf, " %g", r);
    out << buf;
  }
  out << "\n\nstep 0\n" << envs::Render(file.kind, t.initial);
  for (size_t k = 0; k < t.frames.size(); ++k) {
    const ppo::Frame& f = t.frames[k];
    out << "\nstep " << k + 1 << "  actions";
    for (int a : f.actions) out << ' ' << a;
    out << "  rewards";
    for (double r : f.rewards) {
      std::snprintf(buf, sizeof buf, " %g", r);
      out << buf;
    }
    out << '\n' << envs::Render(file.kind, f.snapshot);
  }
  return out.str();
}

std::string ReplayPath(const std::string& path, int episode) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= "trajectories.txt";
  return Replay(ReadTrajectories(p.string()), episode);
}

pipeline::EvaluationResult EvaluateAndRecord(const std::vector<ppo::Agent>& agents,
                                             const envs::EnvSpec& env,
                                             const envs::RewardWeights& w,
                                             const pipeline::EvaluationSpec& spec,
                                             uint64_t seed, int keep, TrajectoryFile* out) {
  spec.Validate();
  pipeline::CheckAgentsFit(agents, env);
  std::vector<ppo::Agent> copies = agents;
  ppo::Controllers who;
  for (auto& a : copies) who.learners.push_back(&a);
  ppo::CollectOptions opts;
  opts.threads = spec.episodes;
  opts.horizon = env.episode_length;
  opts.auto_reset = false;
  opts.record = false;
  opts.keep_trajectories = keep > 0 && out != nullptr;
  ppo::Rollout ro = ppo::collect_rollouts(who, env, w, opts, seed);
  if (out) {
    out->kind = env.kind;
    out->n_agents = env.n_agents;
    out->episodes.clear();
    std::sort(ro.trajectories.begin(), ro.trajectories.end(),
              [](const ppo::Trajectory& a, const ppo::Trajectory& b) { return a.thread < b.thread; });
    for (int k = 0; k < keep && k < static_cast<int>(ro.trajectories.size()); ++k) {
      out->episodes.push_back(std::move(ro.trajectories[k]));
    }
  }
  return pipeline::SummarizeEvaluation(ro.stats, env, spec.beta);
}

// --- runs -----------------------------------------------------------------------------

bool RunSummary::ok() const {
  for (const auto& s : seeds) {
    if (!s.error.empty()) return false;
    for (const auto& b : s.bound_reports) {
      if (!b.passed) return false;
    }
  }
  return true;
}

double RunSummary::MeanScore() const {
  double sum = 0.0;
  int n = 0;
  for (const auto& s : seeds) {
    if (s.evaluation) {
      sum += s.evaluation->score;
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

json SummaryToJson(const RunSummary& s) {
  json j;
  j["dir"] = s.dir;
  j["ok"] = s.ok();
  const double mean = s.MeanScore();
  j["mean_score"] = std::isfinite(mean) ? json(mean) : json(nullptr);
  json seeds = json::array();
  for (const auto& r : s.seeds) {
    json e;
    e["seed"] = r.seed;
    e["dir"] = r.dir;
    e["env_steps"] = r.env_steps;
    e["selected_member"] = r.selected_member;
    e["evaluation"] = r.evaluation ? EvaluationToJson(*r.evaluation) : json(nullptr);
    json opp = json::array();
    for (const auto& o : r.opponent_stats) {
      opp.push_back({{"label", o.label},
                     {"episodes", o.episodes},
                     {"mean_returns", o.mean_returns},
                     {"mean_stag", o.mean_stag},
                     {"mean_hare", o.mean_hare},
                     {"event_names", o.event_names},
                     {"mean_events", o.mean_events}});
    }
    e["opponents"] = opp;
    json bounds = json::array();
    for (const auto& b : r.bound_reports) bounds.push_back(json::parse(b.ToJson()));
    e["bounds"] = bounds;
    e["error"] = r.error;
    seeds.push_back(e);
  }
  j["seeds"] = seeds;
  return j;
}

namespace {

std::string Sub(const std::string& dir, const std::string& name) {
  return dir.empty() ? std::string() : (fs::path(dir) / name).string();
}

void FinishWithEvaluation(const ExperimentConfig& cfg, const std::vector<ppo::Agent>& agents,
                          SeedResult& r) {
  std::vector<ppo::Agent> pair = agents;
  while (static_cast<int>(pair.size()) < cfg.env.n_agents) pair.push_back(pair[0]);
  TrajectoryFile traj;
  r.evaluation = EvaluateAndRecord(pair, cfg.env, cfg.OriginalWeights(), cfg.evaluation,
                                   DeriveSeed(r.seed, 0x30000000), cfg.record_episodes, &traj);
  if (!r.dir.empty()) {
    pipeline::SaveAgents(agents, Sub(r.dir, "final"));
    if (cfg.record_episodes > 0) WriteTrajectories(traj, Sub(r.dir, "trajectories.txt"));
  }
}

void RunPg(const ExperimentConfig& cfg, SeedResult& r) {
  ppo::TrainSpec spec;
  spec.env = cfg.env;
  const envs::RewardWeights orig = cfg.OriginalWeights();
  spec.weights = cfg.algorithm == Algorithm::kPgShared
                     ? envs::RewardWeights(orig.w(), kInf, cfg.prosociality)
                     : orig;
  spec.cfg = cfg.ppo;
  spec.total_env_steps = cfg.total_env_steps;
  spec.seed = r.seed;
  spec.metrics_path = Sub(r.dir, "metrics.csv");
  ppo::TrainResult t = ppo::train_ppo(spec);
  r.env_steps = t.env_steps;
  if (cfg.ppo.shared_parameters) t.agents.resize(1);
  FinishWithEvaluation(cfg, t.agents, r);
}

std::vector<pipeline::PopulationMember> TrainAndScore(
    const ExperimentConfig& cfg, const std::vector<envs::RewardWeights>& weights,
    int64_t member_steps, uint64_t seed, const std::string& dir, int workers) {
  pipeline::PopulationOptions po;
  po.env = cfg.env;
  po.cfg = cfg.ppo;
  po.member_env_steps = member_steps;
  po.seed = seed;
  po.run_dir = dir;
  po.workers = workers;
  auto pop = pipeline::train_population(weights, po);
  pipeline::evaluate_population(pop, cfg.env, cfg.OriginalWeights(), cfg.evaluation,
                                DeriveSeed(seed, 0x40000000), workers);
  if (!dir.empty()) pipeline::WritePopulationManifest(pop, Sub(dir, "population.json"));
  return pop;
}

void RunPbt(const ExperimentConfig& cfg, SeedResult& r, int workers) {
  std::vector<envs::RewardWeights> ws(cfg.pbt_population, cfg.OriginalWeights());
  auto pop = TrainAndScore(cfg, ws, cfg.total_env_steps, r.seed, r.dir, workers);
  r.env_steps = pipeline::PopulationEnvSteps(pop);
  r.selected_member = pipeline::select_best(pop);
  FinishWithEvaluation(cfg, pop[r.selected_member].agents, r);
}

void RunRpg(const ExperimentConfig& cfg, SeedResult& r, int workers) {
  const auto weights = pipeline::sample_weights(cfg.weight_space, r.seed);
  auto pop = TrainAndScore(cfg, weights, cfg.total_env_steps, r.seed, r.dir, workers);
  const int64_t pop_steps = pipeline::PopulationEnvSteps(pop);
  r.selected_member = pipeline::select_best(pop);
  pipeline::PopulationMember best = pop[r.selected_member];
  const envs::RewardWeights orig = cfg.OriginalWeights();
  const int64_t warm = cfg.warm_start_env_steps >= 0
                           ? cfg.warm_start_env_steps
                           : pipeline::DefaultWarmSteps(cfg.fine_tune_env_steps);
  int64_t steps = pop_steps;
  if (cfg.fine_tune_env_steps > 0) {
    pipeline::warm_start_critic(best, cfg.env, orig, cfg.ppo, warm, DeriveSeed(r.seed, 0x6000),
                                Sub(r.dir, "warm_start.csv"));
    steps += warm;
    pipeline::FineTuneOptions ft;
    ft.env_steps = cfg.fine_tune_env_steps;
    ft.seed = DeriveSeed(r.seed, 0x7000);
    ft.metrics_path = Sub(r.dir, "fine_tune.csv");
    ft.population_step_offset = steps;
    ppo::TrainResult t = pipeline::fine_tune(best, cfg.env, orig, cfg.ppo, ft);
    steps += t.env_steps;
    if (cfg.ppo.shared_parameters) t.agents.resize(1);
    best.agents = std::move(t.agents);
  }
  r.env_steps = steps;
  FinishWithEvaluation(cfg, best.agents, r);
}

// Frozen opponents for the slot next to the adaptive agent, one per member.
std::vector<std::shared_ptr<ppo::Opponent>> TrainOpponents(
    const ExperimentConfig& cfg, const std::vector<std::vector<double>>& ws, uint64_t seed,
    const std::string& dir, int workers, const std::string& prefix, int64_t& steps) {
  std::vector<envs::RewardWeights> weights;
  for (const auto& w : ws) weights.emplace_back(w);
  ppo::PpoConfig pc = cfg.ppo;
  pc.recurrent = false;
  pipeline::PopulationOptions po;
  po.env = cfg.env;
  po.cfg = pc;
  po.member_env_steps = cfg.adapt.opponent_env_steps;
  po.seed = seed;
  po.run_dir = dir;
  po.workers = workers;
  auto pop = pipeline::train_population(weights, po);
  steps += pipeline::PopulationEnvSteps(pop);
  std::vector<std::shared_ptr<ppo::Opponent>> out;
  std::vector<adapt::ManifestOpponent> manifest;
  for (const auto& m : pop) {
    if (!m.ok()) throw std::runtime_error("opponent member " + std::to_string(m.index) + ": " + m.error);
    const int slot = std::min<int>(1, static_cast<int>(m.agents.size()) - 1);
    const std::string label = prefix + std::to_string(m.index) + ":" + FormatWeights(m.w.w());
    out.push_back(std::make_shared<ppo::FrozenPolicy>(label, m.agents[slot]));
    if (!dir.empty()) {
      manifest.push_back({label, (fs::path("member_" + std::to_string(m.index)) /
                                  ("agent_" + std::to_string(slot) + ".ckpt"))
                                     .string()});
    }
  }
  if (!dir.empty()) adapt::WriteOpponentManifest(manifest, Sub(dir, "opponents.txt"));
  return out;
}

void RunAdapt(const ExperimentConfig& cfg, SeedResult& r, int workers) {
  int64_t steps = 0;
  std::vector<std::shared_ptr<ppo::Opponent>> train;
  if (!cfg.adapt.opponents_manifest.empty()) {
    train = adapt::LoadOpponents(adapt::ReadOpponentManifest(cfg.adapt.opponents_manifest));
  } else {
    train = TrainOpponents(cfg, cfg.adapt.opponent_weights, DeriveSeed(r.seed, 0x8000),
                           Sub(r.dir, "opponents"), workers, "rr", steps);
  }
  ppo::OpponentSet set;
  for (auto& o : train) set.Add(o);

  adapt::AdaptiveSpec spec;
  spec.env = cfg.env;
  spec.weights = cfg.OriginalWeights();
  spec.cfg = cfg.ppo;
  spec.total_env_steps = cfg.adapt.env_steps;
  spec.seed = r.seed;
  spec.metrics_path = Sub(r.dir, "metrics.csv");
  adapt::AdaptiveResult res = adapt::train_adaptive(set, spec);
  steps += res.env_steps;
  if (!r.dir.empty()) res.agent.ToCheckpoint().Save(Sub(r.dir, "adaptive.ckpt"));

  std::vector<std::shared_ptr<ppo::Opponent>> test;
  for (const auto& s : cfg.adapt.scripted) {
    test.push_back(adapt::make_scripted(adapt::ParseScriptedKind(s), cfg.env.kind));
  }
  if (!cfg.adapt.holdout_manifest.empty()) {
    for (auto& o : adapt::LoadOpponents(adapt::ReadOpponentManifest(cfg.adapt.holdout_manifest))) {
      test.push_back(o);
    }
  }
  if (!cfg.adapt.holdout_weights.empty()) {
    for (auto& o : TrainOpponents(cfg, cfg.adapt.holdout_weights, DeriveSeed(r.seed, 0x9000),
                                  Sub(r.dir, "holdout"), workers, "holdout", steps)) {
      test.push_back(o);
    }
  }
  // Also report the training opponents themselves.
  for (auto& o : train) test.push_back(o);
  r.opponent_stats = adapt::evaluate_adaptive(res.agent, test, cfg.env, spec.weights,
                                              cfg.adapt.episodes, DeriveSeed(r.seed, 0x30000000));
  if (!r.dir.empty()) adapt::WriteOpponentStatsCsv(r.opponent_stats, Sub(r.dir, "opponent_stats.csv"));
  r.env_steps = steps;
}

void RunMatrix(const ExperimentConfig& cfg, SeedResult& r, int workers) {
  const MatrixSettings& m = cfg.matrix;
  const int n1 = static_cast<int>(m.cs.size());
  const int n2 = static_cast<int>(m.theorem2_n.size());
  std::vector<matrix::BoundReport> reports(n1 + n2);
  ParallelFor(n1 + n2, workers, [&](int64_t k) {
    if (k < n1) {
      const matrix::PayoffMatrix p(m.a, m.b, m.cs[k], m.d);
      reports[k] = matrix::verify_theorem1(p, m.trials, m.dynamics, DeriveSeed(r.seed, k));
    } else {
      reports[k] = matrix::verify_theorem2(m.theorem2_n[k - n1], m.theorem2_trials,
                                           DeriveSeed(r.seed, 0x100 + k), m.dynamics);
    }
  });
  r.bound_reports = std::move(reports);
  if (!r.dir.empty()) {
    std::ofstream out(Sub(r.dir, "bounds.jsonl"));
    for (const auto& b : r.bound_reports) out << b.ToJson() << '\n';
  }
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, int workers) {
  cfg.Validate();
  if (workers <= 0) workers = WorkerCount();
  RunSummary summary;
  summary.dir = cfg.output_dir;
  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    SaveConfig(cfg, Sub(cfg.output_dir, "config.json"));
  }
  const int n = static_cast<int>(cfg.seeds.size());
  summary.seeds.resize(n);
  // Seeds take the workers first; a lone seed hands them to its population.
  const int outer = std::min(workers, n);
  const int inner = n == 1 ? workers : 1;
  ParallelFor(n, outer, [&](int64_t i) {
    SeedResult& r = summary.seeds[i];
    r.seed = cfg.seeds[i];
    r.dir = Sub(cfg.output_dir, "seed_" + std::to_string(r.seed));
    try {
      if (!r.dir.empty()) fs::create_directories(r.dir);
      switch (cfg.algorithm) {
        case Algorithm::kPg:
        case Algorithm::kPgShared:
        case Algorithm::kPgCount:
          RunPg(cfg, r);
          break;
        case Algorithm::kPbt:
          RunPbt(cfg, r, inner);
          break;
        case Algorithm::kRpg:
          RunRpg(cfg, r, inner);
          break;
        case Algorithm::kAdapt:
          RunAdapt(cfg, r, inner);
          break;
        case Algorithm::kVerifyMatrix:
          RunMatrix(cfg, r, inner);
          break;
      }
    } catch (const std::exception& e) {
      r.error = e.what();
    }
  });
  if (!cfg.output_dir.empty()) {
    std::ofstream out(Sub(cfg.output_dir, "summary.json"));
    out << SummaryToJson(summary).dump(2) << '\n';
  }
  return summary;
}

}  // namespace rpg::harness
