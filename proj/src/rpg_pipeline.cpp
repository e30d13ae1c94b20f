#include "rpg/rpg_pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "rpg/parallel.hpp"
#include "rpg/rng.hpp"

namespace rpg::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string WeightModeName(WeightMode mode) {
  return mode == WeightMode::kExplicitList ? "explicit_list" : "uniform_box";
}

WeightMode ParseWeightMode(std::string_view name) {
  if (name == "explicit_list") return WeightMode::kExplicitList;
  if (name == "uniform_box") return WeightMode::kUniformBox;
  throw std::invalid_argument("unknown weight mode: " + std::string(name));
}

void WeightSpaceSpec::Validate() const {
  if (population_size < 0) throw std::invalid_argument("population_size must be >= 0");
  if (!(c_max > 0.0)) throw std::invalid_argument("c_max must be positive");
  if (mode == WeightMode::kExplicitList) {
    if (static_cast<int>(weights.size()) != population_size) {
      throw std::invalid_argument("explicit weight list length must equal population_size");
    }
    for (const auto& w : weights) {
      for (double x : w) {
        if (!std::isfinite(x) || std::abs(x) > c_max) {
          throw std::invalid_argument("listed weight outside [-c_max, c_max]");
        }
      }
    }
    return;
  }
  if (low.size() != high.size() || low.empty()) {
    throw std::invalid_argument("uniform_box needs matching non-empty low/high");
  }
  for (size_t k = 0; k < low.size(); ++k) {
    if (!(low[k] <= high[k])) throw std::invalid_argument("uniform_box low > high");
    if (std::max(std::abs(low[k]), std::abs(high[k])) > c_max) {
      throw std::invalid_argument("uniform_box bounds exceed c_max");
    }
  }
}

std::vector<envs::RewardWeights> sample_weights(const WeightSpaceSpec& spec,
                                                uint64_t seed) {
  spec.Validate();
  std::vector<envs::RewardWeights> out;
  out.reserve(spec.population_size);
  if (spec.mode == WeightMode::kExplicitList) {
    for (const auto& w : spec.weights) out.emplace_back(w, spec.c_max);
    return out;
  }
  Rng rng(seed, 0x77);
  for (int i = 0; i < spec.population_size; ++i) {
    std::vector<double> w(spec.low.size());
    for (size_t k = 0; k < w.size(); ++k) w[k] = rng.Uniform(spec.low[k], spec.high[k]);
    out.emplace_back(std::move(w), spec.c_max);
  }
  return out;
}

void EvaluationSpec::Validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
  if (episodes <= 0) throw std::invalid_argument("episodes must be positive");
}

namespace {

std::pair<double, double> MeanStd(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

}  // namespace

void CheckAgentsFit(const std::vector<ppo::Agent>& agents, const envs::EnvSpec& env) {
  if (static_cast<int>(agents.size()) != env.n_agents) {
    throw std::invalid_argument("agent count does not match the env");
  }
  const ppo::AgentShape want = ppo::ShapeFor(env);
  for (const ppo::Agent& a : agents) {
    const ppo::AgentShape& s = a.shape();
    if (s.obs_dim != want.obs_dim || s.num_actions != want.num_actions ||
        s.value_input_dim != want.value_input_dim) {
      throw std::invalid_argument("checkpoint does not fit env " + envs::EnvKindName(env.kind));
    }
  }
}

EvaluationResult evaluate_pair(const std::vector<ppo::Agent>& agents,
                               const envs::EnvSpec& env, const envs::RewardWeights& w,
                               const EvaluationSpec& spec, uint64_t seed) {
  spec.Validate();
  CheckAgentsFit(agents, env);
  std::vector<ppo::Agent> copies = agents;
  ppo::Controllers who;
  for (auto& a : copies) who.learners.push_back(&a);
  ppo::CollectOptions opts;
  opts.threads = spec.episodes;
  opts.horizon = env.episode_length;
  opts.auto_reset = false;
  opts.record = false;
  const ppo::Rollout ro = ppo::collect_rollouts(who, env, w, opts, seed);
  return SummarizeEvaluation(ro.stats, env, spec.beta);
}

EvaluationResult SummarizeEvaluation(const ppo::EpisodeStats& stats, const envs::EnvSpec& env,
                                     double beta) {
  EvaluationResult res;
  res.episodes = static_cast<int>(stats.episodes);
  const int n = env.n_agents;
  for (int i = 0; i < n; ++i) {
    std::vector<double> xs;
    for (const auto& r : stats.per_episode_returns) xs.push_back(r[i]);
    const auto [m, s] = MeanStd(xs);
    res.mean_returns.push_back(m);
    res.std_returns.push_back(s);
  }
  res.event_names = envs::EventCounters::Vocabulary(env.kind);
  for (size_t k = 0; k < res.event_names.size(); ++k) {
    std::vector<double> xs;
    for (const auto& e : stats.per_episode_events) xs.push_back(e[k]);
    const auto [m, s] = MeanStd(xs);
    res.mean_events.push_back(m);
    res.std_events.push_back(s);
  }
  const double u2 = n > 1 ? res.mean_returns[1] : res.mean_returns[0];
  res.score = beta * res.mean_returns[0] + (1.0 - beta) * u2;
  return res;
}

double PopulationMember::score() const {
  if (!evaluation) throw std::logic_error("member has not been evaluated");
  return evaluation->score;
}

std::vector<PopulationMember> train_population(
    const std::vector<envs::RewardWeights>& weights, const PopulationOptions& opts) {
  const int n = static_cast<int>(weights.size());
  if (!opts.member_seeds.empty() && static_cast<int>(opts.member_seeds.size()) != n) {
    throw std::invalid_argument("member_seeds must match the weight list");
  }
  std::vector<PopulationMember> pop(n);
  for (int i = 0; i < n; ++i) {
    pop[i].index = i;
    pop[i].w = weights[i];
    pop[i].seed = opts.member_seeds.empty() ? DeriveSeed(opts.seed, 0x5000 + i)
                                            : opts.member_seeds[i];
    if (!opts.run_dir.empty()) {
      pop[i].dir = (fs::path(opts.run_dir) / ("member_" + std::to_string(i))).string();
      pop[i].metrics_path = (fs::path(pop[i].dir) / "metrics.csv").string();
    }
  }
  const int workers = opts.workers > 0 ? opts.workers : WorkerCount();
  ParallelFor(n, workers, [&](int64_t i) {
    PopulationMember& m = pop[i];
    try {
      if (!m.dir.empty()) fs::create_directories(m.dir);
      // The member only ever sees its own weights.
      ppo::TrainSpec spec;
      spec.env = opts.env;
      spec.weights = m.w;
      spec.cfg = opts.cfg;
      spec.total_env_steps = opts.member_env_steps;
      spec.seed = m.seed;
      spec.metrics_path = m.metrics_path;
      spec.population_step_multiplier = std::max(1, n);
      ppo::TrainResult r = ppo::train_ppo(spec);
      m.agents = std::move(r.agents);
      if (opts.cfg.shared_parameters) m.agents.resize(1);
      m.rows = std::move(r.rows);
      m.env_steps = r.env_steps;
      if (!m.dir.empty()) SaveAgents(m.agents, m.dir);
    } catch (const std::exception& e) {
      m.error = e.what();
      m.agents.clear();
    }
  });
  return pop;
}

int64_t PopulationEnvSteps(const std::vector<PopulationMember>& population) {
  int64_t s = 0;
  for (const auto& m : population) s += m.env_steps;
  return s;
}

void evaluate_population(std::vector<PopulationMember>& population,
                         const envs::EnvSpec& env, const envs::RewardWeights& original,
                         const EvaluationSpec& spec, uint64_t seed, int workers) {
  if (workers <= 0) workers = WorkerCount();
  ParallelFor(static_cast<int64_t>(population.size()), workers, [&](int64_t i) {
    PopulationMember& m = population[i];
    if (!m.ok()) return;
    std::vector<ppo::Agent> agents = m.agents;
    while (static_cast<int>(agents.size()) < env.n_agents) agents.push_back(agents[0]);
    m.evaluation = evaluate_pair(agents, env, original, spec, seed);
  });
}

int select_best(const std::vector<PopulationMember>& population) {
  int best = -1;
  for (int i = 0; i < static_cast<int>(population.size()); ++i) {
    const auto& m = population[i];
    if (!m.ok() || !m.evaluation) continue;
    if (best < 0 || m.evaluation->score > population[best].evaluation->score) best = i;
  }
  if (best < 0) throw std::invalid_argument("select_best needs a scored member");
  return best;
}

int64_t DefaultWarmSteps(int64_t fine_tune_steps) { return fine_tune_steps / 20; }

void warm_start_critic(PopulationMember& member, const envs::EnvSpec& env,
                       const envs::RewardWeights& original, const ppo::PpoConfig& cfg,
                       int64_t warm_steps, uint64_t seed, const std::string& metrics_path) {
  if (warm_steps < 0) throw std::invalid_argument("negative warm-start budget");
  if (warm_steps > 0) {
    ppo::TrainSpec spec;
    spec.env = env;
    spec.weights = original;
    spec.cfg = cfg;
    spec.total_env_steps = warm_steps;
    spec.seed = seed;
    spec.metrics_path = metrics_path;
    spec.initial_agents = member.agents;
    spec.freeze_policy = true;
    ppo::TrainResult r = ppo::train_ppo(spec);
    if (cfg.shared_parameters) r.agents.resize(1);
    member.agents = std::move(r.agents);
  }
  member.warm_started = true;
}

ppo::TrainResult fine_tune(const PopulationMember& member, const envs::EnvSpec& env,
                           const envs::RewardWeights& original, const ppo::PpoConfig& cfg,
                           const FineTuneOptions& opts) {
  if (!member.warm_started && !opts.skip_warm_start) {
    throw std::logic_error("fine_tune before the critic warm start");
  }
  if (opts.env_steps <= 0) {
    ppo::TrainResult r;
    r.agents = member.agents;
    return r;
  }
  ppo::TrainSpec spec;
  spec.env = env;
  spec.weights = original;
  spec.cfg = cfg;
  spec.total_env_steps = opts.env_steps;
  spec.seed = opts.seed;
  spec.metrics_path = opts.metrics_path;
  spec.population_step_offset = opts.population_step_offset;
  spec.initial_agents = member.agents;
  return ppo::train_ppo(spec);
}

void SaveAgents(const std::vector<ppo::Agent>& agents, const std::string& dir) {
  fs::create_directories(dir);
  for (size_t k = 0; k < agents.size(); ++k) {
    agents[k].ToCheckpoint().Save((fs::path(dir) / ("agent_" + std::to_string(k) + ".ckpt")).string());
  }
}

std::vector<ppo::Agent> LoadAgents(const std::string& dir) {
  std::vector<ppo::Agent> out;
  for (int k = 0;; ++k) {
    const fs::path p = fs::path(dir) / ("agent_" + std::to_string(k) + ".ckpt");
    if (!fs::exists(p)) break;
    out.push_back(ppo::Agent::FromCheckpoint(nn::Checkpoint::Load(p.string())));
  }
  if (out.empty()) throw std::runtime_error("no checkpoints in " + dir);
  return out;
}

void WritePopulationManifest(const std::vector<PopulationMember>& population,
                             const std::string& path) {
  json members = json::array();
  for (const auto& m : population) {
    json j;
    j["index"] = m.index;
    j["w"] = m.w.w();
    j["prosociality"] = m.w.prosociality();
    j["seed"] = m.seed;
    j["dir"] = m.dir.empty() ? "" : fs::path(m.dir).filename().string();
    j["env_steps"] = m.env_steps;
    if (m.evaluation) {
      j["score"] = m.evaluation->score;
      j["mean_returns"] = m.evaluation->mean_returns;
      json ev;
      for (size_t k = 0; k < m.evaluation->event_names.size(); ++k) {
        ev[m.evaluation->event_names[k]] = m.evaluation->mean_events[k];
      }
      j["events"] = ev;
    } else {
      j["score"] = nullptr;
    }
    j["error"] = m.error;
    members.push_back(j);
  }
  json root;
  root["population_env_steps"] = PopulationEnvSteps(population);
  root["members"] = members;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << root.dump(2) << "\n";
}

std::vector<ManifestEntry> ReadPopulationManifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  const json root = json::parse(in);
  std::vector<ManifestEntry> out;
  for (const json& j : root.at("members")) {
    ManifestEntry e;
    e.index = j.at("index").get<int>();
    e.w = j.at("w").get<std::vector<double>>();
    e.prosociality = j.value("prosociality", 0.0);
    e.seed = j.at("seed").get<uint64_t>();
    e.dir = j.at("dir").get<std::string>();
    if (!j.at("score").is_null()) e.score = j.at("score").get<double>();
    e.error = j.value("error", "");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<PopulationMember> LoadPopulation(const std::string& manifest_path) {
  const fs::path root = fs::path(manifest_path).parent_path();
  std::vector<PopulationMember> out;
  for (const ManifestEntry& e : ReadPopulationManifest(manifest_path)) {
    PopulationMember m;
    m.index = e.index;
    m.w = envs::RewardWeights(e.w, std::numeric_limits<double>::infinity(), e.prosociality);
    m.seed = e.seed;
    m.error = e.error;
    if (m.ok()) {
      m.dir = (root / e.dir).string();
      m.agents = LoadAgents(m.dir);
      if (fs::exists(fs::path(m.dir) / "metrics.csv")) {
        m.metrics_path = (fs::path(m.dir) / "metrics.csv").string();
      }
    }
    if (e.score) {
      EvaluationResult r;
      r.score = *e.score;
      m.evaluation = r;
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace rpg::pipeline
