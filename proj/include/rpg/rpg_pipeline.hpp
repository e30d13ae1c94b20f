#ifndef RPG_RPG_PIPELINE_HPP_
#define RPG_RPG_PIPELINE_HPP_

// Reward-randomized policy gradient: sample reward weights, train one PPO
// population member per induced game, score every member on the original
// game, pick the best, warm up its critic and fine-tune.

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "rpg/envs.hpp"
#include "rpg/ppo.hpp"

namespace rpg::pipeline {

enum class WeightMode { kExplicitList, kUniformBox };

std::string WeightModeName(WeightMode mode);
WeightMode ParseWeightMode(std::string_view name);

struct WeightSpaceSpec {
  WeightMode mode = WeightMode::kExplicitList;
  std::vector<std::vector<double>> weights;  // explicit_list
  std::vector<double> low;                   // uniform_box, per dimension
  std::vector<double> high;
  double c_max = std::numeric_limits<double>::infinity();
  int population_size = 0;

  void Validate() const;
};

// Explicit lists come back verbatim. Box samples are deterministic in seed.
std::vector<envs::RewardWeights> sample_weights(const WeightSpaceSpec& spec,
                                                uint64_t seed);

struct EvaluationSpec {
  double beta = 1.0;  // E = beta * U_1 + (1 - beta) * U_2
  int episodes = 100;

  void Validate() const;
};

struct EvaluationResult {
  double score = 0.0;
  int episodes = 0;
  std::vector<double> mean_returns;  // per agent
  std::vector<double> std_returns;
  std::vector<std::string> event_names;
  std::vector<double> mean_events;   // per episode
  std::vector<double> std_events;
};

// Throws std::invalid_argument unless there is one agent per slot shaped for env.
void CheckAgentsFit(const std::vector<ppo::Agent>& agents, const envs::EnvSpec& env);

// Per-episode means and standard deviations of finished evaluation episodes.
EvaluationResult SummarizeEvaluation(const ppo::EpisodeStats& stats, const envs::EnvSpec& env,
                                     double beta);

// Runs spec.episodes episodes of the agents in the game with the given
// weights, one env thread per episode, sampling actions. Throws
// std::invalid_argument when the agents do not fit the env.
EvaluationResult evaluate_pair(const std::vector<ppo::Agent>& agents,
                               const envs::EnvSpec& env,
                               const envs::RewardWeights& w,
                               const EvaluationSpec& spec, uint64_t seed);

struct PopulationMember {
  int index = 0;
  envs::RewardWeights w;
  uint64_t seed = 0;
  std::vector<ppo::Agent> agents;  // one per agent slot
  std::vector<ppo::MetricsRow> rows;
  int64_t env_steps = 0;
  std::string metrics_path;
  std::string dir;                 // empty when nothing is written
  std::optional<EvaluationResult> evaluation;
  bool warm_started = false;
  std::string error;  // non-empty when training failed

  bool ok() const { return error.empty(); }
  double score() const;  // throws std::logic_error when unevaluated
};

struct PopulationOptions {
  envs::EnvSpec env;
  ppo::PpoConfig cfg;
  int64_t member_env_steps = 0;
  uint64_t seed = 0;
  // Per-member seeds; empty derives member i's seed from `seed` and i.
  std::vector<uint64_t> member_seeds;
  // Root of the member directories; empty keeps everything in memory.
  std::string run_dir;
  int workers = 0;  // 0: WorkerCount()
};

// One independent PPO run per weight vector. A failing member records its
// error and leaves the others untouched.
std::vector<PopulationMember> train_population(
    const std::vector<envs::RewardWeights>& weights, const PopulationOptions& opts);

// Sum of member training steps.
int64_t PopulationEnvSteps(const std::vector<PopulationMember>& population);

// Scores every healthy member on `original`.
void evaluate_population(std::vector<PopulationMember>& population,
                         const envs::EnvSpec& env, const envs::RewardWeights& original,
                         const EvaluationSpec& spec, uint64_t seed, int workers = 0);

// Index of the highest score; ties go to the lowest index. Members without a
// score are skipped. Throws std::invalid_argument when nothing is scored.
int select_best(const std::vector<PopulationMember>& population);

// Value-only PPO under `original` for warm_steps env steps. The policy slices
// are left bit-identical. warm_steps = 0 only marks the member.
void warm_start_critic(PopulationMember& member, const envs::EnvSpec& env,
                       const envs::RewardWeights& original, const ppo::PpoConfig& cfg,
                       int64_t warm_steps, uint64_t seed,
                       const std::string& metrics_path = "");

struct FineTuneOptions {
  int64_t env_steps = 0;
  uint64_t seed = 0;
  std::string metrics_path;
  int64_t population_step_offset = 0;
  bool skip_warm_start = false;
};

// Continues PPO on the original game from the member's agents. A zero budget
// returns them verbatim. Throws std::logic_error when the critic was not
// warmed up and skip_warm_start is unset.
ppo::TrainResult fine_tune(const PopulationMember& member, const envs::EnvSpec& env,
                           const envs::RewardWeights& original,
                           const ppo::PpoConfig& cfg, const FineTuneOptions& opts);

// Default warm-start length: 5% of the fine-tune budget.
int64_t DefaultWarmSteps(int64_t fine_tune_steps);

// --- run directory -------------------------------------------------------------

// <dir>/agent_<k>.ckpt for every agent slot.
void SaveAgents(const std::vector<ppo::Agent>& agents, const std::string& dir);
std::vector<ppo::Agent> LoadAgents(const std::string& dir);

// population.json: weights, seeds, scores and paths of every member.
void WritePopulationManifest(const std::vector<PopulationMember>& population,
                             const std::string& path);

struct ManifestEntry {
  int index = 0;
  std::vector<double> w;
  double prosociality = 0.0;
  uint64_t seed = 0;
  std::string dir;
  std::optional<double> score;
  std::string error;
};
std::vector<ManifestEntry> ReadPopulationManifest(const std::string& path);

// Rebuilds members (weights, seeds, agents and scores) from a manifest.
std::vector<PopulationMember> LoadPopulation(const std::string& manifest_path);

}  // namespace rpg::pipeline

#endif  // RPG_RPG_PIPELINE_HPP_
