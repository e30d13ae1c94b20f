#ifndef RPG_HARNESS_HPP_
#define RPG_HARNESS_HPP_

// Experiment configuration, presets, run directories, trajectory files and
// replay. Every run directory holds the exact config that produced it.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpg/adapt.hpp"
#include "rpg/envs.hpp"
#include "rpg/matrix_core.hpp"
#include "rpg/ppo.hpp"
#include "rpg/rpg_pipeline.hpp"

namespace rpg::harness {

using json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;

enum class Algorithm { kPg, kPgShared, kPgCount, kPbt, kRpg, kAdapt, kVerifyMatrix };

std::string AlgorithmName(Algorithm a);
Algorithm ParseAlgorithm(std::string_view name);

struct AdaptSettings {
  // Training opponents: RR members trained in-run from `opponent_weights`,
  // or frozen checkpoints from `opponents_manifest`.
  std::vector<std::vector<double>> opponent_weights;
  std::string opponents_manifest;
  int64_t opponent_env_steps = 0;  // per opponent member
  int64_t env_steps = 0;           // adaptive training
  // Test opponents: scripted kinds (iterated game), a hold-out manifest, or
  // hold-out members trained in-run from `holdout_weights`.
  std::vector<std::string> scripted;
  std::string holdout_manifest;
  std::vector<std::vector<double>> holdout_weights;
  int episodes = 100;
};

struct MatrixSettings {
  double a = 4, b = 3, d = 1;
  std::vector<double> cs{-5, -20, -50, -100};
  int trials = 10000;
  std::vector<int> theorem2_n{1, 2, 3, 5, 8};
  int theorem2_trials = 2000;
  matrix::DynamicsConfig dynamics;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::string name;
  Algorithm algorithm = Algorithm::kPg;
  envs::EnvSpec env;
  // Empty: the env's original weights.
  std::vector<double> original_weights;
  ppo::PpoConfig ppo;
  pipeline::WeightSpaceSpec weight_space;
  std::vector<uint64_t> seeds{0};
  // pg / pg_shared / pg_count: per seed. pbt / rpg: per population member.
  int64_t total_env_steps = 0;
  int64_t fine_tune_env_steps = 0;    // rpg
  int64_t warm_start_env_steps = -1;  // rpg; -1 picks 5% of the fine-tune budget
  double prosociality = 1.0;          // pg_shared
  int pbt_population = 4;             // pbt
  pipeline::EvaluationSpec evaluation;
  int record_episodes = 10;           // evaluation episodes kept as trajectories
  AdaptSettings adapt;
  MatrixSettings matrix;
  std::string output_dir;
  double scale = 1.0;                 // informational: budgets are already scaled

  envs::RewardWeights OriginalWeights() const;
  // Throws std::invalid_argument naming the first bad field.
  void Validate() const;
};

json ToJson(const ExperimentConfig& cfg);
// Unknown keys and schema mismatches are errors.
ExperimentConfig FromJson(const json& j);
ExperimentConfig LoadConfig(const std::string& path);
void SaveConfig(const ExperimentConfig& cfg, const std::string& path);

json PpoToJson(const ppo::PpoConfig& cfg);
// Applies the keys of j on top of base; unknown keys are errors.
ppo::PpoConfig PpoFromJson(const json& j, ppo::PpoConfig base = {});

// Names: fig2, fig2-ppo, monster-hunt, escalation, iterated, adapt,
// plus the baselines monster-hunt-pg, monster-hunt-shared, monster-hunt-count,
// monster-hunt-pbt, escalation-pg, iterated-pg. `scale` multiplies every step
// budget.
std::vector<std::string> PresetNames();
ExperimentConfig MakePreset(const std::string& name, double scale = 0.1);

// --- runs ---------------------------------------------------------------------------

struct SeedResult {
  uint64_t seed = 0;
  std::string dir;
  std::optional<pipeline::EvaluationResult> evaluation;  // final policies on original w
  int64_t env_steps = 0;         // steps consumed by this seed, all phases
  int selected_member = -1;      // pbt / rpg
  std::vector<adapt::OpponentStats> opponent_stats;  // adapt
  std::vector<matrix::BoundReport> bound_reports;     // verify_matrix
  std::string error;
};

struct RunSummary {
  std::string dir;
  std::vector<SeedResult> seeds;
  bool ok() const;
  double MeanScore() const;  // over seeds with an evaluation
};

// Executes the configured algorithm for every seed. Seeds run on up to
// `workers` threads (0: WorkerCount()). Writes config.json, per-seed
// directories and summary.json under cfg.output_dir.
RunSummary run_experiment(const ExperimentConfig& cfg, int workers = 0);

json SummaryToJson(const RunSummary& s);

// --- trajectories -------------------------------------------------------------------

inline constexpr int kTrajectorySchemaVersion = 1;

struct TrajectoryFile {
  envs::EnvKind kind = envs::EnvKind::kMonsterHunt;
  int n_agents = 2;
  std::vector<ppo::Trajectory> episodes;
};

void WriteTrajectories(const TrajectoryFile& file, const std::string& path);
TrajectoryFile ReadTrajectories(const std::string& path);

// Event counters of one episode recomputed from its frames alone.
std::vector<double> RecountEvents(envs::EnvKind kind, const ppo::Trajectory& t);

// ASCII rendering of one recorded episode: a header, then one block per frame.
// Throws std::out_of_range for a missing episode.
std::string Replay(const TrajectoryFile& file, int episode);
// Reads <run_dir>/trajectories.txt (or the file itself when given a file).
std::string ReplayPath(const std::string& path, int episode);

// Evaluates agents like pipeline::evaluate_pair and keeps the first
// `keep` episodes as trajectories.
pipeline::EvaluationResult EvaluateAndRecord(const std::vector<ppo::Agent>& agents,
                                             const envs::EnvSpec& env,
                                             const envs::RewardWeights& w,
                                             const pipeline::EvaluationSpec& spec,
                                             uint64_t seed, int keep, TrajectoryFile* out);

}  // namespace rpg::harness

#endif  // RPG_HARNESS_HPP_
