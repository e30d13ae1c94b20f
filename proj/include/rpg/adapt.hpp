#ifndef RPG_ADAPT_HPP_
#define RPG_ADAPT_HPP_

// Learning to adapt: a recurrent agent trained against a mixture of frozen
// opponents. The critic sees which opponent was drawn (one-hot identity and a
// value head per opponent); the policy only sees the game.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rpg/envs.hpp"
#include "rpg/ppo.hpp"

namespace rpg::adapt {

enum class ScriptedKind { kStagAlways, kHareAlways, kTitForTat, kRandomUniform };

std::string ScriptedKindName(ScriptedKind kind);
// "stag", "hare", "tft", "random" (case-insensitive; long names also accepted).
ScriptedKind ParseScriptedKind(std::string_view name);

// Hand-designed iterated stag-hunt player. Reads the previous joint action
// from its own observation: [own last, other last], -1 before round 0.
class ScriptedOpponent final : public ppo::Opponent {
 public:
  explicit ScriptedOpponent(ScriptedKind kind) : kind_(kind) {}
  ScriptedKind kind() const { return kind_; }
  std::string label() const override { return ScriptedKindName(kind_); }
  void Act(const ppo::Matrix& obs, const std::vector<int>& cols,
           const std::vector<uint8_t>& episode_start, std::vector<Rng>& rngs,
           std::vector<int>& actions) override;

 private:
  ScriptedKind kind_;
};

// Throws std::invalid_argument unless env is the iterated stag hunt.
std::shared_ptr<ppo::Opponent> make_scripted(ScriptedKind kind, envs::EnvKind env);

struct AdaptiveSpec {
  envs::EnvSpec env;
  envs::RewardWeights weights;  // the original game
  ppo::PpoConfig cfg;           // cfg.recurrent is forced on
  int64_t total_env_steps = 0;
  uint64_t seed = 0;
  int adaptive_slot = 0;        // the opponent plays the other slot
  std::string metrics_path;
  std::function<void(const ppo::MetricsRow&)> on_update;
  // Called once per update with the collected rollout, before the update.
  std::function<void(const ppo::Rollout&)> on_rollout;
};

struct AdaptiveResult {
  ppo::Agent agent;
  std::vector<ppo::MetricsRow> rows;
  std::vector<int64_t> opponent_episodes;  // per opponent, over training
  int64_t env_steps = 0;
};

// PPO for the adaptive agent only. Each env thread draws an opponent at
// every episode start. Throws std::invalid_argument for an empty set or a
// game with more than two agents.
AdaptiveResult train_adaptive(ppo::OpponentSet& opponents, const AdaptiveSpec& spec);

struct OpponentStats {
  std::string label;
  int episodes = 0;
  std::vector<double> mean_returns;  // per agent slot
  std::vector<double> std_returns;
  std::vector<std::string> event_names;
  std::vector<double> mean_events;
  std::vector<double> std_events;
  // Iterated game only: rounds in which the adaptive agent chose each action.
  double mean_stag = 0.0, std_stag = 0.0;
  double mean_hare = 0.0, std_hare = 0.0;
};

// Plays `episodes` episodes against every opponent in turn.
std::vector<OpponentStats> evaluate_adaptive(
    const ppo::Agent& agent, const std::vector<std::shared_ptr<ppo::Opponent>>& opponents,
    const envs::EnvSpec& env, const envs::RewardWeights& w, int episodes, uint64_t seed,
    int adaptive_slot = 0);

// One row per opponent: label, episodes, returns, events, stag/hare counts.
void WriteOpponentStatsCsv(const std::vector<OpponentStats>& stats, const std::string& path);

// Opponent manifests: one "label path" pair per line, '#' starts a comment.
// Paths are relative to the manifest's directory unless absolute.
struct ManifestOpponent {
  std::string label;
  std::string path;
};
std::vector<ManifestOpponent> ReadOpponentManifest(const std::string& path);
void WriteOpponentManifest(const std::vector<ManifestOpponent>& entries,
                           const std::string& path);
// FrozenPolicy per entry from agent checkpoints.
std::vector<std::shared_ptr<ppo::Opponent>> LoadOpponents(
    const std::vector<ManifestOpponent>& entries);

}  // namespace rpg::adapt

#endif  // RPG_ADAPT_HPP_
