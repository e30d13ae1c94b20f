#ifndef RPG_ENVS_HPP_
#define RPG_ENVS_HPP_

// Trust-dilemma Markov games whose per-agent reward is phi(s, a; i)^T w.
// Dynamics never read w, so swapping the weights yields the induced game
// M(R_w) without touching state transitions.

#include <array>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpg/rng.hpp"

namespace rpg::envs {

enum class EnvKind { kIteratedStagHunt, kMonsterHunt, kEscalation };

std::string EnvKindName(EnvKind kind);
// Accepts "iterated_staghunt", "monster_hunt", "escalation".
EnvKind ParseEnvKind(std::string_view name);

inline constexpr int kGridSize = 5;

enum IteratedAction : int { kStag = 0, kHare = 1 };
enum GridAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };
inline constexpr int kNumGridActions = 4;

struct Pos {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pos&, const Pos&) = default;
  friend auto operator<=>(const Pos&, const Pos&) = default;
};

int Manhattan(Pos a, Pos b);
bool InGrid(Pos p);

class RewardWeights {
 public:
  RewardWeights() = default;
  // Throws std::invalid_argument if max|w_k| > c_max. `prosociality` mixes
  // the other agents' feature rewards into each agent's reward; 0 leaves
  // reward[i] = phi_i^T w.
  explicit RewardWeights(std::vector<double> w,
                         double c_max = std::numeric_limits<double>::infinity(),
                         double prosociality = 0.0);

  const std::vector<double>& w() const { return w_; }
  double c_max() const { return c_max_; }
  double prosociality() const { return prosociality_; }
  size_t size() const { return w_.size(); }
  double Dot(std::span<const double> phi) const;

  friend bool operator==(const RewardWeights&, const RewardWeights&) = default;

 private:
  std::vector<double> w_;
  double c_max_ = std::numeric_limits<double>::infinity();
  double prosociality_ = 0.0;
};

using FeatureVector = std::vector<double>;

// Named event counters with a fixed vocabulary per environment kind.
class EventCounters {
 public:
  EventCounters() = default;
  explicit EventCounters(EnvKind kind);

  static const std::vector<std::string>& Vocabulary(EnvKind kind);

  EnvKind kind() const { return kind_; }
  // Throws std::invalid_argument for names outside the vocabulary.
  void Add(std::string_view name, double amount = 1.0);
  void AddAt(int index, double amount = 1.0) { values_.at(index) += amount; }
  double Get(std::string_view name) const;
  std::span<const double> values() const { return values_; }
  const std::vector<std::string>& names() const { return Vocabulary(kind_); }
  void Clear();
  EventCounters& operator+=(const EventCounters& other);

 private:
  int IndexOf(std::string_view name) const;

  EnvKind kind_ = EnvKind::kIteratedStagHunt;
  std::vector<double> values_;
};

// Counter indices; the vocabulary order matches these.
namespace events {
inline constexpr int kStagStag = 0, kStagHare = 1, kHareStag = 2,
                     kHareHare = 3;
inline constexpr int kCoopHunt = 0, kSingleHunt = 1, kApple = 2;
inline constexpr int kCoopStep = 0, kBetrayal = 1, kJointLeave = 2,
                     kMaxStreak = 3;
}  // namespace events

struct StepResult {
  std::vector<std::vector<double>> observations;
  std::vector<FeatureVector> features;
  std::vector<double> rewards;
  bool done = false;
  EventCounters events;
};

struct IteratedState {
  int round = 0;
  int rounds = 10;
  std::array<int, 2> last_actions{-1, -1};
  bool done() const { return round >= rounds; }
};

// Shared by Monster-Hunt and Escalation. Fields not used by a game keep
// their defaults.
struct GridState {
  std::vector<Pos> agents;
  Pos monster;                 // Monster-Hunt
  std::array<Pos, 2> apples;   // Monster-Hunt
  Pos lit;                     // Escalation
  int streak = 0;              // Escalation: L
  int max_streak = 0;          // Escalation: longest streak this episode
  int step_count = 0;
  int episode_length = 50;
  bool terminated = false;     // Escalation: one-sided defection
  bool done() const { return terminated || step_count >= episode_length; }
};

// --- per-game transition functions -----------------------------------------

// Features for agent i are the one-hot joint outcome in payoff order
// (a, b, c, d): [both Stag, own Hare / other Stag, own Stag / other Hare,
// both Hare]. Throws std::logic_error on a finished episode.
StepResult iterated_staghunt_step(IteratedState& state,
                                  std::span<const int> actions,
                                  const RewardWeights& w);

// Features per agent: [caught monster with >= 1 other agent, ate apple,
// met monster alone].
StepResult monster_hunt_step(GridState& state, std::span<const int> actions,
                             const RewardWeights& w, Rng& rng);

// Features per agent: [both on lit grid, L if left alone on the lit grid].
StepResult escalation_step(GridState& state, std::span<const int> actions,
                           const RewardWeights& w, Rng& rng);

std::vector<double> observe(const IteratedState& state, int agent);
std::vector<double> observe_monster_hunt(const GridState& state, int agent);
std::vector<double> observe_escalation(const GridState& state, int agent);

IteratedState reset_iterated(int rounds = 10);
GridState reset_monster_hunt(Rng& rng, int n_agents = 2,
                             int episode_length = 50);
GridState reset_escalation(Rng& rng, int episode_length = 50);

// Monster step toward the closest agent, deterministic tie-breaking: largest
// axis gap first, then row before column, then negative before positive.
Pos MonsterMove(Pos monster, std::span<const Pos> agents);

// --- polymorphic wrapper used by the trainers --------------------------------

struct EnvSpec {
  EnvKind kind = EnvKind::kMonsterHunt;
  int n_agents = 2;          // Monster-Hunt supports >= 2
  int episode_length = 50;   // rounds for the iterated game
};

// Everything needed to redraw a frame without re-simulating.
struct Snapshot {
  std::vector<Pos> agents;
  Pos monster;
  std::array<Pos, 2> apples;
  Pos lit;
  int streak = 0;
  int round = 0;
  std::array<int, 2> last_actions{-1, -1};
};

class Environment {
 public:
  virtual ~Environment() = default;

  static std::unique_ptr<Environment> Make(const EnvSpec& spec);

  // Reseeds the private stream and starts a fresh episode.
  void Reset(uint64_t seed) {
    rng_ = Rng(seed);
    NewEpisode();
  }
  // Starts a fresh episode drawing from the current stream.
  virtual void NewEpisode() = 0;
  virtual StepResult Step(std::span<const int> actions,
                          const RewardWeights& w) = 0;
  virtual std::vector<double> Observe(int agent) const = 0;
  virtual bool done() const = 0;

  virtual Snapshot snapshot() const = 0;

  const EnvSpec& spec() const { return spec_; }
  EnvKind kind() const { return spec_.kind; }
  int num_agents() const { return spec_.n_agents; }
  int episode_length() const { return spec_.episode_length; }
  int obs_dim() const;
  int num_actions() const;
  int feature_dim() const;

  Rng& rng() { return rng_; }

 protected:
  explicit Environment(const EnvSpec& spec) : spec_(spec) {}

  EnvSpec spec_;
  Rng rng_;
};

int ObsDim(const EnvSpec& spec);
int NumActions(EnvKind kind);
int FeatureDim(EnvKind kind);
// Default weights of the unmodified games.
RewardWeights OriginalWeights(EnvKind kind);

// ASCII frame of a snapshot: 5 rows of 5 glyphs for the grid games.
std::string Render(EnvKind kind, const Snapshot& snap);

}  // namespace rpg::envs

#endif  // RPG_ENVS_HPP_
