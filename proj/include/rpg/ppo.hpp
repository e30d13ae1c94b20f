#ifndef RPG_PPO_HPP_
#define RPG_PPO_HPP_

// PPO for independent learners in the trust-dilemma games: batched rollout
// collection over parallel env threads, GAE, clipped surrogate with value and
// entropy terms, chunked recurrent updates and a count-based bonus.

#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rpg/envs.hpp"
#include "rpg/nn.hpp"
#include "rpg/rng.hpp"

namespace rpg::ppo {

using nn::Matrix;
using nn::Vector;

struct PpoConfig {
  double learning_rate = 1e-3;
  bool anneal_lr = true;
  double adam_epsilon = 1e-5;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip = 0.2;
  double value_loss_coeff = 1.0;
  double entropy_coeff = 0.01;
  double grad_clip = 0.5;
  int ppo_epochs = 4;
  int minibatch_chunks = 320;
  int parallel_threads = 64;
  double reward_scale = 0.1;
  int episode_length = 50;
  int chunk_length = 10;
  int buffer_reuse = 4;  // upper bound on ppo_epochs
  bool normalize_advantages = true;
  double count_bonus_alpha = 0.0;  // 0 disables the intrinsic reward
  bool shared_parameters = false;

  // Network shape.
  bool recurrent = false;
  int hidden = 64;
  int hidden_layers = 2;
  nn::Activation activation = nn::Activation::kTanh;
  double input_scale = 1.0;
  double policy_output_gain = 0.01;
  // When set, agents start with P(action 0) ~ Unif[0, 1] through the head
  // bias. Only meaningful for two-action games.
  bool uniform_initial_policy = false;

  // Throws std::invalid_argument naming the first bad field.
  void Validate() const;
};

// lr0 * (1 - t / T), clamped at 0.
double LinearSchedule(double lr0, int64_t t, int64_t total);

// --- agents ---------------------------------------------------------------------

struct AgentShape {
  int obs_dim = 0;
  int value_input_dim = 0;
  int num_actions = 0;
  int value_heads = 1;
};

// Policy and value networks of one learner in a single parameter vector.
// Policy slices live under "pi/", value slices under "v/".
class Agent {
 public:
  Agent() = default;
  Agent(const AgentShape& shape, const PpoConfig& cfg, uint64_t seed);

  const AgentShape& shape() const { return shape_; }
  nn::ParamVector params;
  nn::AdamState adam;
  const nn::Network& policy() const { return policy_; }
  const nn::Network& value() const { return value_; }
  bool recurrent() const { return policy_.recurrent(); }
  int hidden() const { return policy_.hidden_size(); }

  nn::Checkpoint ToCheckpoint() const;
  static Agent FromCheckpoint(const nn::Checkpoint& ck);

 private:
  AgentShape shape_;
  nn::Network policy_;
  nn::Network value_;
};

// --- opponents ---------------------------------------------------------------------

// A policy that is never trained. Acts for a subset of env threads.
class Opponent {
 public:
  virtual ~Opponent() = default;
  virtual std::string label() const = 0;
  // Prepares internal state for `threads` env threads.
  virtual void Begin(int threads) { (void)threads; }
  // obs: obs_dim x B for all threads. For each index k in `cols`, writes an
  // action for thread cols[k] into actions[cols[k]]. episode_start marks
  // threads whose episode begins this step.
  virtual void Act(const Matrix& obs, const std::vector<int>& cols,
                   const std::vector<uint8_t>& episode_start,
                   std::vector<Rng>& rngs, std::vector<int>& actions) = 0;
};

// A trained policy network held fixed.
class FrozenPolicy final : public Opponent {
 public:
  FrozenPolicy(std::string label, const Agent& agent);
  std::string label() const override { return label_; }
  void Begin(int threads) override;
  void Act(const Matrix& obs, const std::vector<int>& cols,
           const std::vector<uint8_t>& episode_start, std::vector<Rng>& rngs,
           std::vector<int>& actions) override;
  uint64_t hash() const { return params_.Hash(); }

 private:
  std::string label_;
  nn::ParamVector params_;
  nn::Network policy_;
  Matrix hidden_;  // H x threads
};

// Uniform (or weighted) choice of an opponent per episode and env thread.
class OpponentSet {
 public:
  void Add(std::shared_ptr<Opponent> opponent, double weight = 1.0);
  int size() const { return static_cast<int>(members_.size()); }
  Opponent& at(int i) { return *members_.at(i); }
  std::string label(int i) const { return members_.at(i)->label(); }
  int Sample(Rng& rng) const;

 private:
  std::vector<std::shared_ptr<Opponent>> members_;
  std::vector<double> weights_;
};

// --- count bonus ------------------------------------------------------------------

class VisitCounter {
 public:
  explicit VisitCounter(double alpha = 0.0) : alpha_(alpha) {}
  double alpha() const { return alpha_; }
  // Increments n_o for the observation and returns alpha / n_o.
  double Bonus(const std::vector<double>& obs);
  int64_t Count(const std::vector<double>& obs) const;
  size_t distinct() const { return counts_.size(); }

 private:
  struct KeyHash {
    size_t operator()(const std::vector<double>& v) const;
  };
  double alpha_;
  std::unordered_map<std::vector<double>, int64_t, KeyHash> counts_;
};

double count_bonus(VisitCounter& counter, const std::vector<double>& obs);

// --- rollout buffer ---------------------------------------------------------------------

// One learner's trajectories from B env threads over T steps. Column t * B + b
// holds step t of thread b.
struct RolloutBuffer {
  int steps = 0;    // T
  int threads = 0;  // B
  int chunk_length = 0;
  Matrix obs;           // obs_dim x T*B
  Matrix value_input;   // value_input_dim x (T+1)*B, last block bootstraps
  std::vector<int> actions;
  Vector logp;          // behaviour log-probabilities
  Vector rewards;       // training rewards (scaled, plus bonus)
  Vector env_rewards;   // unscaled env rewards
  Vector dones;         // 1 when the episode ended after this step
  nn::Array episode_start;  // T x B, 1 where an episode begins at step t
  Vector values;        // (T+1)*B value estimates of the selected head
  std::vector<int> heads;   // value head per column (size T*B)
  std::vector<int> bootstrap_heads;  // per thread for the bootstrap column
  // Hidden states at chunk starts, before the episode-start reset. One
  // H x B matrix per chunk index. Empty for feedforward networks.
  std::vector<Matrix> policy_h0;
  std::vector<Matrix> value_h0;
  Vector advantages;
  Vector returns;

  int num_chunks() const { return steps / chunk_length; }
};

// Standard GAE(lambda). Writes advantages and returns (= advantages + values)
// into the buffer. Throws std::invalid_argument on an empty buffer.
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda);

// The same recursion on flat arrays for a single trajectory. values has
// rewards.size() + 1 entries.
std::vector<double> GaeAdvantages(const std::vector<double>& rewards,
                                  const std::vector<double>& values,
                                  const std::vector<double>& dones,
                                  double gamma, double lambda);

struct EpisodeStats {
  int64_t episodes = 0;
  std::vector<double> return_sum;  // per agent, unscaled env reward
  envs::EventCounters events;      // summed over finished episodes
  std::vector<std::vector<double>> per_episode_returns;
  std::vector<std::vector<double>> per_episode_events;
  std::vector<int> per_episode_opponent;  // -1 without an opponent set

  double MeanReturn(int agent) const;
  double MeanEvent(std::string_view name) const;
};

// Who controls each agent slot during collection.
struct Controllers {
  // One entry per agent slot; null when `opponents` controls the slot.
  std::vector<Agent*> learners;
  OpponentSet* opponents = nullptr;
  int opponent_slot = 1;
  // Learners see the sampled opponent index through the value input (one-hot
  // appended) and head. Only with an opponent set.
  bool identity_critic = false;
};

struct CollectOptions {
  int threads = 64;
  int horizon = 50;
  bool auto_reset = true;      // false: one episode per thread, then idle
  double reward_scale = 1.0;
  bool record = true;          // fill buffers for the learners
  std::vector<VisitCounter>* counters = nullptr;  // per agent slot
  // Keep per-step frames of finished episodes.
  bool keep_trajectories = false;
};

struct Frame {
  envs::Snapshot snapshot;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::vector<double>> features;
};

struct Trajectory {
  int thread = 0;
  envs::Snapshot initial;
  std::vector<Frame> frames;
  std::vector<double> returns;
  std::vector<double> events;
};

struct Rollout {
  std::vector<RolloutBuffer> buffers;  // one per learner slot (empty otherwise)
  EpisodeStats stats;
  std::vector<Trajectory> trajectories;
};

// Builds the value-network input of agent `slot` from all agents'
// observations: own observation first, then the others in index order, then
// an optional identity one-hot.
std::vector<double> ValueInput(const std::vector<std::vector<double>>& obs,
                               int slot, int identity, int identities);

// Runs `threads` envs for `horizon` steps. Env thread b uses env stream
// DeriveSeed(seed, 2b) and action stream DeriveSeed(seed, 2b + 1), so the
// result does not depend on scheduling.
Rollout collect_rollouts(Controllers& who, const envs::EnvSpec& env,
                         const envs::RewardWeights& w,
                         const CollectOptions& opts, uint64_t seed);

// --- update ---------------------------------------------------------------------

struct LossStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  int minibatches = 0;
};

struct UpdateOptions {
  bool train_policy = true;
  bool train_value = true;
  double learning_rate = 1e-3;
  uint64_t shuffle_seed = 0;
};

// Losses and exact gradient of the PPO objective on a set of chunks, without
// changing parameters. Exposed for gradient checks.
struct MinibatchResult {
  double loss = 0.0;
  LossStats stats;
  nn::ParamVector grad;
};
struct ChunkRef {
  const RolloutBuffer* buffer = nullptr;
  int chunk = 0;  // chunk_index * threads + thread
};
MinibatchResult ppo_loss(const Agent& agent, const std::vector<ChunkRef>& chunks,
                         const PpoConfig& cfg, bool train_policy = true,
                         bool train_value = true);

// Cuts the buffer into chunks and, for recurrent agents, stores the hidden
// state at every chunk start from a monolithic pass with the current
// parameters. Must run before parameters change.
void PrepareChunks(const Agent& agent, RolloutBuffer& buffer, int chunk_length);

// ppo_epochs passes of shuffled minibatch updates over one or more buffers of
// the same agent. Chunk-start states are kept from collection; the states
// inside each chunk are recomputed by every forward pass.
LossStats ppo_update(Agent& agent, const std::vector<RolloutBuffer*>& buffers,
                     const PpoConfig& cfg, const UpdateOptions& opts);

// --- training loop ------------------------------------------------------------------

struct MetricsRow {
  int64_t update_index = 0;
  int64_t env_steps = 0;
  int64_t population_env_steps = 0;
  double mean_return_agent0 = 0.0;
  double mean_return_agent1 = 0.0;
  double mean_return_total = 0.0;
  std::vector<double> events;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double lr = 0.0;
};

inline constexpr int kMetricsSchemaVersion = 1;

// Header line naming the columns in order.
std::string MetricsHeader(envs::EnvKind kind);
std::string MetricsLine(const MetricsRow& row);

class MetricsWriter {
 public:
  MetricsWriter() = default;
  // Truncates `path` and writes the schema comment and header.
  MetricsWriter(const std::string& path, envs::EnvKind kind);
  void Write(const MetricsRow& row);
  bool open() const { return out_ != nullptr; }

 private:
  std::shared_ptr<std::FILE> out_;
};

// Column names in order, for readers.
std::vector<std::string> MetricsColumns(envs::EnvKind kind);

struct TrainSpec {
  envs::EnvSpec env;
  envs::RewardWeights weights;
  PpoConfig cfg;
  int64_t total_env_steps = 0;
  uint64_t seed = 0;
  std::string metrics_path;  // empty: no CSV
  // Offset added to population_env_steps (fine-tuning after a population).
  int64_t population_step_offset = 0;
  int64_t population_step_multiplier = 1;
  // Continue from existing agents instead of fresh ones.
  std::vector<Agent> initial_agents;
  // Value-only training (critic warm start).
  bool freeze_policy = false;
  std::function<void(const MetricsRow&)> on_update;
};

struct TrainResult {
  std::vector<Agent> agents;  // one per slot (shared: copies of one agent)
  std::vector<MetricsRow> rows;
  int64_t env_steps = 0;
};

AgentShape ShapeFor(const envs::EnvSpec& env, int identities = 0);

// Independent (or shared) PPO learners in every slot of the game.
TrainResult train_ppo(const TrainSpec& spec);

}  // namespace rpg::ppo

#endif  // RPG_PPO_HPP_
