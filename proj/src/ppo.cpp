#include "rpg/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace rpg::ppo {

void PpoConfig::Validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("ppo config: " + what);
  };
  if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be > 0");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("gae_lambda must lie in [0, 1]");
  if (!(clip >= 0.0)) fail("clip must be >= 0");
  if (!(value_loss_coeff >= 0.0)) fail("value_loss_coeff must be >= 0");
  if (!(entropy_coeff >= 0.0)) fail("entropy_coeff must be >= 0");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
  if (ppo_epochs < 1) fail("ppo_epochs must be >= 1");
  if (buffer_reuse < 1) fail("buffer_reuse must be >= 1");
  if (ppo_epochs > buffer_reuse) fail("ppo_epochs exceeds buffer_reuse");
  if (minibatch_chunks < 1) fail("minibatch_chunks must be >= 1");
  if (parallel_threads < 1) fail("parallel_threads must be >= 1");
  if (!(reward_scale >= 0.0)) fail("reward_scale must be >= 0");
  if (episode_length < 1) fail("episode_length must be >= 1");
  if (chunk_length < 1 || episode_length % chunk_length != 0) {
    fail("chunk_length must divide episode_length");
  }
  if (!(count_bonus_alpha >= 0.0)) fail("count_bonus_alpha must be >= 0");
  if (hidden < 1 || hidden_layers < 0) fail("bad network shape");
  if (recurrent && hidden_layers < 1) fail("recurrent networks need a hidden layer");
  if (!(input_scale > 0.0)) fail("input_scale must be > 0");
}

double LinearSchedule(double lr0, int64_t t, int64_t total) {
  if (total <= 0) return lr0;
  const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(total);
  return lr0 * std::max(0.0, frac);
}

// --- Agent ---------------------------------------------------------------------

namespace {

nn::Architecture PolicyArch(const AgentShape& s, const PpoConfig& cfg) {
  nn::Architecture a;
  a.input_dim = s.obs_dim;
  a.hidden = cfg.hidden;
  a.hidden_layers = cfg.hidden_layers;
  a.recurrent = cfg.recurrent;
  a.output_dim = s.num_actions;
  a.activation = cfg.activation;
  a.input_scale = cfg.input_scale;
  a.output_gain = cfg.policy_output_gain;
  return a;
}

nn::Architecture ValueArch(const AgentShape& s, const PpoConfig& cfg) {
  nn::Architecture a = PolicyArch(s, cfg);
  a.input_dim = s.value_input_dim;
  a.output_dim = s.value_heads;
  a.output_gain = 1.0;
  return a;
}

}  // namespace

Agent::Agent(const AgentShape& shape, const PpoConfig& cfg, uint64_t seed)
    : shape_(shape) {
  if (shape.obs_dim < 1 || shape.value_input_dim < 1 || shape.num_actions < 2 ||
      shape.value_heads < 1) {
    throw std::invalid_argument("invalid agent shape");
  }
  policy_ = nn::Network(params, "pi", PolicyArch(shape, cfg));
  value_ = nn::Network(params, "v", ValueArch(shape, cfg));
  Rng rng(seed);
  policy_.Initialize(params, rng);
  value_.Initialize(params, rng);
  if (cfg.uniform_initial_policy) {
    if (shape.num_actions != 2) {
      throw std::invalid_argument("uniform initial policy needs two actions");
    }
    const double theta = std::clamp(rng.Uniform(), 1e-4, 1.0 - 1e-4);
    auto b = params.Mat(params.FindSlice("pi/head/b"));
    b(0, 0) = std::log(theta);
    b(1, 0) = std::log(1.0 - theta);
    // The head weights are zeroed so the initial policy is exactly theta.
    params.Mat(params.FindSlice("pi/head/W")).setZero();
  }
}

nn::Checkpoint Agent::ToCheckpoint() const {
  nn::Checkpoint ck;
  ck.networks["pi"] = policy_.arch();
  ck.networks["v"] = value_.arch();
  ck.params = params;
  ck.optimizer = adam;
  ck.meta["obs_dim"] = std::to_string(shape_.obs_dim);
  ck.meta["value_input_dim"] = std::to_string(shape_.value_input_dim);
  ck.meta["num_actions"] = std::to_string(shape_.num_actions);
  ck.meta["value_heads"] = std::to_string(shape_.value_heads);
  return ck;
}

Agent Agent::FromCheckpoint(const nn::Checkpoint& ck) {
  auto pi = ck.networks.find("pi");
  auto v = ck.networks.find("v");
  if (pi == ck.networks.end() || v == ck.networks.end()) {
    throw std::runtime_error("checkpoint lacks pi/v networks");
  }
  Agent a;
  a.shape_.obs_dim = pi->second.input_dim;
  a.shape_.num_actions = pi->second.output_dim;
  a.shape_.value_input_dim = v->second.input_dim;
  a.shape_.value_heads = v->second.output_dim;
  a.policy_ = nn::Network(a.params, "pi", pi->second);
  a.value_ = nn::Network(a.params, "v", v->second);
  if (!a.params.SameLayout(ck.params)) {
    throw std::runtime_error("checkpoint parameter layout mismatch");
  }
  a.params = ck.params;
  a.adam = ck.optimizer;
  return a;
}

// --- opponents --------------------------------------------------------------------

namespace {

int SampleLogits(const Eigen::Ref<const Vector>& logits, Rng& rng, double* logp) {
  const double mx = logits.maxCoeff();
  Vector p = (logits.array() - mx).exp();
  const double z = p.sum();
  p /= z;
  const int a = rng.Categorical(std::span<const double>(p.data(), p.size()));
  if (logp) *logp = logits[a] - mx - std::log(z);
  return a;
}

}  // namespace

FrozenPolicy::FrozenPolicy(std::string label, const Agent& agent)
    : label_(std::move(label)), params_(agent.params), policy_(agent.policy()) {}

void FrozenPolicy::Begin(int threads) {
  hidden_ = Matrix::Zero(policy_.hidden_size(), threads);
}

void FrozenPolicy::Act(const Matrix& obs, const std::vector<int>& cols,
                       const std::vector<uint8_t>& episode_start,
                       std::vector<Rng>& rngs, std::vector<int>& actions) {
  if (cols.empty()) return;
  const int k = static_cast<int>(cols.size());
  Matrix x(obs.rows(), k);
  for (int j = 0; j < k; ++j) x.col(j) = obs.col(cols[j]);
  nn::ForwardPass pass;
  if (policy_.recurrent()) {
    Matrix h(hidden_.rows(), k);
    nn::Array reset(1, k);
    for (int j = 0; j < k; ++j) {
      h.col(j) = hidden_.col(cols[j]);
      reset(0, j) = episode_start[cols[j]] ? 1.0 : 0.0;
    }
    pass = policy_.Forward(params_, x, 1, k, &h, &reset);
    for (int j = 0; j < k; ++j) hidden_.col(cols[j]) = pass.final_hidden.col(j);
  } else {
    pass = policy_.Forward(params_, x, 1, k);
  }
  for (int j = 0; j < k; ++j) {
    actions[cols[j]] = SampleLogits(pass.output.col(j), rngs[cols[j]], nullptr);
  }
}

void OpponentSet::Add(std::shared_ptr<Opponent> opponent, double weight) {
  if (!opponent) throw std::invalid_argument("null opponent");
  if (!(weight > 0.0)) throw std::invalid_argument("opponent weight must be > 0");
  members_.push_back(std::move(opponent));
  weights_.push_back(weight);
}

int OpponentSet::Sample(Rng& rng) const {
  if (members_.empty()) throw std::invalid_argument("empty opponent set");
  return rng.Categorical(weights_);
}

// --- count bonus ---------------------------------------------------------------------

size_t VisitCounter::KeyHash::operator()(const std::vector<double>& v) const {
  uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (double x : v) {
    uint64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    h = MixSeed(h ^ bits);
  }
  return static_cast<size_t>(h);
}

double VisitCounter::Bonus(const std::vector<double>& obs) {
  const int64_t n = ++counts_[obs];
  return alpha_ / static_cast<double>(n);
}

int64_t VisitCounter::Count(const std::vector<double>& obs) const {
  auto it = counts_.find(obs);
  return it == counts_.end() ? 0 : it->second;
}

double count_bonus(VisitCounter& counter, const std::vector<double>& obs) {
  return counter.Bonus(obs);
}

// --- GAE ---------------------------------------------------------------------------

void compute_gae(RolloutBuffer& buf, double gamma, double lambda) {
  const int T = buf.steps;
  const int B = buf.threads;
  if (T < 1 || B < 1) throw std::invalid_argument("empty buffer");
  if (buf.rewards.size() != static_cast<Eigen::Index>(T) * B ||
      buf.values.size() != static_cast<Eigen::Index>(T + 1) * B ||
      buf.dones.size() != buf.rewards.size()) {
    throw std::invalid_argument("buffer shape mismatch");
  }
  buf.advantages.resize(static_cast<Eigen::Index>(T) * B);
  for (int b = 0; b < B; ++b) {
    double gae = 0.0;
    for (int t = T - 1; t >= 0; --t) {
      const Eigen::Index i = static_cast<Eigen::Index>(t) * B + b;
      const double live = 1.0 - buf.dones[i];
      const double delta =
          buf.rewards[i] + gamma * live * buf.values[i + B] - buf.values[i];
      gae = delta + gamma * lambda * live * gae;
      buf.advantages[i] = gae;
    }
  }
  buf.returns = buf.advantages + buf.values.head(static_cast<Eigen::Index>(T) * B);
}

std::vector<double> GaeAdvantages(const std::vector<double>& rewards,
                                  const std::vector<double>& values,
                                  const std::vector<double>& dones,
                                  double gamma, double lambda) {
  RolloutBuffer buf;
  buf.steps = static_cast<int>(rewards.size());
  buf.threads = 1;
  if (values.size() != rewards.size() + 1 || dones.size() != rewards.size()) {
    throw std::invalid_argument("buffer shape mismatch");
  }
  buf.rewards = Eigen::Map<const Vector>(rewards.data(), rewards.size());
  buf.values = Eigen::Map<const Vector>(values.data(), values.size());
  buf.dones = Eigen::Map<const Vector>(dones.data(), dones.size());
  compute_gae(buf, gamma, lambda);
  return std::vector<double>(buf.advantages.data(),
                             buf.advantages.data() + buf.advantages.size());
}

// --- collection ------------------------------------------------------------------------

double EpisodeStats::MeanReturn(int agent) const {
  if (episodes == 0) return 0.0;
  return return_sum.at(agent) / static_cast<double>(episodes);
}

double EpisodeStats::MeanEvent(std::string_view name) const {
  if (episodes == 0) return 0.0;
  return events.Get(name) / static_cast<double>(episodes);
}

std::vector<double> ValueInput(const std::vector<std::vector<double>>& obs,
                               int slot, int identity, int identities) {
  std::vector<double> v(obs.at(slot));
  for (size_t j = 0; j < obs.size(); ++j) {
    if (static_cast<int>(j) != slot) v.insert(v.end(), obs[j].begin(), obs[j].end());
  }
  if (identities > 0) {
    if (identity < 0 || identity >= identities) {
      throw std::invalid_argument("identity index out of range");
    }
    for (int k = 0; k < identities; ++k) v.push_back(k == identity ? 1.0 : 0.0);
  }
  return v;
}

Rollout collect_rollouts(Controllers& who, const envs::EnvSpec& spec,
                         const envs::RewardWeights& w, const CollectOptions& opts,
                         uint64_t seed) {
  const int n = spec.n_agents;
  const int B = opts.threads;
  const int T = opts.horizon;
  if (B < 1 || T < 1) throw std::invalid_argument("threads and horizon must be >= 1");
  if (static_cast<int>(who.learners.size()) != n) {
    throw std::invalid_argument("one controller entry per agent slot required");
  }
  if (opts.record && !opts.auto_reset) {
    throw std::invalid_argument("recording requires auto_reset");
  }
  OpponentSet* opp = who.opponents;
  if (opp) {
    if (opp->size() == 0) throw std::invalid_argument("empty opponent set");
    if (who.opponent_slot < 0 || who.opponent_slot >= n ||
        who.learners[who.opponent_slot] != nullptr) {
      throw std::invalid_argument("opponent slot must be free of learners");
    }
  }
  for (int i = 0; i < n; ++i) {
    if (!who.learners[i] && !(opp && i == who.opponent_slot)) {
      throw std::invalid_argument("agent slot without a controller");
    }
  }
  const int identities = opp && who.identity_critic ? opp->size() : 0;
  const envs::EnvKind kind = spec.kind;

  std::vector<std::unique_ptr<envs::Environment>> env(B);
  std::vector<Rng> arng(B);
  for (int b = 0; b < B; ++b) {
    env[b] = envs::Environment::Make(spec);
    env[b]->Reset(DeriveSeed(seed, 2 * static_cast<uint64_t>(b)));
    arng[b] = Rng(DeriveSeed(seed, 2 * static_cast<uint64_t>(b) + 1));
  }
  if (opp) {
    for (int k = 0; k < opp->size(); ++k) opp->at(k).Begin(B);
  }

  Rollout out;
  out.buffers.resize(n);
  std::vector<Matrix> hp(n), hv(n);
  for (int i = 0; i < n; ++i) {
    Agent* a = who.learners[i];
    if (!a) continue;
    if (a->shape().obs_dim != ObsDim(spec)) {
      throw std::invalid_argument("agent observation size does not match the game");
    }
    if (a->recurrent()) {
      hp[i] = Matrix::Zero(a->hidden(), B);
      hv[i] = Matrix::Zero(a->value().hidden_size(), B);
    }
    // The critic only runs when recording.
    if (!opts.record) continue;
    if (a->shape().value_input_dim != ObsDim(spec) * n + identities) {
      throw std::invalid_argument("agent value input does not match the game");
    }
    RolloutBuffer& buf = out.buffers[i];
    buf.steps = T;
    buf.threads = B;
    buf.chunk_length = T;
    buf.obs.resize(a->shape().obs_dim, static_cast<Eigen::Index>(T) * B);
    buf.value_input.resize(a->shape().value_input_dim,
                           static_cast<Eigen::Index>(T + 1) * B);
    buf.actions.assign(static_cast<size_t>(T) * B, 0);
    buf.logp.resize(static_cast<Eigen::Index>(T) * B);
    buf.rewards.resize(static_cast<Eigen::Index>(T) * B);
    buf.env_rewards.resize(static_cast<Eigen::Index>(T) * B);
    buf.dones.setZero(static_cast<Eigen::Index>(T) * B);
    buf.episode_start.setZero(T, B);
    buf.values.resize(static_cast<Eigen::Index>(T + 1) * B);
    buf.heads.assign(static_cast<size_t>(T) * B, 0);
    buf.bootstrap_heads.assign(B, 0);
  }

  EpisodeStats& stats = out.stats;
  stats.return_sum.assign(n, 0.0);
  stats.events = envs::EventCounters(kind);
  std::vector<std::vector<double>> ep_return(B, std::vector<double>(n, 0.0));
  std::vector<envs::EventCounters> ep_events(B, envs::EventCounters(kind));
  std::vector<uint8_t> start(B, 1), active(B, 1);
  std::vector<int> opponent_of(B, -1);
  std::vector<Trajectory> running(opts.keep_trajectories ? B : 0);
  if (opts.keep_trajectories) {
    for (int b = 0; b < B; ++b) {
      running[b].thread = b;
      running[b].initial = env[b]->snapshot();
    }
  }

  const int obs_dim = ObsDim(spec);
  std::vector<std::vector<std::vector<double>>> obs(B);
  std::vector<std::vector<int>> actions(B, std::vector<int>(n, 0));
  std::vector<int> slot_actions(B, 0);

  auto observe_all = [&]() {
    for (int b = 0; b < B; ++b) {
      obs[b].resize(n);
      for (int i = 0; i < n; ++i) {
        if (active[b]) {
          obs[b][i] = env[b]->Observe(i);
        } else {
          obs[b][i].assign(obs_dim, 0.0);
        }
      }
    }
  };

  // Batched value pass for learner slot i at buffer block `col0` (T for the
  // bootstrap block). Writes values and hidden state.
  auto value_step = [&](int i, Eigen::Index col0, bool bootstrap) {
    Agent& a = *who.learners[i];
    RolloutBuffer& buf = out.buffers[i];
    Matrix x(a.shape().value_input_dim, B);
    nn::Array reset(1, B);
    for (int b = 0; b < B; ++b) {
      const int id = identities > 0 ? opponent_of[b] : 0;
      const std::vector<double> v = ValueInput(obs[b], i, id, identities);
      x.col(b) = Eigen::Map<const Vector>(v.data(), v.size());
      reset(0, b) = start[b] ? 1.0 : 0.0;
    }
    buf.value_input.middleCols(col0, B) = x;
    nn::ForwardPass pass = a.recurrent()
                               ? a.value().Forward(a.params, x, 1, B, &hv[i], &reset)
                               : a.value().Forward(a.params, x, 1, B);
    if (a.recurrent()) hv[i] = pass.final_hidden;
    for (int b = 0; b < B; ++b) {
      const int head = identities > 0 ? opponent_of[b] : 0;
      buf.values[col0 + b] = pass.output(head, b);
      if (bootstrap) {
        buf.bootstrap_heads[b] = head;
      } else {
        buf.heads[col0 + b] = head;
      }
    }
  };

  for (int t = 0; t < T; ++t) {
    observe_all();
    if (opp) {
      for (int b = 0; b < B; ++b) {
        if (start[b] && active[b]) opponent_of[b] = opp->Sample(arng[b]);
      }
    }
    const Eigen::Index col0 = static_cast<Eigen::Index>(t) * B;

    for (int i = 0; i < n; ++i) {
      Agent* a = who.learners[i];
      if (!a) continue;
      Matrix x(obs_dim, B);
      nn::Array reset(1, B);
      for (int b = 0; b < B; ++b) {
        x.col(b) = Eigen::Map<const Vector>(obs[b][i].data(), obs_dim);
        reset(0, b) = start[b] ? 1.0 : 0.0;
      }
      if (opts.record) {
        RolloutBuffer& buf = out.buffers[i];
        buf.obs.middleCols(col0, B) = x;
        buf.episode_start.row(t) = reset;
      }
      nn::ForwardPass pass = a->recurrent()
                                 ? a->policy().Forward(a->params, x, 1, B, &hp[i], &reset)
                                 : a->policy().Forward(a->params, x, 1, B);
      if (a->recurrent()) hp[i] = pass.final_hidden;
      for (int b = 0; b < B; ++b) {
        double lp = 0.0;
        actions[b][i] = SampleLogits(pass.output.col(b), arng[b], &lp);
        if (opts.record) {
          out.buffers[i].actions[col0 + b] = actions[b][i];
          out.buffers[i].logp[col0 + b] = lp;
        }
      }
      if (opts.record) value_step(i, col0, false);
    }

    if (opp) {
      const int s = who.opponent_slot;
      Matrix x(obs_dim, B);
      for (int b = 0; b < B; ++b) {
        x.col(b) = Eigen::Map<const Vector>(obs[b][s].data(), obs_dim);
      }
      for (int k = 0; k < opp->size(); ++k) {
        std::vector<int> cols;
        for (int b = 0; b < B; ++b) {
          if (active[b] && opponent_of[b] == k) cols.push_back(b);
        }
        opp->at(k).Act(x, cols, start, arng, slot_actions);
      }
      for (int b = 0; b < B; ++b) actions[b][s] = slot_actions[b];
    }

    for (int b = 0; b < B; ++b) {
      start[b] = 0;
      if (!active[b]) continue;
      const envs::StepResult r = env[b]->Step(actions[b], w);
      for (int i = 0; i < n; ++i) ep_return[b][i] += r.rewards[i];
      ep_events[b] += r.events;
      if (opts.record) {
        for (int i = 0; i < n; ++i) {
          if (!who.learners[i]) continue;
          RolloutBuffer& buf = out.buffers[i];
          double bonus = 0.0;
          if (opts.counters) bonus = (*opts.counters).at(i).Bonus(obs[b][i]);
          buf.env_rewards[col0 + b] = r.rewards[i];
          buf.rewards[col0 + b] = opts.reward_scale * (r.rewards[i] + bonus);
          buf.dones[col0 + b] = r.done ? 1.0 : 0.0;
        }
      }
      if (opts.keep_trajectories) {
        Frame f;
        f.snapshot = env[b]->snapshot();
        f.actions = actions[b];
        f.rewards = r.rewards;
        f.features = r.features;
        running[b].frames.push_back(std::move(f));
      }
      if (r.done) {
        ++stats.episodes;
        for (int i = 0; i < n; ++i) stats.return_sum[i] += ep_return[b][i];
        stats.events += ep_events[b];
        stats.per_episode_returns.push_back(ep_return[b]);
        const auto ev = ep_events[b].values();
        stats.per_episode_events.emplace_back(ev.begin(), ev.end());
        stats.per_episode_opponent.push_back(opp ? opponent_of[b] : -1);
        if (opts.keep_trajectories) {
          running[b].returns = ep_return[b];
          running[b].events.assign(ev.begin(), ev.end());
          out.trajectories.push_back(std::move(running[b]));
          running[b] = Trajectory{};
          running[b].thread = b;
        }
        std::fill(ep_return[b].begin(), ep_return[b].end(), 0.0);
        ep_events[b].Clear();
        if (opts.auto_reset) {
          env[b]->NewEpisode();
          start[b] = 1;
          if (opts.keep_trajectories) running[b].initial = env[b]->snapshot();
        } else {
          active[b] = 0;
        }
      }
    }
  }

  if (opts.record) {
    observe_all();
    for (int i = 0; i < n; ++i) {
      if (who.learners[i]) value_step(i, static_cast<Eigen::Index>(T) * B, true);
    }
  }
  return out;
}

// --- loss and update ------------------------------------------------------------------

namespace {

struct Gathered {
  int steps = 0;
  int batch = 0;
  Matrix obs, vin;
  nn::Array reset;
  Matrix hp0, hv0;
  std::vector<int> actions, heads;
  Vector logp_old, adv, ret;
};

Gathered Gather(const Agent& agent, const std::vector<ChunkRef>& chunks) {
  Gathered g;
  const RolloutBuffer& first = *chunks.front().buffer;
  const int L = first.chunk_length;
  const int M = static_cast<int>(chunks.size());
  g.steps = L;
  g.batch = M;
  const Eigen::Index N = static_cast<Eigen::Index>(L) * M;
  g.obs.resize(first.obs.rows(), N);
  g.vin.resize(first.value_input.rows(), N);
  g.reset.resize(L, M);
  g.actions.resize(N);
  g.heads.resize(N);
  g.logp_old.resize(N);
  g.adv.resize(N);
  g.ret.resize(N);
  const bool rec = agent.recurrent();
  if (rec) {
    g.hp0.resize(agent.hidden(), M);
    g.hv0.resize(agent.value().hidden_size(), M);
  }
  for (int m = 0; m < M; ++m) {
    const RolloutBuffer& buf = *chunks[m].buffer;
    if (buf.chunk_length != L) throw std::invalid_argument("mixed chunk lengths");
    if (buf.advantages.size() != buf.rewards.size()) {
      throw std::invalid_argument("advantages missing; run compute_gae first");
    }
    const int B = buf.threads;
    const int c = chunks[m].chunk / B;
    const int b = chunks[m].chunk % B;
    if (c < 0 || c >= buf.num_chunks()) throw std::invalid_argument("chunk out of range");
    if (rec) {
      g.hp0.col(m) = buf.policy_h0.at(c).col(b);
      g.hv0.col(m) = buf.value_h0.at(c).col(b);
    }
    for (int tau = 0; tau < L; ++tau) {
      const int t = c * L + tau;
      const Eigen::Index src = static_cast<Eigen::Index>(t) * B + b;
      const Eigen::Index dst = static_cast<Eigen::Index>(tau) * M + m;
      g.obs.col(dst) = buf.obs.col(src);
      g.vin.col(dst) = buf.value_input.col(src);
      g.reset(tau, m) = buf.episode_start(t, b);
      g.actions[dst] = buf.actions[src];
      g.heads[dst] = buf.heads[src];
      g.logp_old[dst] = buf.logp[src];
      g.adv[dst] = buf.advantages[src];
      g.ret[dst] = buf.returns[src];
    }
  }
  return g;
}

}  // namespace

MinibatchResult ppo_loss(const Agent& agent, const std::vector<ChunkRef>& chunks,
                         const PpoConfig& cfg, bool train_policy,
                         bool train_value) {
  if (chunks.empty()) throw std::invalid_argument("empty minibatch");
  Gathered g = Gather(agent, chunks);
  const Eigen::Index N = g.adv.size();
  const double inv_n = 1.0 / static_cast<double>(N);
  const bool rec = agent.recurrent();

  Vector adv = g.adv;
  if (cfg.normalize_advantages && N > 1) {
    const double mean = adv.mean();
    const double var = (adv.array() - mean).square().sum() / static_cast<double>(N - 1);
    adv = (adv.array() - mean) / (std::sqrt(var) + 1e-8);
  }

  MinibatchResult res;
  nn::LossGraph graph(agent.params);

  {
    nn::ForwardPass pass =
        rec ? agent.policy().Forward(agent.params, g.obs, g.steps, g.batch, &g.hp0, &g.reset)
            : agent.policy().Forward(agent.params, g.obs, g.steps, g.batch);
    const Matrix logp = nn::LogSoftmax(pass.output);
    Matrix d = Matrix::Zero(logp.rows(), N);
    double pg = 0.0, ent = 0.0, kl = 0.0, clipped = 0.0;
    for (Eigen::Index j = 0; j < N; ++j) {
      const Vector p = logp.col(j).array().exp();
      const double h = -(p.array() * logp.col(j).array()).sum();
      ent += h;
      const int a = g.actions[j];
      const double log_ratio = logp(a, j) - g.logp_old[j];
      const double ratio = std::exp(log_ratio);
      kl += (ratio - 1.0) - log_ratio;
      const double s1 = ratio * adv[j];
      const double clipped_ratio = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
      const double s2 = clipped_ratio * adv[j];
      pg += std::min(s1, s2);
      if (clipped_ratio != ratio) clipped += 1.0;
      // d(-min(s1, s2)) / d logp_a; zero when the clipped branch is active.
      const double dlogp_a = s1 <= s2 ? -ratio * adv[j] * inv_n : 0.0;
      d.col(j) = -dlogp_a * p;
      d(a, j) += dlogp_a;
      // -c_e * H: dH/dz_k = -p_k (log p_k + H).
      d.col(j).array() +=
          cfg.entropy_coeff * inv_n * p.array() * (logp.col(j).array() + h);
    }
    res.stats.policy_loss = -pg * inv_n;
    res.stats.entropy = ent * inv_n;
    res.stats.approx_kl = kl * inv_n;
    res.stats.clip_fraction = clipped * inv_n;
    const double value = res.stats.policy_loss - cfg.entropy_coeff * res.stats.entropy;
    res.loss += value;
    if (train_policy) graph.AddNetworkTerm(agent.policy(), std::move(pass), std::move(d), value);
  }

  {
    nn::ForwardPass pass =
        rec ? agent.value().Forward(agent.params, g.vin, g.steps, g.batch, &g.hv0, &g.reset)
            : agent.value().Forward(agent.params, g.vin, g.steps, g.batch);
    Matrix d = Matrix::Zero(pass.output.rows(), N);
    double vl = 0.0;
    for (Eigen::Index j = 0; j < N; ++j) {
      const int head = g.heads[j];
      if (head < 0 || head >= pass.output.rows()) {
        throw std::invalid_argument("invalid value head index");
      }
      const double err = pass.output(head, j) - g.ret[j];
      vl += err * err;
      d(head, j) = cfg.value_loss_coeff * 2.0 * err * inv_n;
    }
    res.stats.value_loss = vl * inv_n;
    const double value = cfg.value_loss_coeff * res.stats.value_loss;
    res.loss += value;
    if (train_value) graph.AddNetworkTerm(agent.value(), std::move(pass), std::move(d), value);
  }
  res.stats.minibatches = 1;
  res.grad = graph.empty() ? agent.params.ZerosLike() : graph.Backward();
  return res;
}

namespace {

// Chunk-start hidden states of a recurrent agent, from one monolithic pass
// over the stored episodes.
void ChunkStartStates(const Agent& agent, RolloutBuffer& buf) {
  const int T = buf.steps;
  const int B = buf.threads;
  const int L = buf.chunk_length;
  const Matrix x = buf.obs;
  const Matrix vin = buf.value_input.leftCols(static_cast<Eigen::Index>(T) * B);
  const nn::ForwardPass pp = agent.policy().Forward(agent.params, x, T, B, nullptr, &buf.episode_start);
  const nn::ForwardPass vp = agent.value().Forward(agent.params, vin, T, B, nullptr, &buf.episode_start);
  buf.policy_h0.assign(T / L, Matrix());
  buf.value_h0.assign(T / L, Matrix());
  buf.policy_h0[0] = Matrix::Zero(agent.hidden(), B);
  buf.value_h0[0] = Matrix::Zero(agent.value().hidden_size(), B);
  for (int c = 1; c < T / L; ++c) {
    const Eigen::Index col = static_cast<Eigen::Index>(c * L - 1) * B;
    buf.policy_h0[c] = pp.features.middleCols(col, B);
    buf.value_h0[c] = vp.features.middleCols(col, B);
  }
}

}  // namespace

void PrepareChunks(const Agent& agent, RolloutBuffer& buf, int chunk_length) {
  if (chunk_length < 1 || buf.steps % chunk_length != 0) {
    throw std::invalid_argument("chunk_length must divide the horizon");
  }
  buf.chunk_length = chunk_length;
  if (agent.recurrent()) ChunkStartStates(agent, buf);
}

LossStats ppo_update(Agent& agent, const std::vector<RolloutBuffer*>& buffers,
                     const PpoConfig& cfg, const UpdateOptions& opts) {
  cfg.Validate();
  if (buffers.empty()) throw std::invalid_argument("no buffers");
  for (RolloutBuffer* b : buffers) PrepareChunks(agent, *b, cfg.chunk_length);
  std::vector<ChunkRef> all;
  for (const RolloutBuffer* b : buffers) {
    const int total = b->num_chunks() * b->threads;
    for (int k = 0; k < total; ++k) all.push_back({b, k});
  }
  const std::string_view prefix =
      opts.train_policy && opts.train_value ? "" : (opts.train_policy ? "pi/" : "v/");
  if (!opts.train_policy && !opts.train_value) return LossStats{};
  nn::AdamConfig adam_cfg;
  adam_cfg.epsilon = cfg.adam_epsilon;

  LossStats total;
  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    Rng shuffle(opts.shuffle_seed, static_cast<uint64_t>(epoch));
    for (size_t i = all.size(); i > 1; --i) {
      std::swap(all[i - 1], all[shuffle.UniformInt(static_cast<int>(i))]);
    }
    for (size_t begin = 0; begin < all.size();
         begin += static_cast<size_t>(cfg.minibatch_chunks)) {
      const size_t end = std::min(all.size(), begin + cfg.minibatch_chunks);
      const std::vector<ChunkRef> mb(all.begin() + begin, all.begin() + end);
      MinibatchResult r = ppo_loss(agent, mb, cfg, opts.train_policy, opts.train_value);
      if (cfg.grad_clip > 0.0) nn::ClipGradNorm(r.grad, cfg.grad_clip, prefix);
      nn::AdamStep(agent.params, r.grad, agent.adam, opts.learning_rate, adam_cfg, prefix);
      total.policy_loss += r.stats.policy_loss;
      total.value_loss += r.stats.value_loss;
      total.entropy += r.stats.entropy;
      total.approx_kl += r.stats.approx_kl;
      total.clip_fraction += r.stats.clip_fraction;
      ++total.minibatches;
    }
  }
  if (total.minibatches > 0) {
    const double k = total.minibatches;
    total.policy_loss /= k;
    total.value_loss /= k;
    total.entropy /= k;
    total.approx_kl /= k;
    total.clip_fraction /= k;
  }
  return total;
}

// --- metrics -----------------------------------------------------------------------------

std::vector<std::string> MetricsColumns(envs::EnvKind kind) {
  std::vector<std::string> cols = {"update_index",
                                   "env_steps",
                                   "population_env_steps",
                                   "mean_episode_return_agent0",
                                   "mean_episode_return_agent1",
                                   "mean_episode_return_total"};
  for (const std::string& e : envs::EventCounters::Vocabulary(kind)) cols.push_back(e);
  for (const char* c : {"policy_loss", "value_loss", "entropy", "lr"}) cols.push_back(c);
  return cols;
}

std::string MetricsHeader(envs::EnvKind kind) {
  std::string h;
  for (const std::string& c : MetricsColumns(kind)) {
    if (!h.empty()) h += ',';
    h += c;
  }
  return h;
}

std::string MetricsLine(const MetricsRow& row) {
  std::ostringstream out;
  out.precision(10);
  out << row.update_index << ',' << row.env_steps << ',' << row.population_env_steps
      << ',' << row.mean_return_agent0 << ',' << row.mean_return_agent1 << ','
      << row.mean_return_total;
  for (double e : row.events) out << ',' << e;
  out << ',' << row.policy_loss << ',' << row.value_loss << ',' << row.entropy << ','
      << row.lr;
  return out.str();
}

MetricsWriter::MetricsWriter(const std::string& path, envs::EnvKind kind) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot write metrics " + path);
  out_.reset(f, [](std::FILE* p) { std::fclose(p); });
  std::fprintf(f, "# rpg-metrics schema %d env=%s\n%s\n", kMetricsSchemaVersion,
               envs::EnvKindName(kind).c_str(), MetricsHeader(kind).c_str());
  std::fflush(f);
}

void MetricsWriter::Write(const MetricsRow& row) {
  if (!out_) return;
  std::fprintf(out_.get(), "%s\n", MetricsLine(row).c_str());
  std::fflush(out_.get());
}

// --- training loop ------------------------------------------------------------------

AgentShape ShapeFor(const envs::EnvSpec& env, int identities) {
  AgentShape s;
  s.obs_dim = envs::ObsDim(env);
  s.value_input_dim = s.obs_dim * env.n_agents + identities;
  s.num_actions = envs::NumActions(env.kind);
  s.value_heads = std::max(1, identities);
  return s;
}

TrainResult train_ppo(const TrainSpec& spec) {
  const PpoConfig& cfg = spec.cfg;
  cfg.Validate();
  if (cfg.episode_length != spec.env.episode_length) {
    throw std::invalid_argument("ppo episode_length must match the env");
  }
  if (spec.total_env_steps < 0) throw std::invalid_argument("negative step budget");
  const int n = spec.env.n_agents;
  const int B = cfg.parallel_threads;
  const int T = cfg.episode_length;
  const int64_t per_update = static_cast<int64_t>(B) * T;
  const int64_t updates =
      spec.total_env_steps == 0 ? 0 : std::max<int64_t>(1, spec.total_env_steps / per_update);

  TrainResult res;
  const int n_agents_owned = cfg.shared_parameters ? 1 : n;
  if (!spec.initial_agents.empty()) {
    if (static_cast<int>(spec.initial_agents.size()) != n_agents_owned) {
      throw std::invalid_argument("initial agent count mismatch");
    }
    res.agents = spec.initial_agents;
  } else {
    const AgentShape shape = ShapeFor(spec.env);
    for (int i = 0; i < n_agents_owned; ++i) {
      res.agents.emplace_back(shape, cfg, DeriveSeed(spec.seed, 1000 + i));
    }
  }

  Controllers who;
  for (int i = 0; i < n; ++i) {
    who.learners.push_back(&res.agents[cfg.shared_parameters ? 0 : i]);
  }
  std::vector<VisitCounter> counters;
  if (cfg.count_bonus_alpha > 0.0) counters.assign(n, VisitCounter(cfg.count_bonus_alpha));

  MetricsWriter writer;
  if (!spec.metrics_path.empty()) writer = MetricsWriter(spec.metrics_path, spec.env.kind);

  const int64_t total_steps = updates * per_update;
  for (int64_t u = 0; u < updates; ++u) {
    const int64_t done_steps = u * per_update;
    const double lr = cfg.anneal_lr ? LinearSchedule(cfg.learning_rate, done_steps, total_steps)
                                    : cfg.learning_rate;
    CollectOptions opts;
    opts.threads = B;
    opts.horizon = T;
    opts.reward_scale = cfg.reward_scale;
    opts.counters = counters.empty() ? nullptr : &counters;
    Rollout ro = collect_rollouts(who, spec.env, spec.weights, opts,
                                  DeriveSeed(spec.seed, 0x10000000ULL + u));
    LossStats ls;
    for (int k = 0; k < n_agents_owned; ++k) {
      std::vector<RolloutBuffer*> bufs;
      for (int i = 0; i < n; ++i) {
        if ((cfg.shared_parameters ? 0 : i) != k) continue;
        compute_gae(ro.buffers[i], cfg.gamma, cfg.gae_lambda);
        bufs.push_back(&ro.buffers[i]);
      }
      UpdateOptions uo;
      uo.train_policy = !spec.freeze_policy;
      uo.learning_rate = lr;
      uo.shuffle_seed = DeriveSeed(spec.seed, 0x20000000ULL + u * 64 + k);
      const LossStats s = ppo_update(res.agents[k], bufs, cfg, uo);
      ls.policy_loss += s.policy_loss / n_agents_owned;
      ls.value_loss += s.value_loss / n_agents_owned;
      ls.entropy += s.entropy / n_agents_owned;
    }

    MetricsRow row;
    row.update_index = u;
    row.env_steps = done_steps + per_update;
    row.population_env_steps =
        spec.population_step_offset + row.env_steps * spec.population_step_multiplier;
    row.mean_return_agent0 = ro.stats.MeanReturn(0);
    row.mean_return_agent1 = ro.stats.MeanReturn(1);
    for (int i = 0; i < n; ++i) row.mean_return_total += ro.stats.MeanReturn(i);
    const auto names = envs::EventCounters::Vocabulary(spec.env.kind);
    for (const std::string& e : names) row.events.push_back(ro.stats.MeanEvent(e));
    row.policy_loss = ls.policy_loss;
    row.value_loss = ls.value_loss;
    row.entropy = ls.entropy;
    row.lr = lr;
    writer.Write(row);
    if (spec.on_update) spec.on_update(row);
    res.rows.push_back(std::move(row));
  }
  res.env_steps = total_steps;
  if (cfg.shared_parameters) {
    while (static_cast<int>(res.agents.size()) < n) res.agents.push_back(res.agents[0]);
  }
  return res;
}

}  // namespace rpg::ppo
