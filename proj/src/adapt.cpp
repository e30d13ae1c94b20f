#include "rpg/adapt.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "rpg/rng.hpp"

namespace rpg::adapt {

namespace fs = std::filesystem;

std::string ScriptedKindName(ScriptedKind kind) {
  switch (kind) {
    case ScriptedKind::kStagAlways: return "stag";
    case ScriptedKind::kHareAlways: return "hare";
    case ScriptedKind::kTitForTat: return "tft";
    case ScriptedKind::kRandomUniform: return "random";
  }
  return "?";
}

ScriptedKind ParseScriptedKind(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "stag" || s == "stagalways") return ScriptedKind::kStagAlways;
  if (s == "hare" || s == "harealways") return ScriptedKind::kHareAlways;
  if (s == "tft" || s == "titfortat") return ScriptedKind::kTitForTat;
  if (s == "random" || s == "randomuniform") return ScriptedKind::kRandomUniform;
  throw std::invalid_argument("unknown scripted opponent: " + std::string(name));
}

void ScriptedOpponent::Act(const ppo::Matrix& obs, const std::vector<int>& cols,
                           const std::vector<uint8_t>&, std::vector<Rng>& rngs,
                           std::vector<int>& actions) {
  for (int b : cols) {
    switch (kind_) {
      case ScriptedKind::kStagAlways: actions[b] = envs::kStag; break;
      case ScriptedKind::kHareAlways: actions[b] = envs::kHare; break;
      case ScriptedKind::kTitForTat: {
        const double other_last = obs(1, b);
        actions[b] = other_last < 0 ? envs::kStag : static_cast<int>(other_last);
        break;
      }
      case ScriptedKind::kRandomUniform: actions[b] = rngs[b].UniformInt(2); break;
    }
  }
}

std::shared_ptr<ppo::Opponent> make_scripted(ScriptedKind kind, envs::EnvKind env) {
  if (env != envs::EnvKind::kIteratedStagHunt) {
    throw std::invalid_argument("scripted opponents exist only for the iterated stag hunt");
  }
  return std::make_shared<ScriptedOpponent>(kind);
}

namespace {

void CheckTwoPlayer(const envs::EnvSpec& env, int adaptive_slot) {
  if (env.n_agents != 2) throw std::invalid_argument("adaptive training needs a two-agent game");
  if (adaptive_slot != 0 && adaptive_slot != 1) {
    throw std::invalid_argument("adaptive_slot must be 0 or 1");
  }
}

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

AdaptiveResult train_adaptive(ppo::OpponentSet& opponents, const AdaptiveSpec& spec) {
  if (opponents.size() == 0) throw std::invalid_argument("empty opponent set");
  CheckTwoPlayer(spec.env, spec.adaptive_slot);
  ppo::PpoConfig cfg = spec.cfg;
  cfg.recurrent = true;
  cfg.shared_parameters = false;
  cfg.Validate();
  if (cfg.episode_length != spec.env.episode_length) {
    throw std::invalid_argument("ppo episode_length must match the env");
  }
  const int k_opp = opponents.size();
  const int B = cfg.parallel_threads;
  const int T = cfg.episode_length;
  const int64_t per_update = static_cast<int64_t>(B) * T;
  const int64_t updates =
      spec.total_env_steps <= 0 ? 0 : std::max<int64_t>(1, spec.total_env_steps / per_update);
  const int64_t total_steps = updates * per_update;

  AdaptiveResult res;
  res.agent = ppo::Agent(ppo::ShapeFor(spec.env, k_opp), cfg, DeriveSeed(spec.seed, 1000));
  res.opponent_episodes.assign(k_opp, 0);

  ppo::Controllers who;
  who.learners = {nullptr, nullptr};
  who.learners[spec.adaptive_slot] = &res.agent;
  who.opponents = &opponents;
  who.opponent_slot = 1 - spec.adaptive_slot;
  who.identity_critic = true;

  ppo::MetricsWriter writer;
  if (!spec.metrics_path.empty()) writer = ppo::MetricsWriter(spec.metrics_path, spec.env.kind);
  std::vector<ppo::VisitCounter> counters;
  if (cfg.count_bonus_alpha > 0.0) counters.assign(2, ppo::VisitCounter(cfg.count_bonus_alpha));

  for (int64_t u = 0; u < updates; ++u) {
    const int64_t done_steps = u * per_update;
    const double lr = cfg.anneal_lr ? ppo::LinearSchedule(cfg.learning_rate, done_steps, total_steps)
                                    : cfg.learning_rate;
    ppo::CollectOptions opts;
    opts.threads = B;
    opts.horizon = T;
    opts.reward_scale = cfg.reward_scale;
    opts.counters = counters.empty() ? nullptr : &counters;
    ppo::Rollout ro = ppo::collect_rollouts(who, spec.env, spec.weights, opts,
                                            DeriveSeed(spec.seed, 0x10000000ULL + u));
    for (int o : ro.stats.per_episode_opponent) ++res.opponent_episodes.at(o);
    if (spec.on_rollout) spec.on_rollout(ro);

    ppo::RolloutBuffer& buf = ro.buffers[spec.adaptive_slot];
    ppo::compute_gae(buf, cfg.gamma, cfg.gae_lambda);
    ppo::UpdateOptions uo;
    uo.learning_rate = lr;
    uo.shuffle_seed = DeriveSeed(spec.seed, 0x20000000ULL + u);
    const ppo::LossStats ls = ppo::ppo_update(res.agent, {&buf}, cfg, uo);

    ppo::MetricsRow row;
    row.update_index = u;
    row.env_steps = done_steps + per_update;
    row.population_env_steps = row.env_steps;
    row.mean_return_agent0 = ro.stats.MeanReturn(0);
    row.mean_return_agent1 = ro.stats.MeanReturn(1);
    row.mean_return_total = row.mean_return_agent0 + row.mean_return_agent1;
    for (const std::string& e : envs::EventCounters::Vocabulary(spec.env.kind)) {
      row.events.push_back(ro.stats.MeanEvent(e));
    }
    row.policy_loss = ls.policy_loss;
    row.value_loss = ls.value_loss;
    row.entropy = ls.entropy;
    row.lr = lr;
    writer.Write(row);
    if (spec.on_update) spec.on_update(row);
    res.rows.push_back(std::move(row));
  }
  res.env_steps = total_steps;
  return res;
}

std::vector<OpponentStats> evaluate_adaptive(
    const ppo::Agent& agent, const std::vector<std::shared_ptr<ppo::Opponent>>& opponents,
    const envs::EnvSpec& env, const envs::RewardWeights& w, int episodes, uint64_t seed,
    int adaptive_slot) {
  CheckTwoPlayer(env, adaptive_slot);
  if (episodes <= 0) throw std::invalid_argument("episodes must be positive");
  const bool iterated = env.kind == envs::EnvKind::kIteratedStagHunt;
  std::vector<OpponentStats> out;
  for (size_t k = 0; k < opponents.size(); ++k) {
    ppo::Agent copy = agent;
    ppo::OpponentSet set;
    set.Add(opponents[k]);
    ppo::Controllers who;
    who.learners = {nullptr, nullptr};
    who.learners[adaptive_slot] = &copy;
    who.opponents = &set;
    who.opponent_slot = 1 - adaptive_slot;
    ppo::CollectOptions opts;
    opts.threads = episodes;
    opts.horizon = env.episode_length;
    opts.auto_reset = false;
    opts.record = false;
    const ppo::Rollout ro = ppo::collect_rollouts(who, env, w, opts, DeriveSeed(seed, k));

    OpponentStats s;
    s.label = opponents[k]->label();
    s.episodes = static_cast<int>(ro.stats.episodes);
    for (int i = 0; i < 2; ++i) {
      std::vector<double> xs;
      for (const auto& r : ro.stats.per_episode_returns) xs.push_back(r[i]);
      const auto [m, sd] = MeanStd(xs);
      s.mean_returns.push_back(m);
      s.std_returns.push_back(sd);
    }
    s.event_names = envs::EventCounters::Vocabulary(env.kind);
    for (size_t e = 0; e < s.event_names.size(); ++e) {
      std::vector<double> xs;
      for (const auto& ev : ro.stats.per_episode_events) xs.push_back(ev[e]);
      const auto [m, sd] = MeanStd(xs);
      s.mean_events.push_back(m);
      s.std_events.push_back(sd);
    }
    if (iterated) {
      namespace ev = envs::events;
      // Joint outcomes are named (agent 0 action)-(agent 1 action).
      std::vector<double> stag, hare;
      for (const auto& e : ro.stats.per_episode_events) {
        const double a0_stag = e[ev::kStagStag] + e[ev::kStagHare];
        const double a1_stag = e[ev::kStagStag] + e[ev::kHareStag];
        const double total = e[ev::kStagStag] + e[ev::kStagHare] + e[ev::kHareStag] +
                             e[ev::kHareHare];
        const double mine = adaptive_slot == 0 ? a0_stag : a1_stag;
        stag.push_back(mine);
        hare.push_back(total - mine);
      }
      std::tie(s.mean_stag, s.std_stag) = MeanStd(stag);
      std::tie(s.mean_hare, s.std_hare) = MeanStd(hare);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void WriteOpponentStatsCsv(const std::vector<OpponentStats>& stats, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "opponent,episodes,return_adaptive_mean,return_adaptive_std,return_opponent_mean,"
         "return_opponent_std,stag_mean,stag_std,hare_mean,hare_std";
  if (!stats.empty()) {
    for (const auto& n : stats[0].event_names) out << "," << n << "_mean," << n << "_std";
  }
  out << "\n";
  out.precision(10);
  for (const auto& s : stats) {
    out << s.label << "," << s.episodes;
    // Slot 0 is reported first; train_adaptive places the adaptive agent there by default.
    out << "," << s.mean_returns[0] << "," << s.std_returns[0] << "," << s.mean_returns[1]
        << "," << s.std_returns[1] << "," << s.mean_stag << "," << s.std_stag << ","
        << s.mean_hare << "," << s.std_hare;
    for (size_t e = 0; e < s.mean_events.size(); ++e) {
      out << "," << s.mean_events[e] << "," << s.std_events[e];
    }
    out << "\n";
  }
}

std::vector<ManifestOpponent> ReadOpponentManifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<ManifestOpponent> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    ManifestOpponent e;
    if (!(ls >> e.label)) continue;
    if (!(ls >> e.path)) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 'label path'");
    }
    if (fs::path(e.path).is_relative()) e.path = (base / e.path).string();
    out.push_back(std::move(e));
  }
  return out;
}

void WriteOpponentManifest(const std::vector<ManifestOpponent>& entries,
                           const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "# label checkpoint\n";
  for (const auto& e : entries) out << e.label << " " << e.path << "\n";
}

std::vector<std::shared_ptr<ppo::Opponent>> LoadOpponents(
    const std::vector<ManifestOpponent>& entries) {
  std::vector<std::shared_ptr<ppo::Opponent>> out;
  for (const auto& e : entries) {
    const ppo::Agent a = ppo::Agent::FromCheckpoint(nn::Checkpoint::Load(e.path));
    out.push_back(std::make_shared<ppo::FrozenPolicy>(e.label, a));
  }
  return out;
}

}  // namespace rpg::adapt
