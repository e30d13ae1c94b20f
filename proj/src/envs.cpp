#include "rpg/envs.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace rpg::envs {

std::string EnvKindName(EnvKind kind) {
  switch (kind) {
    case EnvKind::kIteratedStagHunt:
      return "iterated_staghunt";
    case EnvKind::kMonsterHunt:
      return "monster_hunt";
    case EnvKind::kEscalation:
      return "escalation";
  }
  return "?";
}

EnvKind ParseEnvKind(std::string_view name) {
  if (name == "iterated_staghunt") return EnvKind::kIteratedStagHunt;
  if (name == "monster_hunt") return EnvKind::kMonsterHunt;
  if (name == "escalation") return EnvKind::kEscalation;
  throw std::invalid_argument("unknown env kind: " + std::string(name));
}

int Manhattan(Pos a, Pos b) {
  return std::abs(a.row - b.row) + std::abs(a.col - b.col);
}

bool InGrid(Pos p) {
  return p.row >= 0 && p.row < kGridSize && p.col >= 0 && p.col < kGridSize;
}

// --- RewardWeights -----------------------------------------------------------

RewardWeights::RewardWeights(std::vector<double> w, double c_max,
                             double prosociality)
    : w_(std::move(w)), c_max_(c_max), prosociality_(prosociality) {
  if (!(c_max_ > 0.0)) throw std::invalid_argument("c_max must be positive");
  for (double x : w_) {
    if (!std::isfinite(x)) throw std::invalid_argument("weights must be finite");
    if (std::abs(x) > c_max_) {
      throw std::invalid_argument("weight exceeds c_max");
    }
  }
  if (!(prosociality_ >= 0.0 && prosociality_ <= 1.0)) {
    throw std::invalid_argument("prosociality must lie in [0, 1]");
  }
}

double RewardWeights::Dot(std::span<const double> phi) const {
  if (phi.size() != w_.size()) {
    throw std::invalid_argument("feature/weight dimension mismatch");
  }
  double s = 0.0;
  for (size_t k = 0; k < w_.size(); ++k) s += phi[k] * w_[k];
  return s;
}

// --- EventCounters -------------------------------------------------------------

EventCounters::EventCounters(EnvKind kind)
    : kind_(kind), values_(Vocabulary(kind).size(), 0.0) {}

const std::vector<std::string>& EventCounters::Vocabulary(EnvKind kind) {
  static const std::vector<std::string> iterated = {
      "#Stag-Stag", "#Stag-Hare", "#Hare-Stag", "#Hare-Hare"};
  static const std::vector<std::string> monster = {"#Coop-Hunt",
                                                   "#Single-Hunt", "#Apple"};
  static const std::vector<std::string> escalation = {
      "#Coop-Step", "#Betrayal", "#Joint-Leave", "Max-L"};
  switch (kind) {
    case EnvKind::kIteratedStagHunt:
      return iterated;
    case EnvKind::kMonsterHunt:
      return monster;
    case EnvKind::kEscalation:
      return escalation;
  }
  return iterated;
}

int EventCounters::IndexOf(std::string_view name) const {
  const auto& vocab = Vocabulary(kind_);
  for (size_t i = 0; i < vocab.size(); ++i) {
    if (vocab[i] == name) return static_cast<int>(i);
  }
  throw std::invalid_argument("unknown event counter '" + std::string(name) +
                              "' for " + EnvKindName(kind_));
}

void EventCounters::Add(std::string_view name, double amount) {
  values_[IndexOf(name)] += amount;
}

double EventCounters::Get(std::string_view name) const {
  return values_[IndexOf(name)];
}

void EventCounters::Clear() { std::fill(values_.begin(), values_.end(), 0.0); }

EventCounters& EventCounters::operator+=(const EventCounters& other) {
  if (values_.empty()) *this = EventCounters(other.kind_);
  if (other.kind_ != kind_) {
    throw std::invalid_argument("cannot merge counters of different games");
  }
  for (size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

// --- shared helpers -----------------------------------------------------------

namespace {

void FillRewards(StepResult& out, const RewardWeights& w) {
  const size_t n = out.features.size();
  std::vector<double> own(n);
  for (size_t i = 0; i < n; ++i) own[i] = w.Dot(out.features[i]);
  out.rewards = own;
  if (w.prosociality() != 0.0) {
    double total = 0.0;
    for (double r : own) total += r;
    for (size_t i = 0; i < n; ++i) {
      out.rewards[i] = own[i] + w.prosociality() * (total - own[i]);
    }
  }
}

Pos Moved(Pos p, int action) {
  Pos q = p;
  switch (action) {
    case kUp:
      --q.row;
      break;
    case kDown:
      ++q.row;
      break;
    case kLeft:
      --q.col;
      break;
    case kRight:
      ++q.col;
      break;
    default:
      throw std::invalid_argument("invalid grid action " +
                                  std::to_string(action));
  }
  // Moves across the border are no-ops.
  return InGrid(q) ? q : p;
}

void CheckGridActions(std::span<const int> actions, size_t n_agents) {
  if (actions.size() != n_agents) {
    throw std::invalid_argument("one action per agent required");
  }
  for (int a : actions) {
    if (a < 0 || a >= kNumGridActions) {
      throw std::invalid_argument("invalid grid action " + std::to_string(a));
    }
  }
}

// Uniform cell among those not in `occupied`.
Pos RandomFreeCell(Rng& rng, std::span<const Pos> occupied) {
  std::vector<Pos> free;
  free.reserve(kGridSize * kGridSize);
  for (int r = 0; r < kGridSize; ++r) {
    for (int c = 0; c < kGridSize; ++c) {
      const Pos p{r, c};
      if (std::find(occupied.begin(), occupied.end(), p) == occupied.end()) {
        free.push_back(p);
      }
    }
  }
  if (free.empty()) throw std::logic_error("grid has no free cell");
  return free[rng.UniformInt(static_cast<int>(free.size()))];
}

void AppendPos(std::vector<double>& v, Pos p) {
  v.push_back(p.row);
  v.push_back(p.col);
}

}  // namespace

// --- Iterated Stag-Hunt --------------------------------------------------------

IteratedState reset_iterated(int rounds) {
  if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
  IteratedState s;
  s.rounds = rounds;
  return s;
}

std::vector<double> observe(const IteratedState& state, int agent) {
  if (agent != 0 && agent != 1) {
    throw std::invalid_argument("agent index must be 0 or 1");
  }
  return {static_cast<double>(state.last_actions[agent]),
          static_cast<double>(state.last_actions[1 - agent])};
}

StepResult iterated_staghunt_step(IteratedState& state,
                                  std::span<const int> actions,
                                  const RewardWeights& w) {
  if (state.done()) throw std::logic_error("stepping a finished episode");
  if (actions.size() != 2) {
    throw std::invalid_argument("iterated stag-hunt takes two actions");
  }
  for (int a : actions) {
    if (a != kStag && a != kHare) {
      throw std::invalid_argument("invalid stag-hunt action " +
                                  std::to_string(a));
    }
  }
  if (w.size() != 4) throw std::invalid_argument("iterated game needs |w| = 4");

  StepResult out;
  out.events = EventCounters(EnvKind::kIteratedStagHunt);
  out.features.assign(2, FeatureVector(4, 0.0));
  for (int i = 0; i < 2; ++i) {
    const int own = actions[i];
    const int other = actions[1 - i];
    int slot;
    if (own == kStag && other == kStag) {
      slot = 0;  // a
    } else if (own == kHare && other == kStag) {
      slot = 1;  // b
    } else if (own == kStag && other == kHare) {
      slot = 2;  // c
    } else {
      slot = 3;  // d
    }
    out.features[i][slot] = 1.0;
  }
  // Counters are from agent 0's point of view.
  const int joint = actions[0] * 2 + actions[1];
  out.events.AddAt(joint);

  FillRewards(out, w);
  state.last_actions = {actions[0], actions[1]};
  ++state.round;
  out.done = state.done();
  out.observations = {observe(state, 0), observe(state, 1)};
  return out;
}

// --- Monster-Hunt ---------------------------------------------------------------

Pos MonsterMove(Pos monster, std::span<const Pos> agents) {
  if (agents.empty()) return monster;
  int best = kGridSize * 4;
  for (const Pos& a : agents) best = std::min(best, Manhattan(monster, a));
  if (best == 0) return monster;

  struct Candidate {
    int axis;  // 0 = row, 1 = column
    int dir;   // -1 or +1
    int gap;
  };
  bool have = false;
  Candidate pick{};
  auto better = [](const Candidate& x, const Candidate& y) {
    if (x.gap != y.gap) return x.gap > y.gap;
    if (x.axis != y.axis) return x.axis < y.axis;
    return x.dir < y.dir;
  };
  for (const Pos& a : agents) {
    if (Manhattan(monster, a) != best) continue;
    const int dr = a.row - monster.row;
    const int dc = a.col - monster.col;
    for (const Candidate c : {Candidate{0, dr < 0 ? -1 : 1, std::abs(dr)},
                              Candidate{1, dc < 0 ? -1 : 1, std::abs(dc)}}) {
      if (c.gap == 0) continue;
      if (!have || better(c, pick)) {
        pick = c;
        have = true;
      }
    }
  }
  Pos next = monster;
  if (pick.axis == 0) {
    next.row += pick.dir;
  } else {
    next.col += pick.dir;
  }
  return next;
}

GridState reset_monster_hunt(Rng& rng, int n_agents, int episode_length) {
  if (n_agents < 2) throw std::invalid_argument("Monster-Hunt needs >= 2 agents");
  if (n_agents + 3 > kGridSize * kGridSize) {
    throw std::invalid_argument("too many agents for the grid");
  }
  GridState s;
  s.episode_length = episode_length;
  std::vector<Pos> taken;
  for (int i = 0; i < n_agents; ++i) {
    taken.push_back(RandomFreeCell(rng, taken));
    s.agents.push_back(taken.back());
  }
  s.monster = RandomFreeCell(rng, taken);
  taken.push_back(s.monster);
  for (auto& apple : s.apples) {
    apple = RandomFreeCell(rng, taken);
    taken.push_back(apple);
  }
  return s;
}

std::vector<double> observe_monster_hunt(const GridState& state, int agent) {
  const int n = static_cast<int>(state.agents.size());
  if (agent < 0 || agent >= n) throw std::invalid_argument("bad agent index");
  std::vector<double> o;
  o.reserve(2 * n + 6);
  AppendPos(o, state.agents[agent]);
  for (int j = 0; j < n; ++j) {
    if (j != agent) AppendPos(o, state.agents[j]);
  }
  AppendPos(o, state.monster);
  std::array<Pos, 2> apples = state.apples;
  std::sort(apples.begin(), apples.end());
  AppendPos(o, apples[0]);
  AppendPos(o, apples[1]);
  return o;
}

StepResult monster_hunt_step(GridState& state, std::span<const int> actions,
                             const RewardWeights& w, Rng& rng) {
  if (state.done()) throw std::logic_error("stepping a finished episode");
  const size_t n = state.agents.size();
  CheckGridActions(actions, n);
  if (w.size() != 3) throw std::invalid_argument("Monster-Hunt needs |w| = 3");

  for (size_t i = 0; i < n; ++i) state.agents[i] = Moved(state.agents[i], actions[i]);
  state.monster = MonsterMove(state.monster, state.agents);

  StepResult out;
  out.events = EventCounters(EnvKind::kMonsterHunt);
  out.features.assign(n, FeatureVector(3, 0.0));

  std::vector<int> on_monster;
  for (size_t i = 0; i < n; ++i) {
    if (state.agents[i] == state.monster) on_monster.push_back(static_cast<int>(i));
  }
  const bool monster_hit = !on_monster.empty();
  if (on_monster.size() >= 2) {
    for (int i : on_monster) out.features[i][0] = 1.0;
    out.events.AddAt(events::kCoopHunt);
  } else if (on_monster.size() == 1) {
    out.features[on_monster[0]][2] = 1.0;
    out.events.AddAt(events::kSingleHunt);
  }

  std::array<bool, 2> eaten{false, false};
  for (int k = 0; k < 2; ++k) {
    std::vector<int> contenders;
    for (size_t i = 0; i < n; ++i) {
      if (state.agents[i] == state.apples[k]) contenders.push_back(static_cast<int>(i));
    }
    if (contenders.empty()) continue;
    const int winner =
        contenders.size() == 1
            ? contenders[0]
            : contenders[rng.UniformInt(static_cast<int>(contenders.size()))];
    out.features[winner][1] += 1.0;
    out.events.AddAt(events::kApple);
    eaten[k] = true;
  }

  // Respawn consumed entities on cells free of every other entity.
  auto occupied = [&](int skip_apple) {
    std::vector<Pos> cells(state.agents.begin(), state.agents.end());
    cells.push_back(state.monster);
    for (int k = 0; k < 2; ++k) {
      if (k != skip_apple) cells.push_back(state.apples[k]);
    }
    return cells;
  };
  if (monster_hit) state.monster = RandomFreeCell(rng, occupied(-1));
  for (int k = 0; k < 2; ++k) {
    if (eaten[k]) state.apples[k] = RandomFreeCell(rng, occupied(-1));
  }

  FillRewards(out, w);
  ++state.step_count;
  out.done = state.done();
  out.observations.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    out.observations.push_back(observe_monster_hunt(state, static_cast<int>(i)));
  }
  return out;
}

// --- Escalation -------------------------------------------------------------------

GridState reset_escalation(Rng& rng, int episode_length) {
  GridState s;
  s.episode_length = episode_length;
  std::vector<Pos> taken;
  for (int i = 0; i < 2; ++i) {
    taken.push_back(RandomFreeCell(rng, taken));
    s.agents.push_back(taken.back());
  }
  s.lit = RandomFreeCell(rng, taken);
  return s;
}

std::vector<double> observe_escalation(const GridState& state, int agent) {
  if (agent != 0 && agent != 1) {
    throw std::invalid_argument("agent index must be 0 or 1");
  }
  std::vector<double> o;
  o.reserve(6);
  AppendPos(o, state.agents[agent]);
  AppendPos(o, state.agents[1 - agent]);
  AppendPos(o, state.lit);
  return o;
}

StepResult escalation_step(GridState& state, std::span<const int> actions,
                           const RewardWeights& w, Rng& rng) {
  if (state.done()) throw std::logic_error("stepping a finished episode");
  CheckGridActions(actions, 2);
  if (w.size() != 2) throw std::invalid_argument("Escalation needs |w| = 2");

  for (int i = 0; i < 2; ++i) state.agents[i] = Moved(state.agents[i], actions[i]);

  StepResult out;
  out.events = EventCounters(EnvKind::kEscalation);
  out.features.assign(2, FeatureVector(2, 0.0));

  const std::array<bool, 2> on{state.agents[0] == state.lit,
                               state.agents[1] == state.lit};
  if (on[0] && on[1]) {
    out.features[0][0] = out.features[1][0] = 1.0;
    out.events.AddAt(events::kCoopStep);
    ++state.streak;
    if (state.streak > state.max_streak) {
      state.max_streak = state.streak;
      out.events.AddAt(events::kMaxStreak);
    }
    std::vector<Pos> neighbors;
    for (const Pos d : {Pos{-1, 0}, Pos{1, 0}, Pos{0, -1}, Pos{0, 1}}) {
      const Pos q{state.lit.row + d.row, state.lit.col + d.col};
      if (InGrid(q)) neighbors.push_back(q);
    }
    state.lit = neighbors[rng.UniformInt(static_cast<int>(neighbors.size()))];
  } else if (state.streak > 0 && on[0] != on[1]) {
    // The agent left alone on the path pays for the whole streak.
    const int loser = on[0] ? 0 : 1;
    out.features[loser][1] = static_cast<double>(state.streak);
    out.events.AddAt(events::kBetrayal);
    state.terminated = true;
  } else if (state.streak > 0) {
    // Joint departure: no penalty, the chain restarts elsewhere.
    out.events.AddAt(events::kJointLeave);
    state.streak = 0;
    state.lit = RandomFreeCell(rng, state.agents);
  }

  FillRewards(out, w);
  ++state.step_count;
  out.done = state.done();
  out.observations = {observe_escalation(state, 0), observe_escalation(state, 1)};
  return out;
}

// --- Environment wrappers ----------------------------------------------------------

int ObsDim(const EnvSpec& spec) {
  switch (spec.kind) {
    case EnvKind::kIteratedStagHunt:
      return 2;
    case EnvKind::kMonsterHunt:
      return 2 * spec.n_agents + 6;
    case EnvKind::kEscalation:
      return 6;
  }
  return 0;
}

int NumActions(EnvKind kind) {
  return kind == EnvKind::kIteratedStagHunt ? 2 : kNumGridActions;
}

int FeatureDim(EnvKind kind) {
  switch (kind) {
    case EnvKind::kIteratedStagHunt:
      return 4;
    case EnvKind::kMonsterHunt:
      return 3;
    case EnvKind::kEscalation:
      return 2;
  }
  return 0;
}

RewardWeights OriginalWeights(EnvKind kind) {
  switch (kind) {
    case EnvKind::kIteratedStagHunt:
      return RewardWeights({4.0, 3.0, -50.0, 1.0});
    case EnvKind::kMonsterHunt:
      return RewardWeights({5.0, 2.0, -2.0});
    case EnvKind::kEscalation:
      return RewardWeights({1.0, -0.9});
  }
  return RewardWeights();
}

int Environment::obs_dim() const { return ObsDim(spec_); }
int Environment::num_actions() const { return NumActions(spec_.kind); }
int Environment::feature_dim() const { return FeatureDim(spec_.kind); }

namespace {

class IteratedEnv final : public Environment {
 public:
  explicit IteratedEnv(const EnvSpec& spec) : Environment(spec) { NewEpisode(); }
  void NewEpisode() override { state_ = reset_iterated(spec_.episode_length); }
  StepResult Step(std::span<const int> actions, const RewardWeights& w) override {
    return iterated_staghunt_step(state_, actions, w);
  }
  std::vector<double> Observe(int agent) const override {
    return observe(state_, agent);
  }
  bool done() const override { return state_.done(); }
  Snapshot snapshot() const override {
    Snapshot s;
    s.round = state_.round;
    s.last_actions = state_.last_actions;
    return s;
  }

 private:
  IteratedState state_;
};

class GridEnv final : public Environment {
 public:
  explicit GridEnv(const EnvSpec& spec) : Environment(spec) {
    if (spec.kind == EnvKind::kEscalation && spec.n_agents != 2) {
      throw std::invalid_argument("Escalation is a two-agent game");
    }
    NewEpisode();
  }
  void NewEpisode() override {
    state_ = spec_.kind == EnvKind::kMonsterHunt
                 ? reset_monster_hunt(rng_, spec_.n_agents, spec_.episode_length)
                 : reset_escalation(rng_, spec_.episode_length);
  }
  StepResult Step(std::span<const int> actions, const RewardWeights& w) override {
    return spec_.kind == EnvKind::kMonsterHunt
               ? monster_hunt_step(state_, actions, w, rng_)
               : escalation_step(state_, actions, w, rng_);
  }
  std::vector<double> Observe(int agent) const override {
    return spec_.kind == EnvKind::kMonsterHunt
               ? observe_monster_hunt(state_, agent)
               : observe_escalation(state_, agent);
  }
  bool done() const override { return state_.done(); }
  Snapshot snapshot() const override {
    Snapshot s;
    s.agents = state_.agents;
    s.monster = state_.monster;
    s.apples = state_.apples;
    s.lit = state_.lit;
    s.streak = state_.streak;
    s.round = state_.step_count;
    return s;
  }

 private:
  GridState state_;
};

}  // namespace

std::unique_ptr<Environment> Environment::Make(const EnvSpec& spec) {
  if (spec.episode_length < 1) {
    throw std::invalid_argument("episode_length must be >= 1");
  }
  if (spec.kind == EnvKind::kIteratedStagHunt) {
    if (spec.n_agents != 2) {
      throw std::invalid_argument("iterated stag-hunt is a two-agent game");
    }
    return std::make_unique<IteratedEnv>(spec);
  }
  return std::make_unique<GridEnv>(spec);
}

std::string Render(EnvKind kind, const Snapshot& snap) {
  std::ostringstream out;
  if (kind == EnvKind::kIteratedStagHunt) {
    auto name = [](int a) {
      return a == kStag ? "Stag" : (a == kHare ? "Hare" : "-");
    };
    out << "round " << snap.round << "  last: " << name(snap.last_actions[0])
        << " / " << name(snap.last_actions[1]) << '\n';
    return out.str();
  }
  std::array<std::array<char, kGridSize>, kGridSize> grid;
  for (auto& row : grid) row.fill('.');
  auto put = [&](Pos p, char g) { grid[p.row][p.col] = g; };
  if (kind == EnvKind::kEscalation) {
    put(snap.lit, '*');
  } else {
    for (const Pos& a : snap.apples) put(a, 'a');
    put(snap.monster, 'M');
  }
  for (size_t i = 0; i < snap.agents.size(); ++i) {
    const Pos p = snap.agents[i];
    const char own = static_cast<char>('0' + i % 10);
    const char cur = grid[p.row][p.col];
    put(p, (cur >= '0' && cur <= '9') || cur == '+' ? '+' : own);
  }
  for (const auto& row : grid) {
    out.write(row.data(), kGridSize);
    out << '\n';
  }
  if (kind == EnvKind::kEscalation) out << "L=" << snap.streak << '\n';
  return out.str();
}

}  // namespace rpg::envs
