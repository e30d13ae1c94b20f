#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <set>

#include "rpg/envs.hpp"
#include "rpg/rng.hpp"

using namespace rpg::envs;

namespace {

double NaiveDot(const FeatureVector& phi, const std::vector<double>& w) {
  double s = 0.0;
  for (size_t k = 0; k < phi.size(); ++k) s += phi[k] * w[k];
  return s;
}

std::vector<Pos> Entities(const GridState& s, EnvKind kind) {
  std::vector<Pos> e = s.agents;
  if (kind == EnvKind::kMonsterHunt) {
    e.push_back(s.monster);
    e.push_back(s.apples[0]);
    e.push_back(s.apples[1]);
  } else {
    e.push_back(s.lit);
  }
  return e;
}

}  // namespace

TEST_CASE("iterated stag-hunt payoffs under the original weights") {
  const RewardWeights w = OriginalWeights(EnvKind::kIteratedStagHunt);
  IteratedState s = reset_iterated();
  CHECK(observe(s, 0) == std::vector<double>{-1, -1});
  const int ss[2] = {kStag, kStag};
  StepResult r = iterated_staghunt_step(s, ss, w);
  CHECK(r.rewards == std::vector<double>{4, 4});
  const int sh[2] = {kStag, kHare};
  r = iterated_staghunt_step(s, sh, w);
  CHECK(r.rewards == std::vector<double>{-50, 3});
  CHECK(r.observations[0] == std::vector<double>{0, 1});
  CHECK(r.observations[1] == std::vector<double>{1, 0});
  CHECK(r.events.Get("#Stag-Hare") == 1);

  IteratedState t = reset_iterated();
  const int hh[2] = {kHare, kHare};
  CHECK(iterated_staghunt_step(t, hh, RewardWeights({0, 0, 0, 4})).rewards ==
        std::vector<double>{4, 4});
}

TEST_CASE("iterated always-Hare returns 10 per agent") {
  IteratedState s = reset_iterated();
  const RewardWeights w = OriginalWeights(EnvKind::kIteratedStagHunt);
  const int hh[2] = {kHare, kHare};
  double ret[2] = {0, 0};
  int steps = 0;
  while (!s.done()) {
    StepResult r = iterated_staghunt_step(s, hh, w);
    ret[0] += r.rewards[0];
    ret[1] += r.rewards[1];
    ++steps;
    CHECK(r.done == (steps == 10));
  }
  CHECK(ret[0] == 10);
  CHECK(ret[1] == 10);
  CHECK_THROWS_AS(iterated_staghunt_step(s, hh, w), std::logic_error);
  IteratedState u = reset_iterated();
  const int bad[2] = {kStag, 2};
  CHECK_THROWS_AS(iterated_staghunt_step(u, bad, w), std::invalid_argument);
}

TEST_CASE("reward weights respect c_max") {
  CHECK_THROWS_AS(RewardWeights({6, 0, 0}, 5.0), std::invalid_argument);
  CHECK_NOTHROW(RewardWeights({5, -5, 0}, 5.0));
  CHECK_THROWS_AS(RewardWeights({1, 1}, 5.0, 1.5), std::invalid_argument);
}

TEST_CASE("event counters reject unknown names") {
  EventCounters c(EnvKind::kMonsterHunt);
  c.Add("#Apple");
  CHECK(c.Get("#Apple") == 1);
  CHECK_THROWS_AS(c.Add("#Stag-Stag"), std::invalid_argument);
  CHECK_THROWS_AS(c.Get("#Nope"), std::invalid_argument);
}

TEST_CASE("monster-hunt rewards for cooperative and single hunts") {
  rpg::Rng rng(1);
  const RewardWeights w = OriginalWeights(EnvKind::kMonsterHunt);
  GridState s;
  s.agents = {{2, 1}, {2, 3}};
  s.monster = {2, 2};
  s.apples = {Pos{0, 0}, Pos{4, 4}};
  // Both step onto the monster, which stays put at distance 1 -> moves onto one.
  const int moves[2] = {kRight, kLeft};
  StepResult r = monster_hunt_step(s, moves, w, rng);
  CHECK(r.rewards == std::vector<double>{5, 5});
  CHECK(r.events.Get("#Coop-Hunt") == 1);
  CHECK(s.monster != Pos{2, 2});

  GridState t;
  t.agents = {{2, 1}, {0, 4}};
  t.monster = {2, 3};
  t.apples = {Pos{0, 0}, Pos{4, 4}};
  const int m2[2] = {kRight, kUp};
  r = monster_hunt_step(t, m2, w, rng);
  CHECK(r.rewards == std::vector<double>{-2, 0});
  CHECK(r.events.Get("#Single-Hunt") == 1);
}

TEST_CASE("monster-hunt apple feature") {
  rpg::Rng rng(2);
  GridState s;
  s.agents = {{0, 1}, {4, 0}};
  s.monster = {4, 4};
  s.apples = {Pos{0, 0}, Pos{2, 2}};
  const int moves[2] = {kLeft, kUp};
  StepResult r = monster_hunt_step(s, moves, RewardWeights({0, 5, 0}), rng);
  CHECK(r.features[0] == FeatureVector{0, 1, 0});
  CHECK(r.rewards[0] == 5);
  CHECK(r.rewards[1] == 0);
  CHECK(r.events.Get("#Apple") == 1);
  CHECK(s.apples[0] != Pos{0, 0});
}

TEST_CASE("observations") {
  GridState s;
  s.agents = {{0, 0}, {4, 4}};
  s.monster = {2, 2};
  s.apples = {Pos{3, 3}, Pos{1, 1}};
  CHECK(observe_monster_hunt(s, 0) ==
        std::vector<double>{0, 0, 4, 4, 2, 2, 1, 1, 3, 3});
  GridState e;
  e.agents = {{1, 2}, {3, 0}};
  e.lit = {3, 1};
  CHECK(observe_escalation(e, 1) == std::vector<double>{3, 0, 1, 2, 3, 1});
}

TEST_CASE("escalation rewards") {
  rpg::Rng rng(4);
  const RewardWeights w = OriginalWeights(EnvKind::kEscalation);
  GridState s;
  s.agents = {{2, 1}, {2, 3}};
  s.lit = {2, 2};
  const int in[2] = {kRight, kLeft};
  StepResult r = escalation_step(s, in, w, rng);
  CHECK(r.rewards == std::vector<double>{1, 1});
  CHECK(s.streak == 1);
  CHECK(Manhattan(s.lit, Pos{2, 2}) == 1);

  GridState t;
  t.agents = {{2, 1}, {0, 0}};
  t.lit = {2, 2};
  t.streak = 7;
  const int one[2] = {kRight, kDown};
  r = escalation_step(t, one, w, rng);
  CHECK(r.rewards[0] == doctest::Approx(-6.3));
  CHECK(r.rewards[1] == 0);
  CHECK(r.done);

  GridState u;
  u.agents = {{2, 1}, {2, 3}};
  u.lit = {2, 2};
  r = escalation_step(u, in, RewardWeights({1, 0}), rng);
  CHECK(r.rewards == std::vector<double>{1, 1});
}

TEST_CASE("resets are deterministic and place entities on distinct cells") {
  for (EnvKind kind : {EnvKind::kMonsterHunt, EnvKind::kEscalation}) {
    int differ = 0;
    for (int seed = 0; seed < 1000; ++seed) {
      rpg::Rng a(seed), b(seed), c(seed + 100000);
      const GridState s1 = kind == EnvKind::kMonsterHunt ? reset_monster_hunt(a)
                                                         : reset_escalation(a);
      const GridState s2 = kind == EnvKind::kMonsterHunt ? reset_monster_hunt(b)
                                                         : reset_escalation(b);
      const GridState s3 = kind == EnvKind::kMonsterHunt ? reset_monster_hunt(c)
                                                         : reset_escalation(c);
      const auto e1 = Entities(s1, kind);
      CHECK(e1 == Entities(s2, kind));
      differ += e1 != Entities(s3, kind);
      std::set<Pos> uniq(e1.begin(), e1.end());
      CHECK(uniq.size() == e1.size());
      for (const Pos& p : e1) CHECK(InGrid(p));
    }
    CHECK(differ > 900);
  }
}

TEST_CASE("reward equals phi.w bit-exactly over random steps") {
  rpg::Rng pick(77);
  int steps = 0;
  for (EnvKind kind : {EnvKind::kIteratedStagHunt, EnvKind::kMonsterHunt,
                       EnvKind::kEscalation}) {
    auto env = Environment::Make({kind, 2, kind == EnvKind::kIteratedStagHunt ? 10 : 50});
    env->Reset(5);
    std::vector<double> wv(env->feature_dim());
    while (steps < 10000 * (static_cast<int>(kind) + 1) / 3 + 1) {
      for (double& x : wv) x = pick.Uniform(-5, 5);
      const RewardWeights w(wv);
      if (env->done()) env->NewEpisode();
      std::vector<int> a(2);
      for (int& x : a) x = pick.UniformInt(env->num_actions());
      const StepResult r = env->Step(a, w);
      for (int i = 0; i < 2; ++i) {
        const double expect = NaiveDot(r.features[i], wv);
        CHECK(std::memcmp(&expect, &r.rewards[i], sizeof(double)) == 0);
      }
      ++steps;
    }
  }
  CHECK(steps >= 10000);
}

TEST_CASE("changing w leaves state trajectories unchanged") {
  for (EnvKind kind : {EnvKind::kMonsterHunt, EnvKind::kEscalation}) {
    auto e1 = Environment::Make({kind});
    auto e2 = Environment::Make({kind});
    e1->Reset(9);
    e2->Reset(9);
    const RewardWeights w1 = OriginalWeights(kind);
    std::vector<double> alt(e1->feature_dim(), 0.5);
    const RewardWeights w2(alt);
    rpg::Rng pick(3);
    for (int t = 0; t < 500; ++t) {
      if (e1->done()) {
        e1->NewEpisode();
        e2->NewEpisode();
      }
      std::vector<int> a{pick.UniformInt(4), pick.UniformInt(4)};
      const StepResult r1 = e1->Step(a, w1);
      const StepResult r2 = e2->Step(a, w2);
      CHECK(r1.observations == r2.observations);
      CHECK(r1.features == r2.features);
    }
  }
}

TEST_CASE("monster never moves away from its closest agent") {
  rpg::Rng rng(13);
  for (int i = 0; i < 20000; ++i) {
    std::vector<Pos> agents;
    const int n = 2 + rng.UniformInt(3);
    for (int k = 0; k < n; ++k) agents.push_back({rng.UniformInt(5), rng.UniformInt(5)});
    const Pos m{rng.UniformInt(5), rng.UniformInt(5)};
    auto closest = [&](Pos p) {
      int best = 100;
      for (const Pos& a : agents) best = std::min(best, Manhattan(p, a));
      return best;
    };
    const Pos next = MonsterMove(m, agents);
    CHECK(InGrid(next));
    const int before = closest(m);
    if (before == 0) {
      CHECK(next == m);
    } else {
      CHECK(closest(next) < before);
    }
  }
}

TEST_CASE("monster-hunt counter consistency and N-agent support") {
  auto env = Environment::Make({EnvKind::kMonsterHunt, 3, 50});
  env->Reset(2);
  CHECK(env->obs_dim() == 12);
  rpg::Rng pick(8);
  const RewardWeights w = OriginalWeights(EnvKind::kMonsterHunt);
  double contacts = 0, coop = 0, single = 0;
  for (int t = 0; t < 5000; ++t) {
    if (env->done()) env->NewEpisode();
    const Snapshot before = env->snapshot();
    std::vector<int> a{pick.UniformInt(4), pick.UniformInt(4), pick.UniformInt(4)};
    const StepResult r = env->Step(a, w);
    bool any = false;
    for (const auto& phi : r.features) any = any || phi[0] > 0 || phi[2] > 0;
    contacts += any;
    coop += r.events.Get("#Coop-Hunt");
    single += r.events.Get("#Single-Hunt");
    (void)before;
  }
  CHECK(coop + single == contacts);
  CHECK(contacts > 0);
}

TEST_CASE("escalation L accounting") {
  rpg::Rng pick(31);
  auto env = Environment::Make({EnvKind::kEscalation});
  const RewardWeights w = OriginalWeights(EnvKind::kEscalation);
  for (int ep = 0; ep < 300; ++ep) {
    env->Reset(1000 + ep);
    int coop_steps = 0, streak_sum = 0, last_streak = 0, max_l = 0;
    double max_l_events = 0;
    while (!env->done()) {
      // Mostly walk toward the lit cell so that streaks actually form.
      const Snapshot s = env->snapshot();
      std::vector<int> a(2);
      for (int i = 0; i < 2; ++i) {
        const Pos p = s.agents[i];
        if (pick.Uniform() < 0.2) {
          a[i] = pick.UniformInt(4);
        } else if (s.lit.row < p.row) {
          a[i] = kUp;
        } else if (s.lit.row > p.row) {
          a[i] = kDown;
        } else if (s.lit.col < p.col) {
          a[i] = kLeft;
        } else if (s.lit.col > p.col) {
          a[i] = kRight;
        } else {
          a[i] = pick.UniformInt(4);
        }
      }
      const StepResult r = env->Step(a, w);
      const int streak = env->snapshot().streak;
      if (r.rewards[0] == 1 && r.rewards[1] == 1) ++coop_steps;
      if (streak == 0 && last_streak > 0) streak_sum += last_streak;
      max_l = std::max(max_l, streak);
      last_streak = streak;
      max_l_events += r.events.Get("Max-L");
    }
    streak_sum += last_streak;
    CHECK(coop_steps == streak_sum);
    CHECK(max_l_events == max_l);
  }
}

TEST_CASE("render marks entities at their coordinates") {
  Snapshot s;
  s.agents = {{0, 0}, {4, 4}};
  s.monster = {2, 2};
  s.apples = {Pos{1, 3}, Pos{3, 1}};
  const std::string frame = Render(EnvKind::kMonsterHunt, s);
  CHECK(frame == "0....\n...a.\n..M..\n.a...\n....1\n");
  s.agents = {{2, 2}, {2, 2}};
  CHECK(Render(EnvKind::kMonsterHunt, s)[2 * 6 + 2] == '+');
}
