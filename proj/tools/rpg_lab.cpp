// rpg-lab: command-line front end for the experiment harness.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "rpg/harness.hpp"
#include "rpg/parallel.hpp"

using namespace rpg;
using harness::json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string preset;
  std::optional<uint64_t> seed;
  double scale = 0.1;
  std::string out;

  void Attach(CLI::App* app, bool needs_out = true) {
    app->add_option("--config", config, "Experiment config (JSON)");
    app->add_option("--preset", preset, "Named preset instead of a config file");
    app->add_option("--seed", seed, "Run a single seed");
    app->add_option("--scale", scale, "Budget multiplier for presets")->check(CLI::PositiveNumber);
    auto* o = app->add_option("--out", out, "Output directory");
    if (needs_out) o->required();
  }

  harness::ExperimentConfig Load() const {
    if (config.empty() == preset.empty()) {
      throw std::invalid_argument("give exactly one of --config and --preset");
    }
    harness::ExperimentConfig c =
        config.empty() ? harness::MakePreset(preset, scale) : harness::LoadConfig(config);
    if (seed) c.seeds = {*seed};
    if (!out.empty()) c.output_dir = out;
    return c;
  }
};

int PrintSummary(const harness::RunSummary& s) {
  std::cout << harness::SummaryToJson(s).dump(2) << '\n';
  return s.ok() ? 0 : 1;
}

int RunAs(const Common& common, std::initializer_list<harness::Algorithm> allowed) {
  harness::ExperimentConfig c = common.Load();
  bool ok = false;
  for (auto a : allowed) ok = ok || a == c.algorithm;
  if (!ok) {
    throw std::invalid_argument("config algorithm '" + harness::AlgorithmName(c.algorithm) +
                                "' does not fit this subcommand");
  }
  return PrintSummary(harness::run_experiment(c));
}

json EvalJson(const pipeline::EvaluationResult& e) {
  json ev = json::object();
  for (size_t k = 0; k < e.event_names.size(); ++k) ev[e.event_names[k]] = e.mean_events[k];
  return {{"score", e.score},
          {"episodes", e.episodes},
          {"mean_returns", e.mean_returns},
          {"std_returns", e.std_returns},
          {"events", ev}};
}

std::vector<ppo::Agent> Pad(std::vector<ppo::Agent> agents, int n) {
  while (static_cast<int>(agents.size()) < n) agents.push_back(agents[0]);
  return agents;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reward-randomized policy gradient lab"};
  app.require_subcommand(1);

  // verify-matrix
  auto* vm = app.add_subcommand("verify-matrix", "Monte Carlo check of the stag-hunt bounds");
  double a = 4, b = 3, c = -5, d = 1, lr = 0.01, tol = 1e-3;
  int64_t trials = 10000, max_steps = 100000;
  uint64_t vm_seed = 0;
  int theorem2_n = 0;
  vm->add_option("--a", a);
  vm->add_option("--b", b);
  vm->add_option("--c", c);
  vm->add_option("--d", d);
  vm->add_option("--trials", trials)->check(CLI::PositiveNumber);
  vm->add_option("--seed", vm_seed);
  vm->add_option("--lr", lr);
  vm->add_option("--max-steps", max_steps);
  vm->add_option("--tol", tol);
  vm->add_option("--theorem2", theorem2_n, "Check the reward-randomization bound for N members");

  Common train_c, rr_c, rpg_c, adapt_c, ft_c;
  auto* train = app.add_subcommand("train", "PPO baselines: pg, pg_shared, pg_count, pbt");
  train_c.Attach(train);
  auto* rr = app.add_subcommand("rr", "Train and score an RR population");
  rr_c.Attach(rr);
  auto* rpg_cmd = app.add_subcommand("rpg", "Full pipeline: RR, select, warm start, fine-tune");
  rpg_c.Attach(rpg_cmd);
  auto* adapt_cmd = app.add_subcommand("adapt", "Adaptive agent against frozen opponents");
  adapt_c.Attach(adapt_cmd);

  auto* eval = app.add_subcommand("evaluate", "Evaluate saved agents on a game");
  std::string ckpt_dir, env_name = "monster_hunt", traj_out;
  std::vector<double> weights;
  int episodes = 100, n_agents = 2, episode_length = -1, record = 0;
  double beta = 1.0;
  uint64_t eval_seed = 0;
  eval->add_option("--agents", ckpt_dir, "Directory with agent_<k>.ckpt")->required();
  eval->add_option("--env", env_name);
  eval->add_option("--n-agents", n_agents);
  eval->add_option("--episode-length", episode_length);
  eval->add_option("--weights", weights, "Reward weights (default: the original game)");
  eval->add_option("--episodes", episodes);
  eval->add_option("--beta", beta);
  eval->add_option("--seed", eval_seed);
  eval->add_option("--record", record, "Episodes to keep as trajectories");
  eval->add_option("--trajectories", traj_out, "Trajectory file to write");

  auto* sel = app.add_subcommand("select", "Best member of a scored population");
  std::string manifest;
  sel->add_option("--manifest", manifest, "population.json")->required();

  auto* ft = app.add_subcommand("finetune", "Warm start and fine-tune one population member");
  ft_c.Attach(ft);
  std::string ft_manifest;
  int member = -1;
  ft->add_option("--manifest", ft_manifest, "population.json")->required();
  ft->add_option("--member", member, "Member index (default: best score)");

  auto* rep = app.add_subcommand("replay", "Render a recorded episode");
  std::string run_path;
  int episode = 0;
  rep->add_option("--run", run_path, "Run directory or trajectory file")->required();
  rep->add_option("--episode", episode);

  auto* presets = app.add_subcommand("presets", "List preset names, or print one as JSON");
  std::string show;
  double show_scale = 0.1;
  presets->add_option("name", show);
  presets->add_option("--scale", show_scale);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*vm) {
      matrix::DynamicsConfig cfg;
      cfg.learning_rate = lr;
      cfg.max_steps = max_steps;
      cfg.convergence_tol = tol;
      matrix::BoundReport r =
          theorem2_n > 0 ? matrix::verify_theorem2(theorem2_n, trials, vm_seed, cfg)
                         : matrix::verify_theorem1(matrix::PayoffMatrix(a, b, c, d), trials, cfg,
                                                   vm_seed);
      std::cout << r.ToJson() << '\n';
      return r.passed ? 0 : 1;
    }
    if (*train) {
      return RunAs(train_c, {harness::Algorithm::kPg, harness::Algorithm::kPgShared,
                             harness::Algorithm::kPgCount, harness::Algorithm::kPbt});
    }
    if (*rpg_cmd) return RunAs(rpg_c, {harness::Algorithm::kRpg});
    if (*adapt_cmd) return RunAs(adapt_c, {harness::Algorithm::kAdapt});
    if (*rr) {
      harness::ExperimentConfig cfg = rr_c.Load();
      if (cfg.algorithm != harness::Algorithm::kRpg) {
        throw std::invalid_argument("rr needs an rpg config");
      }
      cfg.fine_tune_env_steps = 0;
      cfg.Validate();
      fs::create_directories(cfg.output_dir);
      harness::SaveConfig(cfg, (fs::path(cfg.output_dir) / "config.json").string());
      json all = json::array();
      for (uint64_t s : cfg.seeds) {
        const std::string dir = (fs::path(cfg.output_dir) / ("seed_" + std::to_string(s))).string();
        pipeline::PopulationOptions po;
        po.env = cfg.env;
        po.cfg = cfg.ppo;
        po.member_env_steps = cfg.total_env_steps;
        po.seed = s;
        po.run_dir = dir;
        auto pop = pipeline::train_population(pipeline::sample_weights(cfg.weight_space, s), po);
        pipeline::evaluate_population(pop, cfg.env, cfg.OriginalWeights(), cfg.evaluation,
                                      DeriveSeed(s, 0x40000000));
        const std::string path = (fs::path(dir) / "population.json").string();
        pipeline::WritePopulationManifest(pop, path);
        all.push_back({{"seed", s}, {"manifest", path}, {"best", pipeline::select_best(pop)}});
      }
      std::cout << all.dump(2) << '\n';
      return 0;
    }
    if (*eval) {
      envs::EnvSpec env{envs::ParseEnvKind(env_name), n_agents, 0};
      env.episode_length =
          episode_length > 0 ? episode_length : (env.kind == envs::EnvKind::kIteratedStagHunt ? 10 : 50);
      const envs::RewardWeights w =
          weights.empty() ? envs::OriginalWeights(env.kind) : envs::RewardWeights(weights);
      pipeline::EvaluationSpec spec;
      spec.beta = beta;
      spec.episodes = episodes;
      harness::TrajectoryFile traj;
      const auto agents = Pad(pipeline::LoadAgents(ckpt_dir), env.n_agents);
      const auto res = harness::EvaluateAndRecord(agents, env, w, spec, eval_seed, record, &traj);
      if (record > 0 && !traj_out.empty()) harness::WriteTrajectories(traj, traj_out);
      std::cout << EvalJson(res).dump() << '\n';
      return 0;
    }
    if (*sel) {
      const auto entries = pipeline::ReadPopulationManifest(manifest);
      std::vector<pipeline::PopulationMember> pop(entries.size());
      for (size_t i = 0; i < entries.size(); ++i) {
        pop[i].index = entries[i].index;
        pop[i].error = entries[i].error;
        if (entries[i].score) pop[i].evaluation = pipeline::EvaluationResult{*entries[i].score};
      }
      const int best = pipeline::select_best(pop);
      std::cout << json{{"best", best}, {"score", *entries[best].score}, {"w", entries[best].w}}.dump()
                << '\n';
      return 0;
    }
    if (*ft) {
      harness::ExperimentConfig cfg = ft_c.Load();
      auto pop = pipeline::LoadPopulation(ft_manifest);
      if (member < 0) member = pipeline::select_best(pop);
      pipeline::PopulationMember m = pop.at(member);
      if (!m.ok()) throw std::runtime_error("member " + std::to_string(member) + " failed: " + m.error);
      const uint64_t s = cfg.seeds.front();
      const auto orig = cfg.OriginalWeights();
      const int64_t warm = cfg.warm_start_env_steps >= 0
                               ? cfg.warm_start_env_steps
                               : pipeline::DefaultWarmSteps(cfg.fine_tune_env_steps);
      fs::create_directories(cfg.output_dir);
      const fs::path out(cfg.output_dir);
      pipeline::warm_start_critic(m, cfg.env, orig, cfg.ppo, warm, DeriveSeed(s, 0x6000),
                                  (out / "warm_start.csv").string());
      pipeline::FineTuneOptions fo;
      fo.env_steps = cfg.fine_tune_env_steps;
      fo.seed = DeriveSeed(s, 0x7000);
      fo.metrics_path = (out / "fine_tune.csv").string();
      fo.population_step_offset = pipeline::PopulationEnvSteps(pop) + warm;
      ppo::TrainResult r = pipeline::fine_tune(m, cfg.env, orig, cfg.ppo, fo);
      if (cfg.ppo.shared_parameters) r.agents.resize(1);
      pipeline::SaveAgents(r.agents, (out / "final").string());
      harness::TrajectoryFile traj;
      const auto res = harness::EvaluateAndRecord(Pad(r.agents, cfg.env.n_agents), cfg.env, orig,
                                                  cfg.evaluation, DeriveSeed(s, 0x30000000),
                                                  cfg.record_episodes, &traj);
      if (cfg.record_episodes > 0) harness::WriteTrajectories(traj, (out / "trajectories.txt").string());
      std::cout << json{{"member", member}, {"evaluation", EvalJson(res)}}.dump() << '\n';
      return 0;
    }
    if (*rep) {
      std::cout << harness::ReplayPath(run_path, episode);
      return 0;
    }
    if (*presets) {
      if (show.empty()) {
        for (const auto& n : harness::PresetNames()) std::cout << n << '\n';
      } else {
        std::cout << harness::ToJson(harness::MakePreset(show, show_scale)).dump(2) << '\n';
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "rpg-lab: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
