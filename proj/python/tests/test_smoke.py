import math

import pytest

import rpglab


def test_bounds_match_closed_forms():
    assert rpglab.theorem2_bound(1) == pytest.approx(0.4)
    assert rpglab.theorem2_bound(3) == pytest.approx(1 - 0.6**3)
    eps = (4 - 3) / (1 - (-5))
    assert rpglab.theorem1_bound(eps) == pytest.approx((2 * eps + eps**2) / (1 + eps) ** 2)
    assert rpglab.critical_threshold(4, 3, -5, 1) == pytest.approx(6 / 7)


def test_theorem1_report_passes():
    r = rpglab.verify_theorem1(4, 3, -5, 1, trials=500, seed=1)
    assert r["kind"] == "theorem1"
    assert r["trials"] == 500
    assert r["passed"]


def test_iterated_rewards_are_payoffs():
    env = rpglab.Env("iterated_staghunt", episode_length=10, seed=0)
    out = env.step([0, 1])
    assert out["rewards"] == [-50.0, 3.0]
    assert out["events"]["#Stag-Hare"] == 1
    assert env.observe(0) == [0.0, 1.0]


def test_monster_hunt_episode_runs_to_the_limit():
    env = rpglab.Env("monster_hunt", seed=3)
    steps = 0
    while not env.done:
        env.step([steps % 4, (steps + 1) % 4])
        steps += 1
    assert steps == 50
    grid = env.render().splitlines()
    assert len(grid) == 5 and all(len(row) == 5 for row in grid)


def test_presets_and_tiny_run(tmp_path):
    assert "monster-hunt" in rpglab.preset_names()
    cfg = rpglab.preset("iterated-pg", scale=0.1)
    cfg["seeds"] = [0]
    cfg["total_env_steps"] = 64 * 10 * 2
    cfg["evaluation"]["episodes"] = 20
    cfg["record_episodes"] = 2
    cfg["output_dir"] = str(tmp_path / "run")
    summary = rpglab.run_experiment(cfg, workers=1)
    assert summary["ok"]
    assert math.isfinite(summary["mean_score"])
    text = rpglab.replay(str(tmp_path / "run" / "seed_0"), 1)
    assert "10 steps" in text


def test_unknown_config_key_is_rejected():
    cfg = rpglab.preset("fig2")
    cfg["typo"] = 1
    with pytest.raises(ValueError):
        rpglab.run_experiment(cfg)
