"""Python access to the reward-randomized policy gradient core."""

import json

from . import _core
from ._core import Env, critical_threshold, event_names, original_weights, preset_names, replay
from ._core import theorem1_bound, theorem2_bound

__all__ = [
    "Env",
    "critical_threshold",
    "event_names",
    "original_weights",
    "preset",
    "preset_names",
    "replay",
    "run_experiment",
    "theorem1_bound",
    "theorem2_bound",
    "verify_theorem1",
    "verify_theorem2",
]


def preset(name, scale=0.1):
    return json.loads(_core.preset(name, scale))


def run_experiment(config, workers=0):
    """Runs a config dict and returns the parsed run summary."""
    return json.loads(_core.run_experiment(json.dumps(config), workers))


def verify_theorem1(a, b, c, d, trials=10000, seed=0):
    return json.loads(_core.verify_theorem1(a, b, c, d, trials, seed))


def verify_theorem2(n, trials=2000, seed=0):
    return json.loads(_core.verify_theorem2(n, trials, seed))
