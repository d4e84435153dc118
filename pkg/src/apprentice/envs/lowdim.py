"""Low-dimensional environment: a binary choice gated by a hidden mode.

Each demonstrator carries a latent mode in {1, 2}. The emitted label is
``x * 1[(z >= 0 and mode == 1) or (z < 0 and mode == 2)]``, so without
inferring the mode the best achievable accuracy is roughly the majority
class rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from apprentice.dataset import DemonstrationSet, Observation, Schedule
from apprentice.diffcore import splitmix64

# Two abstract actions (emit 0 / emit 1), identified by one-hot features.
ACTION_FEATURES = np.eye(2)
CONTEXT_NAMES = ["x", "z"]
ACTION_FEATURE_NAMES = ["is_action0", "is_action1"]


@dataclass
class LowDimConfig:
    schedule_count: int = 50
    observations_per_schedule: int = 20
    lambda_distribution: float = 0.5   # probability of mode 1
    x_one_probability: float = 0.95    # keeps the label classes near-even
    seed: int = 0

    def __post_init__(self):
        if self.schedule_count < 1:
            raise ValueError("schedule_count must be positive")
        if not (0.0 <= self.lambda_distribution <= 1.0):
            raise ValueError("lambda_distribution must lie in [0, 1]")
        if not (0.0 <= self.x_one_probability <= 1.0):
            raise ValueError("x_one_probability must lie in [0, 1]")


def lowdim_label(x: int, z: float, mode: int) -> int:
    """Label rule: x gated by whether z's sign agrees with the mode."""
    return int(x) * int((z >= 0 and mode == 1) or (z < 0 and mode == 2))


def generate_lowdim(config: LowDimConfig) -> DemonstrationSet:
    schedules = []
    for i in range(config.schedule_count):
        rng = np.random.default_rng(splitmix64(config.seed, i))
        mode = 1 if rng.random() < config.lambda_distribution else 2
        observations = []
        for t in range(config.observations_per_schedule):
            x = int(rng.random() < config.x_one_probability)
            z = float(rng.standard_normal())
            y = lowdim_label(x, z, mode)
            observations.append(Observation(
                context=np.array([float(x), z]),
                action_features=ACTION_FEATURES,
                taken_actions=(y,),
                timestep=t,
            ))
        schedules.append(Schedule(f"lowdim-{config.seed}-{i}", f"p{i}", observations))
    return DemonstrationSet(
        schedules=schedules,
        action_count=2,
        context_dim=2,
        action_dim=2,
        domain_tag="lowdim",
    )


def true_mode(schedule: Schedule) -> int:
    """Recover the generating mode from any informative (x=1) observation."""
    for obs in schedule.observations:
        x, z = obs.context
        if x == 1.0:
            y = obs.taken_action
            return 1 if (y == 1) == (z >= 0) else 2
    raise ValueError(f"schedule {schedule.schedule_id} has no x=1 observation")
