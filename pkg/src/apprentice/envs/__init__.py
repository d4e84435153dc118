"""Synthetic environments with heterogeneous mock decision-makers."""

from apprentice.envs.lowdim import LowDimConfig, generate_lowdim, lowdim_label, true_mode
from apprentice.envs.scheduling import (
    ExpertProfile,
    SchedulingScenario,
    actions_of,
    expert_priority,
    generate_scheduling,
    generate_scheduling_multilabel,
    rollout_expert,
    simulate,
    verify_rollout,
)

__all__ = [
    "LowDimConfig",
    "generate_lowdim",
    "lowdim_label",
    "true_mode",
    "ExpertProfile",
    "SchedulingScenario",
    "actions_of",
    "expert_priority",
    "generate_scheduling",
    "generate_scheduling_multilabel",
    "rollout_expert",
    "simulate",
    "verify_rollout",
]
