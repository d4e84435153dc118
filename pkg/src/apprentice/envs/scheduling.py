"""Two-agent, twenty-task scheduling environment with heterogeneous experts.

Tasks live on a 10x10 board and carry deadlines, optional earliest-start
(wait) constraints, and fixed service durations. An expert repeatedly picks
the feasible (agent, task) pair maximizing a blend of earliest-deadline,
nearest-task, and index-preference heuristics; the blend weights are the
demonstrator's latent profile. Actions are the 40 flattened (agent, task)
pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from apprentice.dataset import DemonstrationSet, Observation, Schedule
from apprentice.diffcore import splitmix64

TASK_COUNT = 20
AGENT_COUNT = 2
BOARD = 10.0
SPEED = 10.0
# Fixed per-index service times: completing a task identifies its index by
# how long it took, which the transition model can pick up.
DURATIONS = np.linspace(0.5, 1.5, TASK_COUNT)
# Nominal full-schedule duration; deadlines are drawn from [1x, 4x] of this.
DURATION_SCALE = 16.0
AGENT_START = np.array([[0.0, 0.0], [BOARD, BOARD]])
WAIT_FRACTION = 0.25
WAIT_WINDOW = 6.0

ACTION_COUNT = AGENT_COUNT * TASK_COUNT
ACTION_DIM = 6   # time-to-deadline, distance, index, -index, wait slack, feasible
CONTEXT_DIM = 4  # scaled time, agent availability flags, remaining fraction
CONTEXT_NAMES = ["time", "agent0_free", "agent1_free", "remaining"]
ACTION_FEATURE_NAMES = [
    "time_to_deadline", "distance", "index", "neg_index", "wait_slack", "feasible",
]
FEASIBLE_COLUMN = 5


class SchedulingError(RuntimeError):
    pass


class DeadlockError(SchedulingError):
    """No feasible (agent, task) pair can ever become available, or a
    completion lands past its deadline."""


class ConstraintViolation(SchedulingError):
    pass


@dataclass
class ExpertProfile:
    """Latent heuristic blend: deadline weight, distance weight, index mode."""

    beta1: float
    beta2: float
    beta3: int

    def __post_init__(self):
        if self.beta3 not in (0, 1):
            raise ValueError("beta3 must be 0 or 1")


@dataclass
class SchedulingScenario:
    task_locations: np.ndarray        # (TASK_COUNT, 2)
    deadlines: np.ndarray             # (TASK_COUNT,)
    wait_earliest: np.ndarray         # (TASK_COUNT,), zero when unconstrained
    durations: np.ndarray = field(default_factory=lambda: DURATIONS.copy())
    agent_positions: np.ndarray = field(default_factory=lambda: AGENT_START.copy())
    completed: set = field(default_factory=set)
    current_time: float = 0.0
    task_count: int = TASK_COUNT
    agent_count: int = AGENT_COUNT

    def travel_time(self, agent_pos: np.ndarray, task: int) -> float:
        return float(np.linalg.norm(self.task_locations[task] - agent_pos)) / SPEED

    def distance(self, agent_pos: np.ndarray, task: int) -> float:
        return float(np.linalg.norm(self.task_locations[task] - agent_pos))


def action_id(agent: int, task: int) -> int:
    return agent * TASK_COUNT + task


def action_pair(a: int) -> tuple[int, int]:
    return divmod(a, TASK_COUNT)


def make_scenario(rng: np.random.Generator) -> SchedulingScenario:
    locations = rng.uniform(0.0, BOARD, size=(TASK_COUNT, 2))
    deadlines = rng.uniform(DURATION_SCALE, 4.0 * DURATION_SCALE, size=TASK_COUNT)
    wait_earliest = np.zeros(TASK_COUNT)
    constrained = rng.random(TASK_COUNT) < WAIT_FRACTION
    wait_earliest[constrained] = rng.uniform(0.0, WAIT_WINDOW, size=int(constrained.sum()))
    return SchedulingScenario(locations, deadlines, wait_earliest)


def expert_priority(scenario: SchedulingScenario, agent_pos: np.ndarray, task: int,
                    profile: ExpertProfile) -> float:
    """Blended priority of assigning ``task`` to an agent at ``agent_pos``:
    beta1 * (-deadline) + beta2 * (-distance) + index preference gated by beta3."""
    h_edf = -float(scenario.deadlines[task])
    h_distance = -scenario.distance(agent_pos, task)
    h_index = profile.beta3 * task + (1 - profile.beta3) * (-task)
    return profile.beta1 * h_edf + profile.beta2 * h_distance + h_index


class _SimState:
    """Mutable rollout state over a static scenario."""

    def __init__(self, scenario: SchedulingScenario):
        self.scenario = scenario
        self.time = 0.0
        self.free_at = np.zeros(AGENT_COUNT)
        self.positions = AGENT_START.copy()
        self.assigned: set[int] = set()
        self.finish_times: dict[int, float] = {}

    def free_agents(self) -> list[int]:
        return [g for g in range(AGENT_COUNT) if self.free_at[g] <= self.time + 1e-9]

    def feasible_tasks(self) -> list[int]:
        return [
            j for j in range(TASK_COUNT)
            if j not in self.assigned and self.scenario.wait_earliest[j] <= self.time + 1e-9
        ]

    def feasible_pairs(self) -> list[tuple[int, int]]:
        tasks = self.feasible_tasks()
        return [(g, j) for g in self.free_agents() for j in tasks]

    def advance(self) -> bool:
        """Jump to the next event (agent freeing or wait release); False if none."""
        candidates = [t for t in self.free_at if t > self.time + 1e-9]
        candidates += [
            w for j, w in enumerate(self.scenario.wait_earliest)
            if j not in self.assigned and w > self.time + 1e-9
        ]
        if not candidates:
            return False
        self.time = min(candidates)
        return True

    def assign(self, agent: int, task: int) -> float:
        finish = (self.time
                  + self.scenario.travel_time(self.positions[agent], task)
                  + float(self.scenario.durations[task]))
        self.free_at[agent] = finish
        self.positions[agent] = self.scenario.task_locations[task].copy()
        self.assigned.add(task)
        self.finish_times[task] = finish
        return finish

    def observation_features(self) -> tuple[np.ndarray, np.ndarray]:
        """Context and per-action feature blocks at the current decision point."""
        free = self.free_agents()
        feas_tasks = set(self.feasible_tasks())
        context = np.array([
            self.time / DURATION_SCALE,
            1.0 if 0 in free else 0.0,
            1.0 if 1 in free else 0.0,
            (TASK_COUNT - len(self.assigned)) / TASK_COUNT,
        ])
        feats = np.zeros((ACTION_COUNT, ACTION_DIM))
        for g in range(AGENT_COUNT):
            for j in range(TASK_COUNT):
                feasible = (g in free) and (j in feas_tasks)
                feats[action_id(g, j)] = [
                    (self.scenario.deadlines[j] - self.time) / DURATION_SCALE,
                    self.scenario.distance(self.positions[g], j) / BOARD,
                    j / (TASK_COUNT - 1),
                    -j / (TASK_COUNT - 1),
                    max(0.0, self.scenario.wait_earliest[j] - self.time) / DURATION_SCALE,
                    1.0 if feasible else 0.0,
                ]
        return context, feats


def _best_pair(state: _SimState, profile: ExpertProfile) -> tuple[int, int]:
    best, best_score = None, -np.inf
    for g, j in state.feasible_pairs():
        score = expert_priority(state.scenario, state.positions[g], j, profile)
        if score > best_score + 1e-12:
            best, best_score = (g, j), score
    if best is None:
        raise DeadlockError("no feasible (agent, task) pair")
    return best


def rollout_expert(scenario: SchedulingScenario, profile: ExpertProfile, seed: int = 0,
                   schedule_id: str = "sched", demonstrator_id: str = "expert",
                   multilabel: bool = False) -> Schedule:
    """Greedy expert rollout over the scenario.

    The expert is deterministic given (scenario, profile); ties break toward
    the lowest (agent, task). Raises DeadlockError when no progress is
    possible or a completion misses its deadline.
    """
    state = _SimState(scenario)
    observations = []
    timestep = 0
    while len(state.assigned) < TASK_COUNT:
        if not state.free_agents() or not state.feasible_tasks():
            if not state.advance():
                raise DeadlockError("stuck before completing all tasks")
            continue
        context, feats = state.observation_features()
        taken = []
        # Single-label: one assignment per decision point. Multi-label: all
        # currently-free agents commit simultaneously against one snapshot.
        rounds = len(state.free_agents()) if multilabel else 1
        for _ in range(rounds):
            if not state.feasible_tasks() or not state.free_agents():
                break
            g, j = _best_pair(state, profile)
            finish = state.assign(g, j)
            if finish > scenario.deadlines[j] + 1e-9:
                raise DeadlockError(f"task {j} completes at {finish:.3f} past "
                                    f"deadline {scenario.deadlines[j]:.3f}")
            taken.append(action_id(g, j))
        observations.append(Observation(context, feats, tuple(taken), timestep))
        timestep += 1
    scenario.completed = set(state.assigned)
    scenario.current_time = float(max(state.finish_times.values()))
    return Schedule(schedule_id, demonstrator_id, observations)


def actions_of(schedule: Schedule) -> list[tuple[int, int]]:
    """Flatten a schedule's taken action ids back to (agent, task) pairs."""
    return [action_pair(a) for obs in schedule.observations for a in obs.taken_actions]


def verify_rollout(scenario: SchedulingScenario, schedule: Schedule) -> None:
    """Independent constraint check over an emitted trajectory.

    Replays the recorded decisions at their recorded times and validates wait
    release, single assignment, agent availability, deadlines, and that the
    two agents never service the same location.
    """
    free_at = np.zeros(AGENT_COUNT)
    positions = AGENT_START.copy()
    assigned: set[int] = set()
    if np.array_equal(positions[0], positions[1]):
        raise ConstraintViolation("agents start at the same location")
    for obs in schedule.observations:
        t = float(obs.context[0]) * DURATION_SCALE
        for a in obs.taken_actions:
            g, j = action_pair(a)
            if obs.action_features[a, -1] != 1.0:
                raise ConstraintViolation(
                    f"t={t:.3f}: chosen action {a} was recorded infeasible"
                )
            if j in assigned:
                raise ConstraintViolation(f"task {j} assigned twice")
            if scenario.wait_earliest[j] > t + 1e-6:
                raise ConstraintViolation(
                    f"task {j} started at {t:.3f} before release {scenario.wait_earliest[j]:.3f}"
                )
            if free_at[g] > t + 1e-6:
                raise ConstraintViolation(
                    f"agent {g} assigned at {t:.3f} while busy until {free_at[g]:.3f}"
                )
            finish = t + scenario.travel_time(positions[g], j) + float(scenario.durations[j])
            if finish > scenario.deadlines[j] + 1e-6:
                raise ConstraintViolation(
                    f"task {j} finishes at {finish:.3f} after deadline "
                    f"{scenario.deadlines[j]:.3f}"
                )
            assigned.add(j)
            free_at[g] = finish
            positions[g] = scenario.task_locations[j]
    if len(assigned) != TASK_COUNT:
        raise ConstraintViolation(f"only {len(assigned)} of {TASK_COUNT} tasks assigned")
    pairs = actions_of(schedule)
    tasks0 = {j for g, j in pairs if g == 0}
    tasks1 = {j for g, j in pairs if g == 1}
    if tasks0 & tasks1:
        raise ConstraintViolation("both agents visit the same task location")


HEURISTIC_STRENGTH = (150.0, 300.0)


def default_beta_sampler(rng: np.random.Generator) -> ExpertProfile:
    """One dominant prioritization heuristic per demonstrator.

    Each expert weights either the deadline or the distance heuristic heavily
    (or neither, leaving pure index preference); the index term then only
    breaks near-ties. Uniform blend weights make the argmax depend on fine
    weighted sums that no single-feature threshold model can track, which
    collapses every tree-shaped learner; dominant weights keep the decision
    rule crisp while preserving heterogeneity across six expert archetypes.
    """
    style = rng.integers(3)
    strength = float(rng.uniform(*HEURISTIC_STRENGTH))
    beta3 = int(rng.random() < 0.5)
    if style == 0:
        return ExpertProfile(strength, 0.0, beta3)
    if style == 1:
        return ExpertProfile(0.0, strength, beta3)
    return ExpertProfile(0.0, 0.0, beta3)


@dataclass
class RolloutTrace:
    scenario: SchedulingScenario
    profile: ExpertProfile
    schedule: Schedule


def simulate(count: int, seed: int = 0, beta_sampler=None, multilabel: bool = False,
             max_retries: int = 50) -> tuple[list[RolloutTrace], int]:
    """Roll out ``count`` expert schedules; returns traces and how many
    scenario draws were discarded for deadlock or deadline misses."""
    if count < 1:
        raise ValueError("count must be positive")
    sampler = beta_sampler or default_beta_sampler
    traces = []
    discarded = 0
    for i in range(count):
        profile_rng = np.random.default_rng(splitmix64(seed, 2 * i))
        profile = sampler(profile_rng)
        for attempt in range(max_retries):
            scen_rng = np.random.default_rng(splitmix64(seed, 2 * i + 1) + attempt)
            scenario = make_scenario(scen_rng)
            try:
                schedule = rollout_expert(
                    scenario, profile, seed=seed,
                    schedule_id=f"sched-{seed}-{i}", demonstrator_id=f"expert{i}",
                    multilabel=multilabel,
                )
            except DeadlockError:
                discarded += 1
                continue
            traces.append(RolloutTrace(scenario, profile, schedule))
            break
        else:
            raise DeadlockError(f"could not generate a solvable scenario for expert {i}")
    return traces, discarded


def _dataset_from_traces(traces: list[RolloutTrace], tag: str) -> DemonstrationSet:
    return DemonstrationSet(
        schedules=[t.schedule for t in traces],
        action_count=ACTION_COUNT,
        context_dim=CONTEXT_DIM,
        action_dim=ACTION_DIM,
        domain_tag=tag,
    )


def generate_scheduling(count: int, beta_sampler=None, seed: int = 0) -> DemonstrationSet:
    traces, _ = simulate(count, seed=seed, beta_sampler=beta_sampler)
    return _dataset_from_traces(traces, "scheduling")


def generate_scheduling_multilabel(count: int, beta_sampler=None, seed: int = 0
                                   ) -> DemonstrationSet:
    traces, _ = simulate(count, seed=seed, beta_sampler=beta_sampler, multilabel=True)
    return _dataset_from_traces(traces, "scheduling-multilabel")
