"""Demonstration data model and its line-delimited on-disk format.

A demonstration set holds schedules (ordered decisions of one demonstrator).
Files start with the header ``apprentice-dataset v1`` and carry one record per
observation; floats are written with ``repr`` so round-trips are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_HEADER = "apprentice-dataset v1"


class DatasetError(ValueError):
    """Malformed file, schema mismatch, or invariant violation."""


@dataclass
class Observation:
    """One decision: shared context, per-action features, and what was taken."""

    context: np.ndarray              # features common to all actions
    action_features: np.ndarray      # (action_count, action_dim)
    taken_actions: tuple[int, ...]   # singleton for single-label domains
    timestep: int

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        self.action_features = np.asarray(self.action_features, dtype=np.float64)
        self.taken_actions = tuple(sorted(int(a) for a in self.taken_actions))
        if self.timestep < 0:
            raise DatasetError("timestep must be non-negative")
        for a in self.taken_actions:
            if not (0 <= a < self.action_features.shape[0]):
                raise DatasetError(f"taken action {a} outside action range")

    @property
    def taken_action(self) -> int:
        if len(self.taken_actions) != 1:
            raise DatasetError("observation is multi-label; no single taken action")
        return self.taken_actions[0]


@dataclass
class Schedule:
    schedule_id: str
    demonstrator_id: str
    observations: list[Observation] = field(default_factory=list)

    def __post_init__(self):
        steps = [o.timestep for o in self.observations]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise DatasetError(f"schedule {self.schedule_id}: timesteps not strictly increasing")

    def __len__(self):
        return len(self.observations)


@dataclass
class DemonstrationSet:
    schedules: list[Schedule]
    action_count: int
    context_dim: int
    action_dim: int
    domain_tag: str = "generic"

    def __post_init__(self):
        if self.action_count < 1:
            raise DatasetError("no actions")
        for s in self.schedules:
            for o in s.observations:
                if o.action_features.shape != (self.action_count, self.action_dim):
                    raise DatasetError(
                        f"schedule {s.schedule_id}: action feature shape "
                        f"{o.action_features.shape} != ({self.action_count}, {self.action_dim})"
                    )
                if o.context.shape != (self.context_dim,):
                    raise DatasetError(
                        f"schedule {s.schedule_id}: context shape {o.context.shape} "
                        f"!= ({self.context_dim},)"
                    )

    @property
    def demonstrator_ids(self) -> list[str]:
        seen = []
        for s in self.schedules:
            if s.demonstrator_id not in seen:
                seen.append(s.demonstrator_id)
        return seen

    def observation_count(self) -> int:
        return sum(len(s) for s in self.schedules)

    def __eq__(self, other):
        if not isinstance(other, DemonstrationSet):
            return NotImplemented
        if (self.action_count, self.context_dim, self.action_dim, self.domain_tag) != (
            other.action_count, other.context_dim, other.action_dim, other.domain_tag
        ):
            return False
        if len(self.schedules) != len(other.schedules):
            return False
        for a, b in zip(self.schedules, other.schedules):
            if (a.schedule_id, a.demonstrator_id) != (b.schedule_id, b.demonstrator_id):
                return False
            if len(a) != len(b):
                return False
            for oa, ob in zip(a.observations, b.observations):
                if oa.timestep != ob.timestep or oa.taken_actions != ob.taken_actions:
                    return False
                if not np.array_equal(oa.context, ob.context):
                    return False
                if not np.array_equal(oa.action_features, ob.action_features):
                    return False
        return True


def _fmt_vec(v: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in v)


def _parse_vec(s: str, where: str) -> np.ndarray:
    if s == "":
        return np.zeros(0)
    try:
        return np.array([float(x) for x in s.split(",")], dtype=np.float64)
    except ValueError as e:
        raise DatasetError(f"{where}: bad float in vector: {e}") from None


def save(dset: DemonstrationSet, path) -> None:
    """Write the set; one tab-separated record per observation."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_HEADER}\t{dset.domain_tag}\t{dset.action_count}"
                 f"\t{dset.context_dim}\t{dset.action_dim}\n")
        for s in dset.schedules:
            for o in s.observations:
                fh.write("\t".join([
                    s.schedule_id,
                    s.demonstrator_id,
                    str(o.timestep),
                    _fmt_vec(o.context),
                    ";".join(_fmt_vec(row) for row in o.action_features),
                    ",".join(str(a) for a in o.taken_actions),
                ]) + "\n")


def load(path) -> DemonstrationSet:
    """Read a dataset file, validating schema version and record shapes."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        parts = header.split("\t")
        if parts[0] != FORMAT_HEADER:
            raise DatasetError(f"{path}:1: expected header '{FORMAT_HEADER}', got '{parts[0]}'")
        if len(parts) != 5:
            raise DatasetError(f"{path}:1: malformed header: {header!r}")
        domain_tag = parts[1]
        try:
            action_count, context_dim, action_dim = (int(x) for x in parts[2:5])
        except ValueError:
            raise DatasetError(f"{path}:1: non-integer dimensions in header") from None
        if action_count < 1:
            raise DatasetError(f"{path}:1: no actions")

        schedules: dict[str, Schedule] = {}
        order: list[str] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            where = f"{path}:{lineno}"
            if len(fields) != 6:
                raise DatasetError(f"{where}: expected 6 fields, got {len(fields)}")
            sid, did, ts, ctx_s, af_s, taken_s = fields
            try:
                timestep = int(ts)
            except ValueError:
                raise DatasetError(f"{where}: bad timestep {ts!r}") from None
            context = _parse_vec(ctx_s, where)
            rows = af_s.split(";") if af_s else []
            action_features = np.array(
                [_parse_vec(r, where) for r in rows], dtype=np.float64
            )
            if action_features.shape != (action_count, action_dim):
                raise DatasetError(
                    f"{where}: action features shaped {action_features.shape}, "
                    f"expected ({action_count}, {action_dim})"
                )
            if context.shape != (context_dim,):
                raise DatasetError(f"{where}: context length {context.shape[0]} != {context_dim}")
            taken = tuple(int(a) for a in taken_s.split(",") if a != "")
            obs = Observation(context, action_features, taken, timestep)
            if sid not in schedules:
                schedules[sid] = Schedule(sid, did, [])
                order.append(sid)
            elif schedules[sid].demonstrator_id != did:
                raise DatasetError(f"{where}: schedule {sid} changes demonstrator")
            sched = schedules[sid]
            if sched.observations and sched.observations[-1].timestep >= timestep:
                raise DatasetError(f"{where}: timesteps not strictly increasing in {sid}")
            sched.observations.append(obs)

    return DemonstrationSet(
        schedules=[schedules[sid] for sid in order],
        action_count=action_count,
        context_dim=context_dim,
        action_dim=action_dim,
        domain_tag=domain_tag,
    )


def split(dset: DemonstrationSet, train_fraction: float, seed: int
          ) -> tuple[DemonstrationSet, DemonstrationSet]:
    """Partition whole schedules into train/test; deterministic under seed."""
    if not (0.0 < train_fraction < 1.0):
        raise DatasetError("train_fraction must lie in (0, 1)")
    n = len(dset.schedules)
    if n < 2:
        raise DatasetError("need at least 2 schedules to split")
    n_train = round(train_fraction * n)
    if n_train == 0 or n_train == n:
        raise DatasetError(
            f"train_fraction {train_fraction} leaves an empty side for {n} schedules"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    pick = lambda idxs: DemonstrationSet(
        schedules=[dset.schedules[i] for i in sorted(idxs)],
        action_count=dset.action_count,
        context_dim=dset.context_dim,
        action_dim=dset.action_dim,
        domain_tag=dset.domain_tag,
    )
    return pick(order[:n_train].tolist()), pick(order[n_train:].tolist())
