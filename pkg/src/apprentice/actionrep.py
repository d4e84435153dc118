"""Learned per-action embeddings from a one-step transition model.

When a domain exposes no per-action feature vectors, the dynamics themselves
identify actions: a network is trained to predict the next shared context
from the current one plus a trainable embedding of the action taken. The
learned action embeddings then stand in for action features in the pairwise
framing.
"""

from __future__ import annotations

import numpy as np

from apprentice.dataset import DemonstrationSet, Observation, Schedule
from apprentice.diffcore import Parameter, SgdConfig, Tape, run_sgd
from apprentice.nets import FeedForward
from apprentice.pnn import CHECKPOINT_HEADER


class TransitionModel:
    """Predicts the next context vector from (context, action embedding)."""

    kind = "transition"

    def __init__(self, context_dim: int, action_count: int, embedding_dim: int = 8,
                 hidden: int = 64, seed: int = 0):
        self.context_dim = context_dim
        self.action_count = action_count
        self.embedding_dim = embedding_dim
        self.hidden = hidden
        self.seed = seed
        self.net = FeedForward([context_dim + embedding_dim, hidden, context_dim],
                               seed=seed, activation="tanh")
        rng = np.random.default_rng(seed)
        self.action_table = Parameter(
            rng.normal(0.0, 0.1, size=(action_count, embedding_dim)),
            is_embedding=True, name="action_embeddings",
        )

    def parameters(self) -> list[Parameter]:
        return [*self.net.parameters(), self.action_table]

    def predict_next(self, contexts: np.ndarray, action_ids: np.ndarray) -> np.ndarray:
        tape = Tape()
        emb = tape.gather_rows(tape.param(self.action_table),
                               np.asarray(action_ids, dtype=np.int64))
        x = tape.concat([tape.const(np.atleast_2d(contexts)), emb], axis=1)
        return np.asarray(self.net.logits(tape, x).value)

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_HEADER,
            "kind": self.kind,
            "config": {
                "context_dim": self.context_dim,
                "action_count": self.action_count,
                "embedding_dim": self.embedding_dim,
                "hidden": self.hidden,
                "seed": self.seed,
            },
            "net": self.net.state_dict(),
            "action_table": self.action_table.value.tolist(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "TransitionModel":
        model = cls(**state["config"])
        model.net = FeedForward.from_state(state["net"])
        model.action_table.value = np.array(state["action_table"])
        return model


def transition_pairs(data: DemonstrationSet) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """(context_t, action_t, context_t+1) triples from consecutive
    observations; schedules too short to pair are counted and skipped."""
    ctx, acts, nxt = [], [], []
    skipped = 0
    for sched in data.schedules:
        if len(sched.observations) < 2:
            skipped += 1
            continue
        for a, b in zip(sched.observations, sched.observations[1:]):
            for action in a.taken_actions:
                ctx.append(a.context)
                acts.append(action)
                nxt.append(b.context)
    return np.array(ctx), np.array(acts, dtype=np.int64), np.array(nxt), skipped


def train_transition(trajectories: DemonstrationSet, sgd: SgdConfig,
                     embedding_dim: int = 8, hidden: int = 64,
                     seed: int = 0) -> tuple[TransitionModel, list[float]]:
    """Fit the transition network and all action embeddings jointly by
    squared error on next-context prediction."""
    model = TransitionModel(trajectories.context_dim, trajectories.action_count,
                            embedding_dim=embedding_dim, hidden=hidden, seed=seed)
    ctx, acts, nxt, model.skipped_schedules = transition_pairs(trajectories)
    if len(ctx) == 0:
        raise ValueError("no consecutive observation pairs to train on")
    params = model.parameters()

    def builder(batch):
        tape = Tape()
        emb = tape.gather_rows(tape.param(model.action_table), acts[batch])
        x = tape.concat([tape.const(ctx[batch]), emb], axis=1)
        pred = model.net.logits(tape, x)
        err = tape.sub(pred, tape.const(nxt[batch]))
        loss = tape.div(tape.sum(tape.mul(err, err)), tape.const(float(len(batch))))
        return tape, loss

    curve = run_sgd(builder, len(ctx), params, sgd)
    return model, curve


def action_features(model: TransitionModel, action: int) -> np.ndarray:
    """The learned embedding for one action, usable as its feature vector."""
    if not (0 <= action < model.action_count):
        raise ValueError(f"unknown action id {action}")
    return model.action_table.value[action].copy()


def substitute_action_features(data: DemonstrationSet,
                               model: TransitionModel) -> DemonstrationSet:
    """Replace every observation's per-action features with the learned
    action embeddings (constant across timesteps)."""
    table = model.action_table.value
    schedules = []
    for sched in data.schedules:
        obs = [
            Observation(o.context, table.copy(), o.taken_actions, o.timestep)
            for o in sched.observations
        ]
        schedules.append(Schedule(sched.schedule_id, sched.demonstrator_id, obs))
    return DemonstrationSet(
        schedules=schedules,
        action_count=data.action_count,
        context_dim=data.context_dim,
        action_dim=model.embedding_dim,
        domain_tag=data.domain_tag + "+learned-actions",
    )
