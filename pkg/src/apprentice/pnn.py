"""Feed-forward scorer whose input carries a learned per-demonstrator embedding.

The embedding table trains jointly with the network weights; at test time the
weights stay frozen and only a fresh embedding (started from the mean of the
trained table) is fitted to the new demonstrator's observed decisions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from apprentice import pairwise as pw
from apprentice.dataset import DemonstrationSet, Observation, Schedule
from apprentice.diffcore import (
    Parameter,
    SgdConfig,
    Tape,
    binary_ce_from_logits,
    multiclass_ce_from_logits,
    multilabel_ce_from_logits,
    run_sgd,
    sgd_step,
    splitmix64,
)
from apprentice.nets import FeedForward

CHECKPOINT_HEADER = "apprentice-checkpoint v1"


@dataclass
class Embedding:
    owner: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"embedding for {self.owner} has non-finite values")


class EmbeddingTable:
    """Per-owner rows of one trainable matrix parameter."""

    def __init__(self, d: int, init_std: float = 0.1):
        self.d = d
        self.init_std = init_std
        self.owners: list[str] = []
        self.index: dict[str, int] = {}
        self.matrix = Parameter(np.zeros((0, d)), is_embedding=True, name="embeddings")

    def ensure(self, owners: list[str], rng: np.random.Generator) -> None:
        new = [o for o in owners if o not in self.index]
        if not new:
            return
        rows = rng.normal(0.0, self.init_std, size=(len(new), self.d))
        self.matrix.value = np.vstack([self.matrix.value, rows])
        self.matrix.grad = np.zeros_like(self.matrix.value)
        self.matrix.velocity = np.zeros_like(self.matrix.value)
        for o in new:
            self.index[o] = len(self.owners)
            self.owners.append(o)

    def rows(self, owners) -> np.ndarray:
        return np.array([self.index[o] for o in owners], dtype=np.int64)

    def get(self, owner: str) -> Embedding:
        return Embedding(owner, self.matrix.value[self.index[owner]].copy())

    def mean_vector(self) -> np.ndarray:
        if not self.owners:
            return np.zeros(self.d)
        return self.matrix.value.mean(axis=0)

    def state_dict(self) -> dict:
        return {
            "d": self.d,
            "init_std": self.init_std,
            "owners": self.owners,
            "matrix": self.matrix.value.tolist(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "EmbeddingTable":
        table = cls(state["d"], state["init_std"])
        table.owners = list(state["owners"])
        table.index = {o: i for i, o in enumerate(table.owners)}
        table.matrix = Parameter(
            np.array(state["matrix"], dtype=np.float64).reshape(len(table.owners), table.d),
            is_embedding=True, name="embeddings",
        )
        return table


class PnnModel:
    """Personalized feed-forward model for one framing of the data."""

    kind = "pnn"

    def __init__(self, context_dim: int, action_dim: int, action_count: int,
                 framing: str = "pairwise", d: int = 2, hidden=(32, 32),
                 activation: str = "tanh", seed: int = 0, multilabel: bool = False):
        if framing not in pw.FRAMINGS:
            raise ValueError(f"unknown framing {framing!r}")
        self.context_dim = context_dim
        self.action_dim = action_dim
        self.action_count = action_count
        self.framing = framing
        self.d = d
        self.hidden = tuple(hidden)
        self.activation = activation
        self.seed = seed
        self.multilabel = multilabel
        if framing in ("pairwise", "pointwise"):
            feat = context_dim + action_dim
            out = 1
        else:
            feat = context_dim + action_count * action_dim
            out = action_count
        self.input_width = d + feat
        self.net = FeedForward([self.input_width, *self.hidden, out],
                               seed=seed, activation=activation)
        self.table = EmbeddingTable(d)

    # -- core forward paths -------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return [*self.net.parameters(), self.table.matrix]

    def weight_parameters(self) -> list[Parameter]:
        return self.net.parameters()

    def logits_var(self, tape: Tape, x):
        return self.net.logits(tape, x)

    def binary_logits_var(self, tape: Tape, x):
        return tape.reshape(self.logits_var(tape, x), (x.value.shape[0],))

    def _embed_input(self, tape: Tape, features: np.ndarray, demo_rows: np.ndarray):
        emb = tape.gather_rows(tape.param(self.table.matrix), demo_rows)
        return tape.concat([emb, tape.const(features)], axis=1)

    def _batch_loss(self, features, demo_rows, labels):
        tape = Tape()
        x = self._embed_input(tape, features, demo_rows)
        return tape, framed_loss(self, tape, x, labels)

    def score_matrix(self, features: np.ndarray) -> np.ndarray:
        """Scores in (0,1) for full feature rows (embedding block included)."""
        tape = Tape()
        out = self.logits_var(tape, tape.const(features))
        if self.framing in ("pairwise", "pointwise"):
            return _sigmoid(np.asarray(out.value).reshape(-1))
        raise ValueError("score_matrix applies to pairwise/pointwise framings")

    def class_probs(self, features: np.ndarray) -> np.ndarray:
        tape = Tape()
        out = np.asarray(self.logits_var(tape, tape.const(features)).value)
        if self.multilabel:
            return _sigmoid(out)
        z = out - out.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def checksum(self) -> float:
        return self.net.checksum()

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_HEADER,
            "kind": self.kind,
            "config": {
                "context_dim": self.context_dim,
                "action_dim": self.action_dim,
                "action_count": self.action_count,
                "framing": self.framing,
                "d": self.d,
                "hidden": list(self.hidden),
                "activation": self.activation,
                "seed": self.seed,
                "multilabel": self.multilabel,
            },
            "net": self.net.state_dict(),
            "embeddings": self.table.state_dict(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "PnnModel":
        model = cls(**state["config"])
        model.net = FeedForward.from_state(state["net"])
        model.table = EmbeddingTable.from_state(state["embeddings"])
        return model


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[np.logical_not(pos)])
    out[np.logical_not(pos)] = ex / (1.0 + ex)
    return out


def framed_loss(model, tape: Tape, x, labels):
    """Loss for a batch already embedded as ``x``, dispatched on the framing."""
    n_classes = getattr(model, "n_classes", model.action_count)
    if model.framing in ("pairwise", "pointwise"):
        return binary_ce_from_logits(tape, model.binary_logits_var(tape, x), labels)
    if model.multilabel:
        return multilabel_ce_from_logits(tape, model.logits_var(tape, x), labels)
    return multiclass_ce_from_logits(tape, model.logits_var(tape, x), labels,
                                     n_classes=n_classes)


def train(model: PnnModel, data: DemonstrationSet, framing: str, sgd: SgdConfig,
          mask_fn: Optional[Callable[[Observation], np.ndarray]] = None,
          post_step: Optional[Callable[[], None]] = None,
          on_epoch: Optional[Callable[[int], None]] = None) -> list[float]:
    """Fit weights and the embeddings of every training demonstrator jointly.

    Returns the per-epoch mean loss curve; raises TrainingError if the loss
    fails to decrease or turns non-finite.
    """
    if framing != model.framing:
        raise ValueError(f"model built for {model.framing!r}, asked to train {framing!r}")
    arrays = pw.framed_arrays(data, framing, mask_fn=mask_fn)
    model.multilabel = arrays.multilabel and framing == "standard"
    rng = np.random.default_rng(splitmix64(model.seed, 1))
    model.table.ensure(arrays.demonstrators, rng)
    demo_rows = model.table.rows([arrays.demonstrators[i] for i in arrays.demo_rows])
    params = model.parameters()

    def builder(batch):
        return model._batch_loss(arrays.features[batch], demo_rows[batch],
                                 arrays.labels[batch])

    return run_sgd(builder, len(arrays.labels), params, sgd,
                   post_step=post_step, on_epoch=on_epoch)


class _FrozenWeights:
    def __init__(self, model):
        self.params = model.weight_parameters()

    def __enter__(self):
        self.saved = [p.trainable for p in self.params]
        for p in self.params:
            p.trainable = False

    def __exit__(self, *exc):
        for p, s in zip(self.params, self.saved):
            p.trainable = s


def adapt_embedding(model: PnnModel, schedule: Schedule, sgd: SgdConfig,
                    mode: str = "online", passes: int = 1,
                    mask_fn: Optional[Callable[[Observation], np.ndarray]] = None,
                    starts: int = 1) -> Embedding:
    """Infer an embedding for an unseen demonstrator; network weights stay put.

    Starts from the mean of the trained table, then applies gradient steps on
    the schedule's decisions in timestep order: ``online`` takes ``passes``
    steps after each observation, ``batch`` takes ``sgd.epochs`` full-set
    steps. With ``starts`` > 1, the centroids of a k-means split of the
    trained table are tried as additional starting points and the candidate
    with the lowest loss on the observed decisions wins (the mean stays the
    first candidate).
    """
    if mode not in ("online", "batch"):
        raise ValueError(f"unknown adaptation mode {mode!r}")
    mean_start = model.table.mean_vector()
    if not schedule.observations or (mode == "online" and passes == 0):
        return Embedding(schedule.demonstrator_id, mean_start.copy())

    def obs_arrays(obs):
        mask = mask_fn(obs) if mask_fn is not None else None
        multilabel = len(obs.taken_actions) > 1
        if model.framing == "pairwise":
            exs = pw.build_pairwise(obs, (), mask=mask, multilabel=multilabel)
            feats = np.array([e.features for e in exs])
            labels = np.array([float(e.label) for e in exs])
        elif model.framing == "pointwise":
            exs = pw.build_pointwise(obs, (), mask=mask)
            feats = np.array([e.features for e in exs])
            labels = np.array([float(e.label) for e in exs])
        else:
            ex = pw.build_standard(obs, ())
            feats = ex.features[None, :]
            if isinstance(ex.label, np.ndarray):
                labels = ex.label[None, :]
            else:
                labels = np.array([ex.label])
        return feats, labels

    per_obs = [obs_arrays(o) for o in schedule.observations]
    per_obs = [(f, l) for f, l in per_obs if f.size]
    if not per_obs:
        return Embedding(schedule.demonstrator_id, mean_start.copy())
    all_feats = np.vstack([f for f, _ in per_obs])
    if model.framing == "standard" and model.multilabel:
        all_labels = np.vstack([l for _, l in per_obs])
    else:
        all_labels = np.concatenate([l for _, l in per_obs])

    def loss_with(omega: Parameter, feats, labels, backprop: bool) -> float:
        tape = Tape()
        ones = tape.const(np.ones((feats.shape[0], 1)))
        emb = tape.matmul(ones, tape.reshape(tape.param(omega), (1, model.d)))
        x = tape.concat([emb, tape.const(feats)], axis=1)
        loss = framed_loss(model, tape, x, labels)
        value = float(loss.value)
        if backprop:
            tape.backward(output=loss)
            sgd_step([omega], sgd)
        else:
            omega.reset_grad()
        return value

    start_points = [mean_start]
    if starts > 1 and len(model.table.owners) >= starts:
        from apprentice.baselines import KMeans
        km = KMeans(starts - 1, seed=0).fit(model.table.matrix.value)
        start_points += [km.centroids[i].copy() for i in range(km.centroids.shape[0])]

    best: Optional[tuple] = None
    with _FrozenWeights(model):
        for point in start_points:
            omega = Parameter(point.copy(), is_embedding=True,
                              name=f"omega[{schedule.demonstrator_id}]")
            if mode == "online":
                for feats, labels in per_obs:
                    for _ in range(passes):
                        loss_with(omega, feats, labels, backprop=True)
            else:
                for _ in range(sgd.epochs):
                    loss_with(omega, all_feats, all_labels, backprop=True)
            final = loss_with(omega, all_feats, all_labels, backprop=False)
            if best is None or final < best[0]:
                best = (final, omega.value.copy())
    return Embedding(schedule.demonstrator_id, best[1])


def predict(model: PnnModel, obs: Observation, embedding,
            mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Probability vector over actions for one observation."""
    omega = np.asarray(getattr(embedding, "values", embedding), dtype=np.float64)
    if omega.shape != (model.d,):
        raise ValueError(f"embedding width {omega.shape} != d={model.d}")
    if obs.action_features.shape != (model.action_count, model.action_dim):
        raise ValueError("observation feature widths do not match the model")
    if model.framing == "pairwise":
        return pw.predict_action(model.score_matrix, obs, Embedding("", omega), mask=mask)
    if model.framing == "pointwise":
        exs = pw.build_pointwise(obs, Embedding("", omega))
        scores = model.score_matrix(np.array([e.features for e in exs]))
        if mask is not None:
            scores = np.where(np.asarray(mask, dtype=bool), scores, 0.0)
        total = scores.sum()
        if total <= 0.0:
            n = len(scores) if mask is None else int(np.sum(mask))
            out = np.where(np.asarray(mask, dtype=bool), 1.0 / n, 0.0) if mask is not None \
                else np.full(len(scores), 1.0 / len(scores))
            return out
        return scores / total
    ex = pw.build_standard(obs, Embedding("", omega))
    probs = model.class_probs(ex.features[None, :])[0]
    if mask is not None:
        probs = np.where(np.asarray(mask, dtype=bool), probs, 0.0)
        total = probs.sum()
        if total <= 0.0:
            m = np.asarray(mask, dtype=bool)
            return np.where(m, 1.0 / m.sum(), 0.0)
        probs = probs / total
    return probs


def save_checkpoint(model, path) -> None:
    Path(path).write_text(json.dumps(model.state_dict()), encoding="utf-8")


def load_checkpoint(path):
    state = json.loads(Path(path).read_text(encoding="utf-8"))
    if state.get("format") != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER} file")
    kind = state.get("kind")
    if kind == "pnn":
        return PnnModel.from_state(state)
    if kind == "pddt":
        from apprentice.pddt import PddtModel
        return PddtModel.from_state(state)
    if kind == "transition":
        from apprentice.actionrep import TransitionModel
        return TransitionModel.from_state(state)
    if kind == "cart":
        from apprentice.baselines import CartTree
        return CartTree.from_state(state)
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
