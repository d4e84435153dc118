"""Counterfactual pairwise examples, marginalized action prediction, and the
pointwise / standard framings used as baselines.

A pairwise example compares the taken action ``a`` against an alternative
``a'`` through the feature vector ``[embedding | context | x_a - x_a']``; the
reverse comparison is the matching negative. A scorer trained on these is
turned into an action distribution by summing each action's scores against
all alternatives and normalizing over all ordered pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from apprentice.dataset import DemonstrationSet, Observation

FRAMINGS = ("pairwise", "pointwise", "standard")


@dataclass
class PairwiseExample:
    features: np.ndarray
    label: int
    meta: tuple  # (demonstrator, timestep, a, a_prime)


@dataclass
class PointwiseExample:
    features: np.ndarray
    label: int
    meta: tuple  # (demonstrator, timestep, a)


@dataclass
class StandardExample:
    features: np.ndarray
    label: object          # int for single-label, multi-hot vector otherwise
    meta: tuple            # (demonstrator, timestep)


def _emb_values(embedding) -> np.ndarray:
    values = getattr(embedding, "values", embedding)
    return np.asarray(values, dtype=np.float64)


def _alternative_ids(obs: Observation, mask: Optional[np.ndarray]) -> np.ndarray:
    n = obs.action_features.shape[0]
    ids = np.arange(n)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise ValueError(f"mask length {mask.shape} != action count {n}")
        ids = ids[mask]
    return ids


def build_pairwise(obs: Observation, embedding, mask: Optional[np.ndarray] = None,
                   multilabel: bool = False) -> list[PairwiseExample]:
    """Emit the positive and negative comparison for every alternative action.

    Single-label observations yield exactly ``2 * (|A| - 1)`` examples (fewer
    under a mask). Multi-label observations pair each taken action against
    the non-taken actions only; pass ``multilabel=True`` to allow them.
    """
    omega = _emb_values(embedding)
    owner = getattr(embedding, "owner", None)
    taken = obs.taken_actions
    if len(taken) != 1 and not multilabel:
        raise ValueError(
            f"observation at t={obs.timestep} takes {len(taken)} actions; "
            "single-label mode requires exactly one"
        )
    candidates = _alternative_ids(obs, mask)
    taken_set = set(taken)
    examples = []
    for a in taken:
        base = np.concatenate([omega, obs.context])
        for a_prime in candidates:
            if a_prime in taken_set:
                continue
            diff = obs.action_features[a] - obs.action_features[a_prime]
            examples.append(PairwiseExample(
                np.concatenate([base, diff]), 1, (owner, obs.timestep, a, int(a_prime))
            ))
            examples.append(PairwiseExample(
                np.concatenate([base, -diff]), 0, (owner, obs.timestep, int(a_prime), a)
            ))
    return examples


def build_pointwise(obs: Observation, embedding,
                    mask: Optional[np.ndarray] = None) -> list[PointwiseExample]:
    """One example per action, labeled by whether it was taken."""
    omega = _emb_values(embedding)
    base = np.concatenate([omega, obs.context])
    taken = set(obs.taken_actions)
    return [
        PointwiseExample(
            np.concatenate([base, obs.action_features[a]]),
            int(a in taken),
            (None, obs.timestep, int(a)),
        )
        for a in _alternative_ids(obs, mask)
    ]


def build_standard(obs: Observation, embedding) -> StandardExample:
    """One multiclass (or multi-hot) example per timestep with all action
    feature blocks concatenated after the context."""
    omega = _emb_values(embedding)
    features = np.concatenate([omega, obs.context, obs.action_features.ravel()])
    if len(obs.taken_actions) == 1:
        label: object = obs.taken_action
    else:
        label = np.zeros(obs.action_features.shape[0])
        label[list(obs.taken_actions)] = 1.0
    return StandardExample(features, label, (None, obs.timestep))


def pair_feature_matrix(obs: Observation, embedding,
                        candidates: np.ndarray) -> tuple[np.ndarray, list]:
    """Features for all ordered pairs (a, a') over ``candidates``, a != a'."""
    omega = _emb_values(embedding)
    base = np.concatenate([omega, obs.context])
    rows, pairs = [], []
    for a in candidates:
        for a_prime in candidates:
            if a_prime == a:
                continue
            diff = obs.action_features[a] - obs.action_features[a_prime]
            rows.append(np.concatenate([base, diff]))
            pairs.append((int(a), int(a_prime)))
    return np.array(rows), pairs


def predict_action(f: Callable[[np.ndarray], np.ndarray], obs: Observation, embedding,
                   mask: Optional[np.ndarray] = None,
                   include_self_pairs: bool = False) -> np.ndarray:
    """Marginalize a pairwise scorer into a distribution over actions.

    ``f`` maps a matrix of pair features to scores in (0, 1). Each action's
    probability is its summed score against all alternatives, normalized by
    the total over all ordered pairs. Self-comparisons are excluded unless
    ``include_self_pairs`` (in which case f(a, a) enters every sum).
    Returns a full-length probability vector; masked-out actions get 0.
    """
    n = obs.action_features.shape[0]
    candidates = _alternative_ids(obs, mask)
    if candidates.size == 0:
        raise ValueError("mask excludes every action")
    if candidates.size == 1:
        out = np.zeros(n)
        out[candidates[0]] = 1.0
        return out
    features, pairs = pair_feature_matrix(obs, embedding, candidates)
    if include_self_pairs:
        omega = _emb_values(embedding)
        base = np.concatenate([omega, obs.context])
        self_rows = np.array([
            np.concatenate([base, np.zeros(obs.action_features.shape[1])])
            for _ in candidates
        ])
        features = np.vstack([features, self_rows])
        pairs = pairs + [(int(a), int(a)) for a in candidates]
    scores = np.asarray(f(features), dtype=np.float64).reshape(-1)
    sums = np.zeros(n)
    for (a, _), s in zip(pairs, scores):
        sums[a] += s
    total = sums.sum()
    out = np.zeros(n)
    if total <= 0.0:
        out[candidates] = 1.0 / candidates.size
        return out
    out[candidates] = sums[candidates] / total
    return out


# ---------------------------------------------------------------------------
# Batched training arrays (embedding block supplied at batch time by models)
# ---------------------------------------------------------------------------

@dataclass
class FramedArrays:
    """Flattened training examples without the embedding block.

    ``demo_rows`` indexes into ``demonstrators`` (one entry per example);
    ``labels`` are float {0,1} for pairwise/pointwise, int class ids for
    single-label standard, multi-hot rows for multi-label standard.
    """

    demonstrators: list[str]
    demo_rows: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    framing: str
    multilabel: bool


def framed_arrays(dset: DemonstrationSet, framing: str,
                  mask_fn: Optional[Callable[[Observation], np.ndarray]] = None,
                  ) -> FramedArrays:
    """Materialize all training examples of a framing for a demonstration set."""
    if framing not in FRAMINGS:
        raise ValueError(f"unknown framing {framing!r}")
    demonstrators = dset.demonstrator_ids
    demo_index = {d: i for i, d in enumerate(demonstrators)}
    multilabel = any(
        len(o.taken_actions) > 1 for s in dset.schedules for o in s.observations
    )
    rows, feats, labels = [], [], []
    for sched in dset.schedules:
        d = demo_index[sched.demonstrator_id]
        for obs in sched.observations:
            mask = mask_fn(obs) if mask_fn is not None else None
            if framing == "pairwise":
                for ex in build_pairwise(obs, (), mask=mask, multilabel=multilabel):
                    rows.append(d)
                    feats.append(ex.features)
                    labels.append(float(ex.label))
            elif framing == "pointwise":
                for ex in build_pointwise(obs, (), mask=mask):
                    rows.append(d)
                    feats.append(ex.features)
                    labels.append(float(ex.label))
            else:
                ex = build_standard(obs, ())
                rows.append(d)
                feats.append(ex.features)
                labels.append(ex.label)
    features = np.array(feats)
    if framing == "standard" and multilabel:
        label_arr = np.array([
            l if isinstance(l, np.ndarray) else _as_multihot(l, dset.action_count)
            for l in labels
        ])
    else:
        label_arr = np.array(labels)
    return FramedArrays(demonstrators, np.array(rows, dtype=np.int64),
                        features, label_arr, framing, multilabel)


def _as_multihot(label: int, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[int(label)] = 1.0
    return out


def feature_names(framing: str, d: int, context_names: Sequence[str],
                  action_names: Sequence[str], action_count: int = 0) -> list[str]:
    """Human-readable names for the concatenated feature vector of a framing."""
    names = [f"embedding[{i}]" for i in range(d)] + list(context_names)
    if framing == "pairwise":
        names += [f"diff:{n}" for n in action_names]
    elif framing == "pointwise":
        names += [f"action:{n}" for n in action_names]
    else:
        for a in range(action_count):
            names += [f"a{a}:{n}" for n in action_names]
    return names
