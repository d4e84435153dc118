"""Comparison methods: plain CART, demonstrator clustering with per-cluster
networks, an EM-fitted tree with a bimodal schedule embedding, and a CART
trained on embeddings inferred by a personalized network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from apprentice import pairwise as pw
from apprentice import pnn as pnn_mod
from apprentice.dataset import DemonstrationSet, Schedule
from apprentice.diffcore import SgdConfig, splitmix64

MIN_GAIN = 1e-12


# ---------------------------------------------------------------------------
# CART
# ---------------------------------------------------------------------------

@dataclass
class CartNode:
    feature: int = -1
    threshold: float = 0.0
    left: Optional["CartNode"] = None      # feature value <= threshold
    right: Optional["CartNode"] = None
    klass: int = -1
    counts: Optional[np.ndarray] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class CartTree:
    root: CartNode
    n_classes: int
    n_features: int
    kind = "cart"

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty(X.shape[0], dtype=np.int64)
        for i, row in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[i] = node.klass
        return out

    def depth(self) -> int:
        def walk(node):
            if node.is_leaf:
                return 0
            return 1 + max(walk(node.left), walk(node.right))
        return walk(self.root)

    def node_count(self) -> int:
        def walk(node):
            if node.is_leaf:
                return 1
            return 1 + walk(node.left) + walk(node.right)
        return walk(self.root)

    def state_dict(self) -> dict:
        def pack(node):
            if node.is_leaf:
                return {"klass": int(node.klass),
                        "counts": None if node.counts is None else node.counts.tolist()}
            return {"feature": int(node.feature), "threshold": float(node.threshold),
                    "left": pack(node.left), "right": pack(node.right),
                    "klass": int(node.klass),
                    "counts": None if node.counts is None else node.counts.tolist()}
        from apprentice.pnn import CHECKPOINT_HEADER
        return {"format": CHECKPOINT_HEADER, "kind": self.kind,
                "n_classes": self.n_classes, "n_features": self.n_features,
                "root": pack(self.root)}

    @classmethod
    def from_state(cls, state: dict) -> "CartTree":
        def unpack(data):
            counts = None if data.get("counts") is None else np.array(data["counts"])
            if "feature" not in data:
                return CartNode(klass=data["klass"], counts=counts)
            return CartNode(
                feature=data["feature"], threshold=data["threshold"],
                left=unpack(data["left"]), right=unpack(data["right"]),
                klass=data["klass"], counts=counts,
            )
        return cls(unpack(state["root"]), state["n_classes"], state["n_features"])


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float(np.sum(p * p))


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int):
    """Exhaustive scan; ties resolve to the lowest feature index and then the
    lowest threshold. Thresholds are midpoints between consecutive distinct
    values."""
    n, n_features = X.shape
    parent_counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    parent_gini = _gini(parent_counts)
    best = None  # (gain, feature, threshold)
    for f in range(n_features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), ys] = 1.0
        left_counts = np.cumsum(onehot, axis=0)
        distinct = np.nonzero(xs[1:] > xs[:-1])[0]  # split between i and i+1
        if distinct.size == 0:
            continue
        nl = (distinct + 1).astype(np.float64)
        nr = n - nl
        lc = left_counts[distinct]
        rc = parent_counts - lc
        gini_l = 1.0 - np.sum((lc / nl[:, None]) ** 2, axis=1)
        gini_r = 1.0 - np.sum((rc / nr[:, None]) ** 2, axis=1)
        weighted = (nl * gini_l + nr * gini_r) / n
        gains = parent_gini - weighted
        k = int(np.argmax(gains))
        if gains[k] > MIN_GAIN:
            thr = 0.5 * (xs[distinct[k]] + xs[distinct[k] + 1])
            cand = (float(gains[k]), f, float(thr))
            if best is None or cand[0] > best[0] + MIN_GAIN:
                best = cand
    return best


def _grow(X, y, n_classes, depth, max_depth, min_samples_leaf) -> CartNode:
    counts = np.bincount(y, minlength=n_classes)
    klass = int(np.argmax(counts))  # argmax ties resolve to lowest class id
    node = CartNode(klass=klass, counts=counts)
    if (max_depth is not None and depth >= max_depth) or len(y) < 2 * min_samples_leaf:
        return node
    if counts.max() == len(y):
        return node
    found = _best_split(X, y, n_classes)
    if found is None:
        return node
    _, f, thr = found
    mask = X[:, f] <= thr
    if mask.sum() < min_samples_leaf or (~mask).sum() < min_samples_leaf:
        return node
    node.feature = f
    node.threshold = thr
    node.left = _grow(X[mask], y[mask], n_classes, depth + 1, max_depth, min_samples_leaf)
    node.right = _grow(X[~mask], y[~mask], n_classes, depth + 1, max_depth, min_samples_leaf)
    return node


def fit_cart(X: np.ndarray, y: np.ndarray, n_classes: Optional[int] = None,
             max_depth: Optional[int] = None, min_samples_leaf: int = 1) -> CartTree:
    """Greedy impurity-reduction tree; deterministic under the tie rule."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("need at least one example")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    root = _grow(X, y, n_classes, 0, max_depth, min_samples_leaf)
    return CartTree(root, n_classes, X.shape[1])


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

class KMeans:
    """Lloyd iterations from a seeded draw of distinct points."""

    def __init__(self, k: int, seed: int = 0, max_iter: int = 100):
        self.k = k
        self.seed = seed
        self.max_iter = max_iter
        self.centroids = None
        self.objective_trace: list[float] = []

    def fit(self, X: np.ndarray) -> "KMeans":
        rng = np.random.default_rng(self.seed)
        n = X.shape[0]
        picks = rng.choice(n, size=min(self.k, n), replace=False)
        self.centroids = X[picks].copy()
        self.objective_trace = []
        prev = None
        for _ in range(self.max_iter):
            d2 = ((X[:, None, :] - self.centroids[None]) ** 2).sum(axis=2)
            labels = np.argmin(d2, axis=1)
            self.objective_trace.append(float(d2[np.arange(n), labels].sum()))
            for c in range(self.centroids.shape[0]):
                members = X[labels == c]
                if len(members):
                    self.centroids[c] = members.mean(axis=0)
            if prev is not None and np.array_equal(prev, labels):
                break
            prev = labels
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        d2 = ((np.atleast_2d(X)[:, None, :] - self.centroids[None]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


class DiagonalGmm:
    """EM for a diagonal-covariance mixture, initialized from k-means."""

    def __init__(self, k: int, seed: int = 0, max_iter: int = 100, min_var: float = 1e-6):
        self.k = k
        self.seed = seed
        self.max_iter = max_iter
        self.min_var = min_var
        self.means = None
        self.variances = None
        self.weights = None
        self.loglik_trace: list[float] = []

    def _log_prob(self, X: np.ndarray) -> np.ndarray:
        # (n, k) log densities plus log weights
        diff = X[:, None, :] - self.means[None]
        quad = (diff ** 2 / self.variances[None]).sum(axis=2)
        logdet = np.log(self.variances).sum(axis=1)
        d = X.shape[1]
        return (np.log(self.weights)[None]
                - 0.5 * (quad + logdet[None] + d * np.log(2 * np.pi)))

    def fit(self, X: np.ndarray) -> "DiagonalGmm":
        km = KMeans(self.k, seed=self.seed).fit(X)
        labels = km.predict(X)
        k = km.centroids.shape[0]
        self.means = km.centroids.copy()
        self.variances = np.full((k, X.shape[1]), max(X.var(), self.min_var))
        self.weights = np.maximum(np.bincount(labels, minlength=k), 1) / len(X)
        self.weights /= self.weights.sum()
        self.loglik_trace = []
        for _ in range(self.max_iter):
            lp = self._log_prob(X)
            m = lp.max(axis=1, keepdims=True)
            lse = m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))
            self.loglik_trace.append(float(lse.sum()))
            resp = np.exp(lp - lse[:, None])
            nk = resp.sum(axis=0)
            self.weights = nk / nk.sum()
            self.means = (resp.T @ X) / nk[:, None]
            diff2 = (X[:, None, :] - self.means[None]) ** 2
            self.variances = np.maximum(
                (resp[:, :, None] * diff2).sum(axis=0) / nk[:, None], self.min_var
            )
            if len(self.loglik_trace) > 1 and (
                abs(self.loglik_trace[-1] - self.loglik_trace[-2]) < 1e-9
            ):
                break
        return self

    def responsibilities(self, X: np.ndarray) -> np.ndarray:
        lp = self._log_prob(np.atleast_2d(X))
        m = lp.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(lp - m).sum(axis=1, keepdims=True))
        return np.exp(lp - lse)


def demonstrator_summary(schedule: Schedule, action_count: int) -> np.ndarray:
    """Mean chosen-action feature vector concatenated with the action
    frequency histogram."""
    chosen = []
    hist = np.zeros(action_count)
    for obs in schedule.observations:
        for a in obs.taken_actions:
            chosen.append(obs.action_features[a])
            hist[a] += 1.0
    total = hist.sum()
    if total > 0:
        hist /= total
    mean_feat = np.mean(chosen, axis=0) if chosen else np.zeros(0)
    return np.concatenate([mean_feat, hist])


@dataclass
class ClusterModel:
    """Per-cluster plain networks routed by a demonstrator summary."""

    method: str
    clusterer: object
    nets: list
    framing: str
    action_count: int
    effective_k: int
    dropped_clusters: int = 0

    def route(self, schedule: Schedule) -> int:
        s = demonstrator_summary(schedule, self.action_count)[None, :]
        if self.method == "kmeans":
            return int(self.clusterer.predict(s)[0])
        return int(np.argmax(self.clusterer.responsibilities(s)[0]))

    def predict(self, obs, schedule: Schedule, mask=None) -> np.ndarray:
        net = self.nets[self.route(schedule)]
        return pnn_mod.predict(net, obs, np.zeros(0), mask=mask)


def fit_clustered(data: DemonstrationSet, method: str, k: int, sgd: SgdConfig,
                  framing: str = "standard", hidden=(32, 32)) -> ClusterModel:
    """Cluster demonstrators by summary features, then train one plain
    network per cluster (soft clusters weight examples by responsibility)."""
    if method not in ("kmeans", "gmm"):
        raise ValueError(f"unknown clustering method {method!r}")
    if k < 1:
        raise ValueError("k must be at least 1")
    summaries = np.array([
        demonstrator_summary(s, data.action_count) for s in data.schedules
    ])
    dropped = 0
    if method == "kmeans":
        clusterer = KMeans(k, seed=sgd.seed).fit(summaries)
        labels = clusterer.predict(summaries)
        present = np.unique(labels)
        if len(present) < k:
            dropped = k - len(present)
            clusterer = KMeans(len(present), seed=sgd.seed).fit(summaries)
            labels = clusterer.predict(summaries)
        resp = None
        k_eff = clusterer.centroids.shape[0]
    else:
        clusterer = DiagonalGmm(k, seed=sgd.seed).fit(summaries)
        resp = clusterer.responsibilities(summaries)
        k_eff = k
    nets = []
    for c in range(k_eff):
        if method == "kmeans":
            member_idx = [i for i, l in enumerate(labels) if l == c]
            subset = DemonstrationSet(
                [data.schedules[i] for i in member_idx],
                data.action_count, data.context_dim, data.action_dim, data.domain_tag,
            )
            weights_by_schedule = None
        else:
            subset = data
            weights_by_schedule = resp[:, c]
        net = _fit_plain_net(subset, framing, sgd, hidden,
                             seed=splitmix64(sgd.seed, c) % (2 ** 31),
                             weights_by_schedule=weights_by_schedule)
        nets.append(net)
    return ClusterModel(method, clusterer, nets, framing, data.action_count,
                        k_eff, dropped)


def _fit_plain_net(data: DemonstrationSet, framing: str, sgd: SgdConfig, hidden,
                   seed: int, weights_by_schedule=None):
    """An embeddingless personalized-network shell (d=0) fit to the data."""
    from apprentice.diffcore import Tape, run_sgd, sgd_step

    model = pnn_mod.PnnModel(data.context_dim, data.action_dim, data.action_count,
                             framing=framing, d=0, hidden=hidden, seed=seed)
    arrays = pw.framed_arrays(data, framing)
    model.multilabel = arrays.multilabel and framing == "standard"
    if weights_by_schedule is None:
        ex_weights = None
    else:
        # expand per-schedule weights to per-example weights
        per_sched = []
        for w, sched in zip(weights_by_schedule, data.schedules):
            count = _examples_per_schedule(sched, framing, data.action_count)
            per_sched.extend([w] * count)
        ex_weights = np.array(per_sched)

    params = model.parameters()

    def builder(batch):
        from apprentice.diffcore import (
            binary_ce_from_logits,
            multiclass_ce_from_logits,
            multilabel_ce_from_logits,
        )
        tape = Tape()
        x = tape.const(arrays.features[batch])
        w = None if ex_weights is None else ex_weights[batch]
        if model.framing in ("pairwise", "pointwise"):
            flat = model.binary_logits_var(tape, x)
            loss = binary_ce_from_logits(tape, flat, arrays.labels[batch], weights=w)
        elif model.multilabel:
            loss = multilabel_ce_from_logits(tape, model.logits_var(tape, x),
                                             arrays.labels[batch])
        else:
            loss = multiclass_ce_from_logits(tape, model.logits_var(tape, x),
                                             arrays.labels[batch],
                                             n_classes=model.action_count, weights=w)
        return tape, loss

    run_sgd(builder, len(arrays.labels), params, sgd)
    return model


def _examples_per_schedule(sched: Schedule, framing: str, action_count: int) -> int:
    if framing == "standard":
        return len(sched.observations)
    total = 0
    for obs in sched.observations:
        taken = len(obs.taken_actions)
        if framing == "pairwise":
            total += 2 * taken * (action_count - taken)
        else:
            total += action_count
    return total


# ---------------------------------------------------------------------------
# EM-fit decision tree with a bimodal schedule embedding
# ---------------------------------------------------------------------------

@dataclass
class EmDtModel:
    tree: CartTree
    mode_probs: dict
    iterations_run: int
    oscillated: bool
    accuracy_trace: list


def fit_em_dt(data: DemonstrationSet, modes: int = 2, iterations: int = 10,
              seed: int = 0, max_depth: Optional[int] = None,
              label_noise: float = 0.25) -> EmDtModel:
    """Alternate CART fitting on inputs plus a sampled one-hot mode with
    re-scoring each schedule's mode hypotheses by tree accuracy.

    ``modes`` must be known in advance (the stated limitation of the
    approach). Returns the best-scoring iteration's tree if assignments
    oscillate past the cap.
    """
    if modes != 2:
        raise ValueError("the bimodal embedding requires modes=2")
    rng = np.random.default_rng(seed)
    arrays = pw.framed_arrays(data, "standard")
    X = arrays.features  # no embedding block; mode one-hot appended below
    y = arrays.labels.astype(np.int64)
    sched_of_example = []
    for i, sched in enumerate(data.schedules):
        sched_of_example.extend([i] * len(sched.observations))
    sched_of_example = np.array(sched_of_example)
    n_sched = len(data.schedules)
    probs = rng.uniform(0.2, 0.8, size=n_sched)   # P(mode 0) per schedule
    best = None
    prev_hard = None
    oscillated = True
    acc_trace = []
    iterations_run = 0
    for it in range(iterations):
        iterations_run = it + 1
        sampled = (rng.random(n_sched) < probs).astype(int)  # 1 -> mode 0
        onehot = np.zeros((len(X), 2))
        mode_of_example = 1 - sampled[sched_of_example]
        onehot[np.arange(len(X)), mode_of_example] = 1.0
        tree = fit_cart(np.hstack([X, onehot]), y, n_classes=data.action_count,
                        max_depth=max_depth)
        # re-score both hypotheses per schedule
        acc = np.zeros((n_sched, 2))
        for m in (0, 1):
            forced = np.zeros((len(X), 2))
            forced[:, m] = 1.0
            pred = tree.predict(np.hstack([X, forced]))
            correct = (pred == y).astype(np.float64)
            for s in range(n_sched):
                mask = sched_of_example == s
                acc[s, m] = correct[mask].mean()
        lik0 = (1 - label_noise) ** (acc[:, 0]) * label_noise ** (1 - acc[:, 0])
        lik1 = (1 - label_noise) ** (acc[:, 1]) * label_noise ** (1 - acc[:, 1])
        probs = lik0 / (lik0 + lik1)
        hard = (probs > 0.5).astype(int)
        mean_best_acc = float(acc.max(axis=1).mean())
        acc_trace.append(mean_best_acc)
        if best is None or mean_best_acc > best[0]:
            best = (mean_best_acc, tree, probs.copy())
        if prev_hard is not None and np.array_equal(hard, prev_hard):
            oscillated = False
            break
        prev_hard = hard
    _, tree, probs = best
    mode_probs = {s.schedule_id: float(p) for s, p in zip(data.schedules, probs)}
    return EmDtModel(tree, mode_probs, iterations_run, oscillated, acc_trace)


# ---------------------------------------------------------------------------
# CART over personalized-network embeddings
# ---------------------------------------------------------------------------

def fit_dt_on_pnn_embeddings(model, data: DemonstrationSet,
                             max_depth: Optional[int] = None) -> CartTree:
    """CART over standard-framing inputs joined with each training
    demonstrator's trained embedding."""
    arrays = pw.framed_arrays(data, "standard")
    emb_rows = model.table.rows([arrays.demonstrators[i] for i in arrays.demo_rows])
    emb = model.table.matrix.value[emb_rows]
    X = np.hstack([emb, arrays.features])
    y = arrays.labels.astype(np.int64)
    return fit_cart(X, y, n_classes=data.action_count, max_depth=max_depth)
