"""Soft balanced decision tree over input-plus-embedding features.

Each decision node weights the features, compares them element-wise against
learned values, picks a single feature through a hard one-hot selector
(softmax surrogate on the backward pass), and squashes the result through a
sigmoid with learned steepness. Leaf weight vectors are mixed by root-to-leaf
path probabilities; the mixture is normalized by a softmax. A trained model
converts to a hard single-feature-per-node tree for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from apprentice import pairwise as pw
from apprentice import pnn as _pnn
from apprentice.dataset import DemonstrationSet, Observation
from apprentice.diffcore import Parameter, SgdConfig, Tape, splitmix64
from apprentice.pnn import CHECKPOINT_HEADER, Embedding, EmbeddingTable

ALPHA_MIN = 1e-3
CRISP_ALPHA = 1e6


class PddtModel:
    """Balanced soft tree with per-demonstrator embeddings routed to each node."""

    kind = "pddt"

    def __init__(self, context_dim: int, action_dim: int, action_count: int,
                 framing: str = "pairwise", d: int = 2, depth: int = 4,
                 seed: int = 0, init_std: float = 0.1,
                 feature_names: Optional[list[str]] = None,
                 multilabel: bool = False):
        if framing not in pw.FRAMINGS:
            raise ValueError(f"unknown framing {framing!r}")
        if depth < 1:
            raise ValueError("depth must be positive")
        self.context_dim = context_dim
        self.action_dim = action_dim
        self.action_count = action_count
        self.framing = framing
        self.d = d
        self.depth = depth
        self.seed = seed
        self.init_std = init_std
        self.multilabel = multilabel
        if framing in ("pairwise", "pointwise"):
            feat = context_dim + action_dim
            self.n_classes = 2
        else:
            feat = context_dim + action_count * action_dim
            self.n_classes = action_count
        self.input_width = d + feat
        self.n_nodes = 2 ** depth - 1
        self.n_leaves = 2 ** depth
        rng = np.random.default_rng(seed)
        F = self.input_width
        self.node_w = Parameter(rng.normal(0.0, 1.0, size=(self.n_nodes, F)), name="node_w")
        self.node_c = Parameter(rng.normal(0.0, init_std, size=(self.n_nodes, F)),
                                name="node_c")
        self.node_s = Parameter(rng.normal(0.0, init_std, size=(self.n_nodes, F)),
                                name="node_s")
        self.node_alpha = Parameter(np.ones(self.n_nodes), name="node_alpha")
        self.leaves = Parameter(rng.normal(0.0, init_std,
                                           size=(self.n_leaves, self.n_classes)),
                                name="leaves")
        self.table = EmbeddingTable(d)
        self.feature_names = feature_names or [f"f{i}" for i in range(F)]
        # forward-pass selector discipline; "soft" only during training warm-up
        self.selector_mode = "hard"
        self.selector_tau = 1.0
        # training-time floor for the steepness projection (sharpening phase)
        self.alpha_min = ALPHA_MIN
        # when set, every forward uses this steepness instead of the learned
        # one (softened embedding adaptation)
        self._alpha_override = None

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return [self.node_w, self.node_c, self.node_s, self.node_alpha,
                self.leaves, self.table.matrix]

    def weight_parameters(self) -> list[Parameter]:
        return [self.node_w, self.node_c, self.node_s, self.node_alpha, self.leaves]

    def clamp_alphas(self) -> None:
        np.maximum(self.node_alpha.value, self.alpha_min, out=self.node_alpha.value)

    # -- forward ---------------------------------------------------------------

    def node_output_var(self, tape: Tape, x, alpha_override=None,
                        selector_mode: Optional[str] = None):
        """(batch, nodes) matrix of sigmoid decision-node outputs."""
        mode = selector_mode or self.selector_mode
        if alpha_override is None:
            alpha_override = self._alpha_override
        alpha = (tape.param(self.node_alpha) if alpha_override is None
                 else tape.const(np.full(self.n_nodes, float(alpha_override))))
        return tape.tree_nodes(x, tape.param(self.node_w), tape.param(self.node_c),
                               tape.param(self.node_s), alpha,
                               mode=mode, tau=self.selector_tau)

    def softened(self, alpha: float):
        """Context manager: evaluate/adapt with a fixed mild steepness."""
        return _AlphaOverride(self, alpha)

    def path_prob_var(self, tape: Tape, x, alpha_override=None,
                      selector_mode: Optional[str] = None):
        """(batch, leaves) reach probabilities; heap layout, even columns are
        the false branch of their parent."""
        D = self.node_output_var(tape, x, alpha_override, selector_mode)
        batch = x.value.shape[0]
        probs = tape.const(np.ones((batch, 1)))
        for level in range(self.depth):
            first = 2 ** level - 1
            d_level = tape.slice_cols(D, first, first + 2 ** level)
            left = tape.mul(probs, tape.sub(tape.const(1.0), d_level))
            right = tape.mul(probs, d_level)
            probs = tape.interleave_cols(left, right)
        return probs

    def logits_var(self, tape: Tape, x, alpha_override=None,
                   selector_mode: Optional[str] = None):
        probs = self.path_prob_var(tape, x, alpha_override, selector_mode)
        return tape.matmul(probs, tape.param(self.leaves))

    def binary_logits_var(self, tape: Tape, x):
        """Class-1 margin of the two-class leaf mixture, one logit per row."""
        logits = self.logits_var(tape, x)
        return tape.matmul(logits, tape.const(np.array([-1.0, 1.0])))

    def _embed_input(self, tape: Tape, features: np.ndarray, demo_rows: np.ndarray):
        emb = tape.gather_rows(tape.param(self.table.matrix), demo_rows)
        return tape.concat([emb, tape.const(features)], axis=1)

    def _batch_loss(self, features, demo_rows, labels):
        tape = Tape()
        x = self._embed_input(tape, features, demo_rows)
        return tape, _pnn.framed_loss(self, tape, x, labels)

    # -- inference --------------------------------------------------------------

    def forward_probs(self, features: np.ndarray, alpha_override=None) -> np.ndarray:
        """Class distribution (softmax of the leaf mixture) for feature rows."""
        tape = Tape()
        logits = self.logits_var(tape, tape.const(features), alpha_override)
        z = np.asarray(logits.value)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def score_matrix(self, features: np.ndarray, alpha_override=None) -> np.ndarray:
        return self.forward_probs(features, alpha_override)[:, 1]

    def class_probs(self, features: np.ndarray) -> np.ndarray:
        return self.forward_probs(features)

    def checksum(self) -> float:
        return float(sum(np.sum(p.value) for p in self.weight_parameters()))

    # -- persistence ---------------------------------------------------------------

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
                "depth": self.depth,
                "seed": self.seed,
                "init_std": self.init_std,
                "feature_names": self.feature_names,
                "multilabel": self.multilabel,
            },
            "node_w": self.node_w.value.tolist(),
            "node_c": self.node_c.value.tolist(),
            "node_s": self.node_s.value.tolist(),
            "node_alpha": self.node_alpha.value.tolist(),
            "leaves": self.leaves.value.tolist(),
            "embeddings": self.table.state_dict(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "PddtModel":
        model = cls(**state["config"])
        model.node_w.value = np.array(state["node_w"])
        model.node_c.value = np.array(state["node_c"])
        model.node_s.value = np.array(state["node_s"])
        model.node_alpha.value = np.array(state["node_alpha"])
        model.leaves.value = np.array(state["leaves"])
        model.table = EmbeddingTable.from_state(state["embeddings"])
        return model


class _AlphaOverride:
    def __init__(self, model, alpha):
        self.model = model
        self.alpha = float(alpha)

    def __enter__(self):
        self.saved = self.model._alpha_override
        self.model._alpha_override = self.alpha
        return self.model

    def __exit__(self, *exc):
        self.model._alpha_override = self.saved


def train(model: PddtModel, data: DemonstrationSet, framing: str, sgd: SgdConfig,
          mask_fn=None, warmup_fraction: float = 0.5,
          tau_start: float = 2.0, tau_end: float = 0.02,
          sharpen_fraction: float = 0.0, sharpen_alpha: float = 50.0) -> list[float]:
    """Joint SGD over node weights, comparisons, selectors (straight-through),
    steepness, leaf weights, and demonstrator embeddings.

    Steepness is projected positive after every update so branch orientation
    lives in the weights. The first ``warmup_fraction`` of epochs runs with
    softmax-blended selectors whose temperature anneals geometrically from
    ``tau_start`` to ``tau_end``; by the end of the warm-up the blend is
    effectively the one-hot, so switching to the hard forward is continuous.
    This avoids the early shortcut of memorizing demonstrators through the
    embedding before any input structure exists.

    With ``sharpen_fraction`` > 0, the last chunk of epochs raises the floor
    of the steepness projection geometrically up to ``sharpen_alpha``, forcing
    decisions toward hard routing so the crisp conversion loses little.
    """
    warm_epochs = int(round(sgd.epochs * warmup_fraction))
    sharpen_epochs = int(round(sgd.epochs * sharpen_fraction))
    sharpen_start = sgd.epochs - sharpen_epochs
    base_min = ALPHA_MIN

    def on_epoch(epoch: int) -> None:
        if epoch < warm_epochs:
            model.selector_mode = "soft"
            frac = epoch / max(warm_epochs - 1, 1)
            model.selector_tau = tau_start * (tau_end / tau_start) ** frac
        else:
            # keep the final annealed temperature for the straight-through
            # backward; re-widening it would kick converged selectors around
            model.selector_mode = "hard"
            model.selector_tau = tau_end
        if sharpen_epochs and epoch >= sharpen_start:
            frac = (epoch - sharpen_start + 1) / sharpen_epochs
            model.alpha_min = float(np.exp(
                np.log(1.0) + frac * (np.log(sharpen_alpha))))
        else:
            model.alpha_min = base_min

    try:
        return _pnn.train(model, data, framing, sgd, mask_fn=mask_fn,
                          post_step=model.clamp_alphas, on_epoch=on_epoch)
    finally:
        model.selector_mode = "hard"
        model.selector_tau = 1.0
        model.alpha_min = base_min


adapt_embedding = _pnn.adapt_embedding
predict = _pnn.predict


# ---------------------------------------------------------------------------
# Crisp conversion
# ---------------------------------------------------------------------------

@dataclass
class CrispTree:
    """Hard single-feature threshold tree distilled from a trained soft tree."""

    depth: int
    features: np.ndarray     # (n_nodes,) selected feature index per node
    weights: np.ndarray      # (n_nodes,) weight applied to the feature
    thresholds: np.ndarray   # (n_nodes,) comparison value
    leaf_classes: np.ndarray  # (n_leaves,) class id per leaf
    feature_names: list[str]
    embedding_width: int
    n_classes: int
    framing: str = "pairwise"

    def route(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        idx = np.zeros(X.shape[0], dtype=np.int64)
        for _ in range(self.depth):
            f = self.features[idx]
            go_true = X[np.arange(X.shape[0]), f] * self.weights[idx] > self.thresholds[idx]
            idx = 2 * idx + np.where(go_true, 2, 1)
        return idx - (2 ** self.depth - 1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_classes[self.route(X)]

    def score_matrix(self, features: np.ndarray) -> np.ndarray:
        """Hard pairwise scores: 1.0 where the tree picks class 1."""
        return (self.predict(features) == 1).astype(np.float64)

    def class_probs(self, features: np.ndarray) -> np.ndarray:
        pred = self.predict(features)
        out = np.zeros((len(pred), self.n_classes))
        out[np.arange(len(pred)), pred] = 1.0
        return out

    def split_features_used(self) -> set[int]:
        return set(int(f) for f in self.features)


def crispify(model: PddtModel) -> CrispTree:
    """Hard tree: argmax selector picks the feature, weight and threshold come
    from that coordinate, leaves collapse to their argmax class."""
    features = np.argmax(model.node_s.value, axis=1).astype(np.int64)
    rows = np.arange(model.n_nodes)
    weights = model.node_w.value[rows, features].copy()
    thresholds = model.node_c.value[rows, features].copy()
    leaf_classes = np.argmax(model.leaves.value, axis=1).astype(np.int64)
    return CrispTree(
        depth=model.depth,
        features=features,
        weights=weights,
        thresholds=thresholds,
        leaf_classes=leaf_classes,
        feature_names=list(model.feature_names),
        embedding_width=model.d,
        n_classes=model.n_classes,
        framing=model.framing,
    )


def _node_label(tree: CrispTree, node: int) -> str:
    f = tree.features[node]
    name = tree.feature_names[f] if f < len(tree.feature_names) else f"f{f}"
    tag = "style" if f < tree.embedding_width else "constraint"
    return f"[{tag}] {tree.weights[node]:.4g}*{name} > {tree.thresholds[node]:.4g}"


def export_tree(tree: CrispTree, format: str = "text") -> str:
    """Render a crisp tree; ``text`` gives an indented listing, ``dot`` a
    graph description with style nodes drawn differently."""
    if format == "text":
        lines: list[str] = []

        def walk(node: int, indent: int):
            pad = "  " * indent
            if node >= tree.features.shape[0]:
                leaf = node - (2 ** tree.depth - 1)
                lines.append(f"{pad}class {tree.leaf_classes[leaf]}")
                return
            lines.append(f"{pad}{_node_label(tree, node)}")
            walk(2 * node + 2, indent + 1)
            walk(2 * node + 1, indent + 1)

        walk(0, 0)
        return "\n".join(lines)
    if format == "dot":
        lines = ["digraph crisp_tree {"]
        n_internal = tree.features.shape[0]
        for node in range(n_internal):
            f = tree.features[node]
            style = ', style=filled, fillcolor="lightblue"' if f < tree.embedding_width else ""
            lines.append(f'  n{node} [label="{_node_label(tree, node)}"{style}];')
        for leaf in range(2 ** tree.depth):
            node = n_internal + leaf
            lines.append(f'  n{node} [label="class {tree.leaf_classes[leaf]}", shape=box];')
        for node in range(n_internal):
            lines.append(f'  n{node} -> n{2 * node + 2} [label="yes"];')
            lines.append(f'  n{node} -> n{2 * node + 1} [label="no"];')
        lines.append("}")
        return "\n".join(lines)
    raise ValueError(f"unknown format {format!r}")


def forward(model: PddtModel, x: np.ndarray, embedding) -> np.ndarray:
    """Class distribution for a single raw input and an embedding."""
    omega = np.asarray(getattr(embedding, "values", embedding), dtype=np.float64)
    row = np.concatenate([omega, np.asarray(x, dtype=np.float64)])[None, :]
    if row.shape[1] != model.input_width:
        raise ValueError(f"input width {row.shape[1]} != expected {model.input_width}")
    return model.forward_probs(row)[0]
