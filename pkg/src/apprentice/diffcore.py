"""Reverse-mode autodiff on a flat tape, SGD with momentum, and divergence losses.

Values are float64 numpy arrays (scalars are 0-d arrays). Every operation
appends one node to the tape; operands always precede their consumers, so a
single reverse sweep visits each node exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

EPS_PROB = 1e-7


class TapeError(RuntimeError):
    """Domain error during forward, or backward invoked on a stale tape."""


class TrainingError(RuntimeError):
    """Non-finite loss or a loss curve that failed to decrease."""


class Parameter:
    """A trainable value with an accumulated gradient and optimizer state.

    Embedding parameters (``is_embedding=True``) are updated with the
    embedding learning rate; when shaped as a matrix of per-owner rows only
    rows with a nonzero gradient are touched by an update step.
    """

    __slots__ = ("value", "grad", "trainable", "is_embedding", "name",
                 "velocity", "second", "steps")

    def __init__(self, value, trainable=True, is_embedding=False, name=""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = bool(trainable)
        self.is_embedding = bool(is_embedding)
        self.name = name
        self.velocity = np.zeros_like(self.value)
        self.second = None   # allocated on first adam step
        self.steps = 0

    def reset_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.value.shape})"


@dataclass
class SgdConfig:
    """Stochastic gradient settings. Deterministic under a fixed seed.

    ``optimizer`` is plain momentum SGD by default; "adam" switches to
    adaptive moment estimation (needed by the soft-tree models, whose
    straight-through selector gradients are badly scaled for plain SGD).
    """

    learning_rate_model: float = 0.1
    learning_rate_embedding: Optional[float] = None  # defaults to 10x model rate
    momentum: float = 0.0
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    optimizer: str = "sgd"
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate_embedding is None:
            self.learning_rate_embedding = 10.0 * self.learning_rate_model
        if self.learning_rate_model <= 0 or self.learning_rate_embedding <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _adam_update(p: Parameter, g: np.ndarray, lr: float, config: SgdConfig,
                 rows=None) -> None:
    b1 = config.momentum if config.momentum > 0 else 0.9
    b2, eps = config.adam_beta2, config.adam_eps
    if p.second is None:
        p.second = np.zeros_like(p.value)
    p.steps += 1
    corr1 = 1.0 - b1 ** p.steps
    corr2 = 1.0 - b2 ** p.steps
    if rows is None:
        p.velocity = b1 * p.velocity + (1 - b1) * g
        p.second = b2 * p.second + (1 - b2) * g * g
        p.value = p.value - lr * (p.velocity / corr1) / (np.sqrt(p.second / corr2) + eps)
    else:
        p.velocity[rows] = b1 * p.velocity[rows] + (1 - b1) * g[rows]
        p.second[rows] = b2 * p.second[rows] + (1 - b2) * g[rows] * g[rows]
        p.value[rows] -= lr * (p.velocity[rows] / corr1) / (
            np.sqrt(p.second[rows] / corr2) + eps)


def sgd_step(params: Sequence[Parameter], config: SgdConfig) -> int:
    """Apply one update to each parameter and reset gradients.

    Plain SGD: velocity <- momentum * velocity + grad, value <- value - lr *
    velocity. Adam follows the usual bias-corrected moment recursion.
    Parameters whose gradient is not finite are skipped; returns how many
    were rejected this call.
    """
    rejected = 0
    for p in params:
        if not p.trainable:
            p.reset_grad()
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            rejected += 1
            p.reset_grad()
            continue
        lr = config.learning_rate_embedding if p.is_embedding else config.learning_rate_model
        rows = None
        if p.is_embedding and p.value.ndim == 2:
            # Per-owner rows: only rows present in the batch carry gradient.
            rows = np.flatnonzero(np.any(g != 0.0, axis=1))
            if rows.size == 0:
                p.reset_grad()
                continue
        if config.optimizer == "adam":
            _adam_update(p, g, lr, config, rows=rows)
        elif rows is not None:
            p.velocity[rows] = config.momentum * p.velocity[rows] + g[rows]
            p.value[rows] -= lr * p.velocity[rows]
        else:
            p.velocity = config.momentum * p.velocity + g
            p.value = p.value - lr * p.velocity
        p.reset_grad()
    return rejected


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _Node:
    __slots__ = ("op", "parents", "value", "ctx", "param")

    def __init__(self, op, parents, value, ctx=None, param=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx
        self.param = param


@dataclass(frozen=True)
class Var:
    """Handle to a tape node; supports arithmetic against Vars and scalars."""

    tape: "Tape"
    idx: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    def __add__(self, other):
        return self.tape.add(self, self.tape._coerce(other))

    def __radd__(self, other):
        return self.tape.add(self.tape._coerce(other), self)

    def __sub__(self, other):
        return self.tape.sub(self, self.tape._coerce(other))

    def __rsub__(self, other):
        return self.tape.sub(self.tape._coerce(other), self)

    def __mul__(self, other):
        return self.tape.mul(self, self.tape._coerce(other))

    def __rmul__(self, other):
        return self.tape.mul(self.tape._coerce(other), self)

    def __truediv__(self, other):
        return self.tape.div(self, self.tape._coerce(other))

    def __rtruediv__(self, other):
        return self.tape.div(self.tape._coerce(other), self)

    def __neg__(self):
        return self.tape.neg(self)


class Tape:
    """Append-only record of array operations, evaluated eagerly.

    ``forward`` re-evaluates the recorded program (after inputs change);
    ``backward`` runs one reverse sweep, depositing gradients into the
    trainable Parameters that participated.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._inputs: list[int] = []
        self._fresh = True  # forward values match current inputs

    # -- node creation ----------------------------------------------------

    def _coerce(self, x) -> Var:
        if isinstance(x, Var):
            return x
        return self.const(x)

    def _append(self, op, parents, value, ctx=None, param=None) -> Var:
        self.nodes.append(_Node(op, tuple(p.idx for p in parents), value, ctx, param))
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> Var:
        return self._append("const", (), np.asarray(value, dtype=np.float64))

    def input(self, value) -> Var:
        v = self._append("input", (), np.asarray(value, dtype=np.float64))
        self._inputs.append(v.idx)
        return v

    def param(self, p: Parameter) -> Var:
        return self._append("param", (), p.value, param=p)

    def set_input(self, var: Var, value) -> None:
        if self.nodes[var.idx].op != "input":
            raise TapeError("set_input targets a non-input node")
        self.nodes[var.idx].value = np.asarray(value, dtype=np.float64)
        self._fresh = False

    # -- primitive ops ----------------------------------------------------

    def _eval(self, node: _Node) -> np.ndarray:
        vals = [self.nodes[p].value for p in node.parents]
        return _FORWARD[node.op](vals, node.ctx, node)

    def _record(self, op, operands, ctx=None) -> Var:
        parents = tuple(self._coerce(o) for o in operands)
        node = _Node(op, tuple(p.idx for p in parents), None, ctx)
        node.value = _FORWARD[op]([self.nodes[i].value for i in node.parents], ctx, node)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def add(self, a, b) -> Var:
        return self._record("add", (a, b))

    def sub(self, a, b) -> Var:
        return self._record("sub", (a, b))

    def mul(self, a, b) -> Var:
        return self._record("mul", (a, b))

    def div(self, a, b) -> Var:
        return self._record("div", (a, b))

    def neg(self, a) -> Var:
        return self._record("neg", (a,))

    def exp(self, a) -> Var:
        return self._record("exp", (a,))

    def log(self, a) -> Var:
        return self._record("log", (a,))

    def maximum(self, a, b) -> Var:
        return self._record("max", (a, b))

    def sigmoid(self, a) -> Var:
        return self._record("sigmoid", (a,))

    def tanh(self, a) -> Var:
        return self._record("tanh", (a,))

    def relu(self, a) -> Var:
        return self._record("relu", (a,))

    def softplus(self, a) -> Var:
        return self._record("softplus", (a,))

    def matmul(self, a, b) -> Var:
        return self._record("matmul", (a, b))

    def sum(self, a, axis=None) -> Var:
        return self._record("sum", (a,), ctx=axis)

    def mean(self, a) -> Var:
        n = float(np.asarray(self._coerce(a).value).size)
        return self.div(self.sum(a), self.const(n))

    def reshape(self, a, shape) -> Var:
        return self._record("reshape", (a,), ctx=tuple(shape))

    def concat(self, parts, axis=0) -> Var:
        return self._record("concat", tuple(parts), ctx=axis)

    def gather_rows(self, a, indices) -> Var:
        idx = np.asarray(indices, dtype=np.int64)
        return self._record("gather", (a,), ctx=idx)

    def logsumexp(self, a, axis) -> Var:
        return self._record("logsumexp", (a,), ctx=axis)

    def hard_onehot(self, a, straight_through=True) -> Var:
        """Forward: one-hot of argmax (ties to lowest index). Backward: the
        dense softmax surrogate when ``straight_through``, else zero."""
        return self._record("hard_onehot", (a,), ctx=bool(straight_through))

    def slice_cols(self, a, start: int, stop: int) -> Var:
        return self._record("slice_cols", (a,), ctx=(int(start), int(stop)))

    def interleave_cols(self, a, b) -> Var:
        """Columns of ``a`` and ``b`` alternated: out[:, 2i] = a[:, i],
        out[:, 2i+1] = b[:, i]."""
        return self._record("interleave_cols", (a, b))

    def tree_nodes(self, x, W, C, S, alpha, mode: str = "hard", tau: float = 1.0) -> Var:
        """All decision-node outputs of a soft tree in one fused op.

        Row n of the output is sigmoid(alpha_n * sel_n . (w_n * x - c_n))
        where sel_n is the one-hot argmax of scores S[n] (or its softmax at
        temperature ``tau`` in ``soft`` mode). Backward follows the
        straight-through convention of ``select_feature``.
        """
        if mode not in ("hard", "frozen", "soft"):
            raise ValueError(f"unknown selector mode {mode!r}")
        return self._record("tree_nodes", (x, W, C, S, alpha), ctx=(mode, float(tau)))

    def select_feature(self, x, scores, mode: str = "hard", tau: float = 1.0) -> Var:
        """Pick one column of ``x`` (batch, features) by argmax of ``scores``.

        ``hard``: forward multiplies by the exact one-hot while the backward
        pass pretends the selector was softmax(scores / tau), so every column
        of ``x`` and every score coordinate receives gradient
        (straight-through). ``frozen``: one-hot in both directions, no
        gradient into the scores. ``soft``: softmax blend at temperature
        ``tau`` in both directions (training warm-up only; annealing tau to 0
        approaches the one-hot forward continuously).
        """
        if mode not in ("hard", "frozen", "soft"):
            raise ValueError(f"unknown selector mode {mode!r}")
        return self._record("select_feature", (x, scores), ctx=(mode, float(tau)))

    # -- execution ---------------------------------------------------------

    def forward(self, inputs: Optional[Sequence] = None) -> np.ndarray:
        """Re-evaluate all nodes (optionally binding new input values); returns
        the value of the last node."""
        if inputs is not None:
            if len(inputs) != len(self._inputs):
                raise TapeError(
                    f"expected {len(self._inputs)} inputs, got {len(inputs)}"
                )
            for idx, value in zip(self._inputs, inputs):
                self.nodes[idx].value = np.asarray(value, dtype=np.float64)
        for node in self.nodes:
            if node.op == "param":
                node.value = node.param.value
            elif node.op not in ("const", "input"):
                node.value = self._eval(node)
        self._fresh = True
        return self.nodes[-1].value

    def backward(self, output: Optional[Var] = None, upstream=None) -> dict:
        """Reverse sweep from ``output`` (default: last node). Accumulates into
        each trainable Parameter's ``grad`` and returns {Parameter: gradient}."""
        if not self.nodes:
            raise TapeError("backward on an empty tape")
        if not self._fresh:
            raise TapeError("backward before forward: inputs changed since last evaluation")
        out_idx = output.idx if output is not None else len(self.nodes) - 1
        adjoint: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        seed = np.ones_like(self.nodes[out_idx].value) if upstream is None else np.asarray(
            upstream, dtype=np.float64
        )
        adjoint[out_idx] = np.array(seed, dtype=np.float64)
        grads: dict[Parameter, np.ndarray] = {}
        for i in range(out_idx, -1, -1):
            up = adjoint[i]
            if up is None:
                continue
            node = self.nodes[i]
            if node.op == "param":
                p = node.param
                if p.trainable:
                    p.grad += up
                grads[p] = grads.get(p, 0.0) + up
                continue
            if node.op in ("const", "input"):
                continue
            parent_vals = [self.nodes[p].value for p in node.parents]
            contribs = _BACKWARD[node.op](up, parent_vals, node.value, node.ctx)
            for pidx, contrib in zip(node.parents, contribs):
                if contrib is None:
                    continue
                if adjoint[pidx] is None:
                    adjoint[pidx] = np.zeros_like(self.nodes[pidx].value)
                adjoint[pidx] += contrib
        return grads


# Forward rules: (parent values, ctx, node) -> value.

def _fw_div(v, ctx, node):
    if np.any(v[1] == 0.0):
        raise TapeError("division by zero")
    return v[0] / v[1]


def _fw_log(v, ctx, node):
    if np.any(v[0] <= 0.0):
        raise TapeError("log of non-positive value")
    return np.log(v[0])


def _fw_gather(v, idx, node):
    return v[0][idx]


def _fw_logsumexp(v, axis, node):
    m = np.max(v[0], axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v[0] - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _fw_hard_onehot(v, ctx, node):
    out = np.zeros_like(v[0])
    out[np.argmax(v[0])] = 1.0
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


def _fw_select_feature(v, ctx, node):
    x, scores = v
    mode, tau = ctx
    if mode == "soft":
        return x @ _softmax(scores / tau)
    return x[:, np.argmax(scores)]


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _selector_matrix(S: np.ndarray, mode: str, tau: float) -> np.ndarray:
    if mode == "soft":
        return _softmax_rows(S / tau)
    sel = np.zeros_like(S)
    sel[np.arange(S.shape[0]), np.argmax(S, axis=1)] = 1.0
    return sel


def _fw_tree_nodes(v, ctx, node):
    x, W, C, S, alpha = v
    mode, tau = ctx
    sel = _selector_matrix(S, mode, tau)
    z = x @ (W * sel).T - np.sum(C * sel, axis=1)
    return _stable_sigmoid(alpha * z)


def _fw_interleave(v, ctx, node):
    a, b = v
    out = np.empty((a.shape[0], a.shape[1] + b.shape[1]), dtype=np.float64)
    out[:, 0::2] = a
    out[:, 1::2] = b
    return out


_FORWARD: dict[str, Callable] = {
    "add": lambda v, c, n: v[0] + v[1],
    "sub": lambda v, c, n: v[0] - v[1],
    "mul": lambda v, c, n: v[0] * v[1],
    "div": _fw_div,
    "neg": lambda v, c, n: -v[0],
    "exp": lambda v, c, n: np.exp(v[0]),
    "log": _fw_log,
    "max": lambda v, c, n: np.maximum(v[0], v[1]),
    "sigmoid": lambda v, c, n: _stable_sigmoid(v[0]),
    "tanh": lambda v, c, n: np.tanh(v[0]),
    "relu": lambda v, c, n: np.maximum(v[0], 0.0),
    "softplus": lambda v, c, n: np.logaddexp(0.0, v[0]),
    "matmul": lambda v, c, n: v[0] @ v[1],
    "sum": lambda v, axis, n: np.sum(v[0], axis=axis),
    "reshape": lambda v, shape, n: np.reshape(v[0], shape),
    "concat": lambda v, axis, n: np.concatenate(v, axis=axis),
    "gather": _fw_gather,
    "logsumexp": _fw_logsumexp,
    "hard_onehot": _fw_hard_onehot,
    "select_feature": _fw_select_feature,
    "tree_nodes": _fw_tree_nodes,
    "slice_cols": lambda v, ctx, n: v[0][:, ctx[0]:ctx[1]],
    "interleave_cols": _fw_interleave,
}


# Backward rules: (upstream, parent values, value, ctx) -> per-parent grads.

def _bw_matmul(up, v, out, ctx):
    a, b = v
    up = np.asarray(up)
    if a.ndim == 2 and b.ndim == 2:
        return up @ b.T, a.T @ up
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(up, b), a.T @ up
    if a.ndim == 1 and b.ndim == 2:
        return up @ b.T, np.outer(a, up)
    if a.ndim == 1 and b.ndim == 1:
        return up * b, up * a
    raise TapeError(f"unsupported matmul ranks {a.ndim} x {b.ndim}")


def _bw_sum(up, v, out, axis):
    x = v[0]
    if axis is None:
        return (np.broadcast_to(up, x.shape).copy(),)
    up_exp = np.expand_dims(up, axis=axis)
    return (np.broadcast_to(up_exp, x.shape).copy(),)


def _bw_gather(up, v, out, idx):
    g = np.zeros_like(v[0])
    np.add.at(g, idx, up)
    return (g,)


def _bw_concat(up, v, out, axis):
    sizes = [x.shape[axis] for x in v]
    return tuple(np.split(up, np.cumsum(sizes)[:-1], axis=axis))


def _bw_logsumexp(up, v, out, axis):
    soft = np.exp(v[0] - np.expand_dims(out, axis=axis))
    return (soft * np.expand_dims(up, axis=axis),)


def _bw_hard_onehot(up, v, out, straight_through):
    if not straight_through:
        return (np.zeros_like(v[0]),)
    s = v[0] - np.max(v[0])
    p = np.exp(s)
    p /= p.sum()
    return (p * (up - np.dot(up, p)),)


def _bw_select_feature(up, v, out, ctx):
    x, scores = v
    mode, tau = ctx
    if mode == "frozen":
        sel = np.zeros_like(scores)
        sel[np.argmax(scores)] = 1.0
        return np.outer(up, sel), np.zeros_like(scores)
    p = _softmax(scores / tau)
    gx = np.outer(up, p)
    dense = x.T @ up          # gradient wrt the (soft) selector
    gs = p * (dense - np.dot(dense, p)) / tau
    return gx, gs


def _bw_tree_nodes(up, v, out, ctx):
    x, W, C, S, alpha = v
    mode, tau = ctx
    sel_fwd = _selector_matrix(S, mode, tau)
    z = x @ (W * sel_fwd).T - np.sum(C * sel_fwd, axis=1)
    dpre = up * out * (1.0 - out)          # sigmoid'
    dalpha = np.sum(dpre * z, axis=0)
    dz = dpre * alpha                       # (B, N)
    # straight-through: gradients to x, W, C flow through the soft selector
    sel_bwd = sel_fwd if mode != "hard" else _softmax_rows(S / tau)
    if mode == "frozen":
        sel_bwd = sel_fwd
    dx = dz @ (W * sel_bwd)
    dzTx = dz.T @ x                         # (N, F)
    dW = dzTx * sel_bwd
    dC = -np.sum(dz, axis=0)[:, None] * sel_bwd
    if mode == "frozen":
        dS = np.zeros_like(S)
    else:
        G = W * dzTx - C * np.sum(dz, axis=0)[:, None]
        p = sel_bwd
        dS = p * (G - np.sum(G * p, axis=1, keepdims=True)) / tau
    return dx, dW, dC, dS, dalpha


def _bw_interleave(up, v, out, ctx):
    return up[:, 0::2], up[:, 1::2]


def _bw_slice_cols(up, v, out, ctx):
    start, stop = ctx
    g = np.zeros_like(v[0])
    g[:, start:stop] = up
    return (g,)


def _bw_max(up, v, out, ctx):
    take_a = v[0] >= v[1]
    ga = _unbroadcast(up * take_a, np.shape(v[0]))
    gb = _unbroadcast(up * (~np.asarray(take_a, dtype=bool)), np.shape(v[1]))
    return ga, gb


_BACKWARD: dict[str, Callable] = {
    "add": lambda up, v, out, c: (
        _unbroadcast(up, np.shape(v[0])),
        _unbroadcast(up, np.shape(v[1])),
    ),
    "sub": lambda up, v, out, c: (
        _unbroadcast(up, np.shape(v[0])),
        _unbroadcast(-up, np.shape(v[1])),
    ),
    "mul": lambda up, v, out, c: (
        _unbroadcast(up * v[1], np.shape(v[0])),
        _unbroadcast(up * v[0], np.shape(v[1])),
    ),
    "div": lambda up, v, out, c: (
        _unbroadcast(up / v[1], np.shape(v[0])),
        _unbroadcast(-up * v[0] / (v[1] * v[1]), np.shape(v[1])),
    ),
    "neg": lambda up, v, out, c: (-up,),
    "exp": lambda up, v, out, c: (up * out,),
    "log": lambda up, v, out, c: (up / v[0],),
    "max": _bw_max,
    "sigmoid": lambda up, v, out, c: (up * out * (1.0 - out),),
    "tanh": lambda up, v, out, c: (up * (1.0 - out * out),),
    "relu": lambda up, v, out, c: (up * (v[0] > 0.0),),
    "softplus": lambda up, v, out, c: (up * _stable_sigmoid(v[0]),),
    "matmul": _bw_matmul,
    "sum": _bw_sum,
    "reshape": lambda up, v, out, shape: (np.reshape(up, np.shape(v[0])),),
    "concat": _bw_concat,
    "gather": _bw_gather,
    "logsumexp": _bw_logsumexp,
    "hard_onehot": _bw_hard_onehot,
    "select_feature": _bw_select_feature,
    "tree_nodes": _bw_tree_nodes,
    "slice_cols": _bw_slice_cols,
    "interleave_cols": _bw_interleave,
}


def forward(tape: Tape, inputs: Optional[Sequence] = None) -> np.ndarray:
    return tape.forward(inputs)


def backward(tape: Tape, upstream=None, output: Optional[Var] = None) -> dict:
    return tape.backward(output=output, upstream=upstream)


# ---------------------------------------------------------------------------
# Divergence losses
# ---------------------------------------------------------------------------

_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


def _clamp_probs(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    global _clamp_events
    needs = np.any((p <= 0.0) & (t > 0.0)) or np.any((p >= 1.0) & (t < 1.0))
    if needs:
        _clamp_events += 1
        return np.clip(p, EPS_PROB, 1.0 - EPS_PROB)
    return p


def _renyi_pair(t: np.ndarray, p: np.ndarray, alpha: float) -> float:
    """Divergence of order alpha from distribution t to p (KL at alpha=1)."""
    p = _clamp_probs(p, t)
    mask = t > 0.0
    if abs(alpha - 1.0) < 1e-12:
        return float(np.sum(t[mask] * (np.log(t[mask]) - np.log(p[mask]))))
    total = np.sum(t[mask] ** alpha * p[mask] ** (1.0 - alpha))
    return float(np.log(total) / (alpha - 1.0))


def renyi_loss(predicted, target, alpha: float = 1.0, multilabel: bool = False) -> float:
    """Divergence between a predicted distribution and a target.

    Single-label: ``predicted`` must sum to 1 (within 1e-6) and ``target`` is a
    distribution (typically one-hot). Multi-label: both are vectors of
    per-action-head probabilities; heads are treated as Bernoulli
    distributions and their divergences summed.
    """
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if multilabel:
        total = 0.0
        for ph, th in zip(p, t):
            total += _renyi_pair(
                np.array([th, 1.0 - th]), np.array([ph, 1.0 - ph]), alpha
            )
        return total
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"predicted sums to {p.sum():.8f}, expected 1")
    return _renyi_pair(t, p, alpha)


# ---------------------------------------------------------------------------
# Tape-level loss builders shared by the trainable models
# ---------------------------------------------------------------------------

def binary_ce_from_logits(tape: Tape, logits: Var, labels: np.ndarray,
                          weights: Optional[np.ndarray] = None) -> Var:
    """Mean binary cross-entropy, computed stably from logits."""
    y = tape.const(np.asarray(labels, dtype=np.float64))
    per = tape.sub(tape.softplus(logits), tape.mul(y, logits))
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        return tape.div(tape.sum(tape.mul(per, tape.const(w))), tape.const(float(w.sum())))
    return tape.mean(per)


def multiclass_ce_from_logits(tape: Tape, logits: Var, labels: np.ndarray,
                              n_classes: int,
                              weights: Optional[np.ndarray] = None) -> Var:
    """Mean softmax cross-entropy from a (batch, classes) logit matrix."""
    y = np.asarray(labels)
    onehot = np.zeros((y.shape[0], n_classes))
    onehot[np.arange(y.shape[0]), y] = 1.0
    lse = tape.logsumexp(logits, axis=1)
    picked = tape.sum(tape.mul(logits, tape.const(onehot)), axis=1)
    per = tape.sub(lse, picked)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        return tape.div(tape.sum(tape.mul(per, tape.const(w))), tape.const(float(w.sum())))
    return tape.mean(per)


def multilabel_ce_from_logits(tape: Tape, logits: Var, targets: np.ndarray) -> Var:
    """Mean over examples of summed per-head binary cross-entropies."""
    y = tape.const(np.asarray(targets, dtype=np.float64))
    per = tape.sub(tape.softplus(logits), tape.mul(y, logits))
    return tape.div(tape.sum(per), tape.const(float(np.shape(targets)[0])))


def run_sgd(loss_builder: Callable[[np.ndarray], tuple],
            n_examples: int,
            params: Sequence[Parameter],
            config: SgdConfig,
            post_step: Optional[Callable[[], None]] = None,
            on_epoch: Optional[Callable[[int], None]] = None) -> list[float]:
    """Minibatch SGD over shuffled example indices; returns per-epoch mean loss.

    ``loss_builder(batch_indices)`` must return ``(tape, loss_var)``;
    ``post_step`` (if given) runs after every parameter update, e.g. for
    projections; ``on_epoch`` runs before each epoch (e.g. schedules). Raises
    TrainingError on a non-finite loss or if the final epoch's mean loss is
    not below the first epoch's.
    """
    rng = np.random.default_rng(config.seed)
    curve = []
    for epoch in range(config.epochs):
        if on_epoch is not None:
            on_epoch(epoch)
        order = rng.permutation(n_examples)
        total, count = 0.0, 0
        for start in range(0, n_examples, config.batch_size):
            batch = order[start:start + config.batch_size]
            tape, loss = loss_builder(batch)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite loss {loss_val} at epoch {epoch}, batch offset {start}"
                )
            tape.backward(output=loss)
            sgd_step(params, config)
            if post_step is not None:
                post_step()
            total += loss_val * len(batch)
            count += len(batch)
        curve.append(total / count)
    if len(curve) > 1 and curve[-1] >= curve[0] and curve[-1] > 1e-9:
        raise TrainingError(
            f"loss failed to decrease: first epoch {curve[0]:.6f}, last {curve[-1]:.6f}"
        )
    return curve


def splitmix64(seed: int, index: int) -> int:
    """Derive a decorrelated 64-bit stream seed from (seed, index)."""
    z = (seed + 0x9E3779B97F4A7C15 * (index + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)
