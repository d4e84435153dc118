"""Small fully-connected networks on the autodiff tape."""

from __future__ import annotations

import numpy as np

from apprentice.diffcore import Parameter, Tape, Var

ACTIVATIONS = ("tanh", "relu", "sigmoid")


class FeedForward:
    """Dense layers with a shared hidden activation and a linear output."""

    def __init__(self, sizes: list[int], seed: int = 0, activation: str = "tanh"):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = list(sizes)
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.weights.append(Parameter(w, name=f"W{i}"))
            self.biases.append(Parameter(np.zeros(fan_out), name=f"b{i}"))

    def parameters(self) -> list[Parameter]:
        return [*self.weights, *self.biases]

    def logits(self, tape: Tape, x: Var) -> Var:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = tape.add(tape.matmul(h, tape.param(w)), tape.param(b))
            if i < last:
                h = getattr(tape, self.activation)(h)
        return h

    def state_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activation": self.activation,
            "weights": [w.value.tolist() for w in self.weights],
            "biases": [b.value.tolist() for b in self.biases],
        }

    @classmethod
    def from_state(cls, state: dict) -> "FeedForward":
        net = cls(state["sizes"], seed=0, activation=state["activation"])
        for w, saved in zip(net.weights, state["weights"]):
            w.value = np.array(saved, dtype=np.float64)
            w.velocity = np.zeros_like(w.value)
        for b, saved in zip(net.biases, state["biases"]):
            b.value = np.array(saved, dtype=np.float64)
            b.velocity = np.zeros_like(b.value)
        return net

    def checksum(self) -> float:
        return float(sum(np.sum(w.value) for w in self.weights)
                     + sum(np.sum(b.value) for b in self.biases))
