"""Plaintext top models resident at the label party.

A top model consumes the restored activation Z, produces class
probabilities, and returns dL/dZ for the mean loss over the batch while
updating its own float parameters with momentum SGD.
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TopModel:
    """Bias head or MLP over Z.

    * ``in_dim == out_dim`` and no ``hidden``: logits = Z + b (LR/MLR head).
    * otherwise Z is a hidden pre-activation: ``a = relu(Z + b0)`` followed by
      dense ReLU layers of widths ``hidden`` and a dense output layer.

    ``input_act=False`` skips the bias/ReLU on Z (for split-learning tops whose
    input is an embedding, not a pre-activation).
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden=(),
        *,
        gen: np.random.Generator,
        lr: float = 0.05,
        momentum: float = 0.9,
        input_act: bool = True,
    ):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.lr, self.momentum = lr, momentum
        self.head_only = in_dim == out_dim and not hidden and input_act
        self.input_act = input_act
        self.params: dict[str, np.ndarray] = {}
        if self.head_only:
            self.params["b"] = np.zeros(out_dim)
        else:
            if input_act:
                self.params["b0"] = np.zeros(in_dim)
            widths = [in_dim, *hidden, out_dim]
            for i in range(len(widths) - 1):
                bound = np.sqrt(6.0 / (widths[i] + widths[i + 1]))
                self.params[f"W{i + 1}"] = gen.uniform(-bound, bound, size=(widths[i], widths[i + 1]))
                self.params[f"b{i + 1}"] = np.zeros(widths[i + 1])
            self.n_dense = len(widths) - 1
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def binary(self) -> bool:
        return self.out_dim == 1

    def _logits(self, z):
        p = self.params
        if self.head_only:
            return z + p["b"], None
        acts = []
        a = np.maximum(z + p["b0"], 0.0) if self.input_act else z
        acts.append(a)
        for i in range(1, self.n_dense + 1):
            a = a @ p[f"W{i}"] + p[f"b{i}"]
            if i < self.n_dense:
                a = np.maximum(a, 0.0)
                acts.append(a)
        return a, acts

    def predict(self, z: np.ndarray) -> np.ndarray:
        logits, _ = self._logits(np.asarray(z, dtype=np.float64))
        return _sigmoid(logits) if self.binary else _softmax(logits)

    def forward(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        logits, acts = self._logits(z)
        probs = _sigmoid(logits) if self.binary else _softmax(logits)
        self._cache = (z, acts, probs)
        return probs

    def backward(self, y: np.ndarray) -> np.ndarray:
        """dL/dZ of the mean loss; also applies one SGD step to the top parameters."""
        z, acts, probs = self._cache
        self._cache = None
        y = np.asarray(y).astype(int).ravel()
        n = len(y)
        if self.binary:
            d = (probs - y.reshape(-1, 1)) / n
        else:
            d = probs.copy()
            d[np.arange(n), y] -= 1.0
            d /= n
        grads: dict[str, np.ndarray] = {}
        p = self.params
        if self.head_only:
            grads["b"] = d.sum(axis=0)
            dz = d
        else:
            for i in range(self.n_dense, 0, -1):
                a_in = acts[i - 1]
                grads[f"W{i}"] = a_in.T @ d
                grads[f"b{i}"] = d.sum(axis=0)
                d = d @ p[f"W{i}"].T
                if i > 1 or self.input_act:
                    d = d * (a_in > 0)
            if self.input_act:
                grads["b0"] = d.sum(axis=0)
            dz = d
        for k, g in grads.items():
            v = self.momentum * self.velocity[k] + g
            self.velocity[k] = v
            p[k] = p[k] - self.lr * v
        return dz

    def loss(self, probs: np.ndarray, y: np.ndarray) -> float:
        from .metrics import log_loss

        return log_loss(probs, y)
