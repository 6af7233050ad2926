"""Plaintext split learning: the insecure reference design for leakage probes.

Each party keeps a bottom model in plaintext.  Party A sends its bottom
output in the clear and receives the derivative of the loss with respect to
that output, also in the clear.  Both streams are recorded at A so the
probes can work on exactly what A observed.

Two bottom kinds are supported:

* ``linear``: A computes ``Z_A = X_A W_A``, B adds ``X_B W_B`` and applies a
  bias head (or an MLP if ``hidden`` is given);
* ``embed``: each party looks up its categorical field in its own table and
  B feeds the concatenation ``[E_A, E_B]`` into an MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import FxTensor
from ..transport import Session
from .metrics import log_loss
from .topmodels import TopModel
from .trainer import PartyData, TrainConfig, batch_schedule

WIRE_SCALE = 40


@dataclass
class SplitSpec:
    bottom: str  # "linear" | "embed"
    in_a: int = 0
    in_b: int = 0
    out: int = 1
    vocab_a: int = 0
    vocab_b: int = 0
    dim: int = 8
    hidden: tuple[int, ...] = ()


@dataclass
class Exposure:
    """What A saw: per-batch row ids with the activation sent and derivative received."""

    rows: list[np.ndarray] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)
    derivatives: list[np.ndarray] = field(default_factory=list)

    def last_epoch(self):
        e = max(self.epochs)
        keep = [i for i, x in enumerate(self.epochs) if x == e]
        return (np.concatenate([self.rows[i] for i in keep]),
                np.concatenate([self.derivatives[i] for i in keep]))


class _Bottom:
    def __init__(self, spec: SplitSpec, own_in: int, vocab: int, gen: np.random.Generator, cfg: TrainConfig):
        self.kind = spec.bottom
        self.lr, self.beta = cfg.lr, cfg.momentum
        if self.kind == "linear":
            bound = 1.0 / np.sqrt(max(own_in, 1))
            self.w = gen.uniform(-bound, bound, size=(own_in, spec.out))
        else:
            self.w = gen.normal(0.0, 0.1, size=(vocab, spec.dim))
        self.v = np.zeros_like(self.w)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.w if self.kind == "linear" else self.w[x]

    def backward(self, d):
        if self.kind == "linear":
            g = self._x.T @ d
        else:
            g = np.zeros_like(self.w)
            np.add.at(g, self._x, d)
        self.v = self.beta * self.v + g
        self.w = self.w - self.lr * self.v


def _inputs(spec: SplitSpec, data: PartyData, rows):
    if spec.bottom == "linear":
        return data.X[rows].toarray()
    return data.cats[rows]


def train_split_party(session: Session, spec: SplitSpec, cfg: TrainConfig, data: PartyData):
    """Run one party; A returns (bottom, Exposure), B returns (bottom, top, iteration losses)."""
    is_b = session.party == "B"
    gen = session.rng.spawn("split.init").numpy()
    own_in = spec.in_b if is_b else spec.in_a
    bottom = _Bottom(spec, own_in, spec.vocab_b if is_b else spec.vocab_a, gen, cfg)
    top = None
    if is_b:
        width = spec.out if spec.bottom == "linear" else 2 * spec.dim
        top = TopModel(width, 1, spec.hidden, gen=gen, lr=cfg.lr, momentum=cfg.momentum,
                       input_act=spec.bottom == "linear" and bool(spec.hidden))
    seen = Exposure()
    losses: list[float] = []
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        for step, rows in enumerate(batch_schedule(n, cfg.batch, cfg.data_seed, epoch)):
            tag = f"split/{epoch}.{step}"
            own = bottom.forward(_inputs(spec, data, rows))
            if not is_b:
                session.send_plain(f"{tag}.act", FxTensor.encode(own, WIRE_SCALE))
                d = session.recv_plain(f"{tag}.grad").decode()
                seen.rows.append(rows)
                seen.epochs.append(epoch)
                seen.activations.append(own)
                seen.derivatives.append(d)
                bottom.backward(d)
                continue
            other = session.recv_plain(f"{tag}.act").decode()
            z = own + other if spec.bottom == "linear" else np.hstack([other, own])
            yb = data.y[rows]
            losses.append(log_loss(top.forward(z), yb))
            dz = top.backward(yb)
            d_a = dz if spec.bottom == "linear" else dz[:, :spec.dim]
            d_b = dz if spec.bottom == "linear" else dz[:, spec.dim:]
            session.send_plain(f"{tag}.grad", FxTensor.encode(d_a, WIRE_SCALE))
            bottom.backward(d_b)
    if is_b:
        return bottom, top, losses
    return bottom, seen
