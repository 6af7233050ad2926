"""Plaintext float reference trainer for collocated data.

It replays the federated computation without any cryptography: the same
initial weights (recomputed from the party seeds), the same batch schedule,
features and scaled gradients quantized to F fractional bits, and momentum
quantized the same way.  The remaining differences are truncation units in
the federated updates.
"""

from __future__ import annotations

import math

import numpy as np

from ..config import ProtocolConfig
from ..embed import EmbedDims, reference_embed_init
from ..fixedpoint import encode_raw
from ..matmul import reference_init
from ..rng import DRBG
from ..tensor import FxTensor
from .metrics import log_loss, test_metric
from .trainer import ModelSpec, PartyData, TrainConfig, TrainResult, batch_schedule, build_top


def quantize(x, frac_bits: int) -> np.ndarray:
    """Round-to-nearest onto the F-bit grid, as the federated encoder does."""
    if hasattr(x, "toarray"):
        x = x.toarray()
    return np.floor(np.ldexp(np.asarray(x, dtype=np.float64), frac_bits) + 0.5) / (1 << frac_bits)


class OracleModel:
    """Logical parameters of a federated model, in float64."""

    def __init__(self, spec: ModelSpec, cfg: TrainConfig, seed_a, seed_b, frac_bits: int, features: str = "both"):
        if features not in ("both", "B"):
            raise ValueError("features must be 'both' or 'B'")
        self.spec, self.cfg, self.F = spec, cfg, frac_bits
        self.features = features
        self.beta = encode_raw(cfg.momentum, frac_bits) / (1 << frac_bits)
        self.params: dict[str, np.ndarray] = {}
        if spec.has_matmul:
            wa, wb = reference_init(seed_a, seed_b, "mm", spec.in_a, spec.in_b, spec.out, frac_bits, cfg.initializer)
            self.params.update(W_A=wa, W_B=wb)
        if spec.kind == "wdl":
            dims = EmbedDims(spec.vocab_a, spec.vocab_b, spec.embed_dim, spec.out)
            qa, qb, ea, eb = reference_embed_init(seed_a, seed_b, "em", dims, frac_bits, cfg.initializer)
            self.params.update(Q_A=qa, Q_B=qb, WE_A=ea, WE_B=eb)
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.top = build_top(DRBG(seed_b).spawn("top.init").numpy(), spec, cfg)

    def _use_a(self) -> bool:
        return self.features == "both"

    def z(self, xa, xb, ca, cb) -> np.ndarray:
        p = self.params
        z = 0.0
        if "W_A" in p:
            z = xb @ p["W_B"] + (xa @ p["W_A"] if self._use_a() else 0.0)
        if "Q_A" in p:
            z = z + p["Q_B"][cb] @ p["WE_B"]
            if self._use_a():
                z = z + p["Q_A"][ca] @ p["WE_A"]
        return z

    def step(self, xa, xb, ca, cb, g) -> None:
        """One momentum step given the quantized scaled gradient ``g`` = q(lr * dZ)."""
        p = self.params
        grads = {}
        if "W_A" in p:
            grads["W_B"] = xb.T @ g
            if self._use_a():
                grads["W_A"] = xa.T @ g
        if "Q_A" in p:
            for side, idx in (("B", cb), ("A", ca)):
                if side == "A" and not self._use_a():
                    continue
                e = p[f"Q_{side}"][idx]
                grads[f"WE_{side}"] = e.T @ g
                gq = np.zeros_like(p[f"Q_{side}"])
                np.add.at(gq, idx, g @ p[f"WE_{side}"].T)
                grads[f"Q_{side}"] = gq
        for k, gk in grads.items():
            self.velocity[k] = self.beta * self.velocity[k] + gk
            p[k] = p[k] - self.velocity[k]


def oracle_train(
    spec: ModelSpec,
    cfg: TrainConfig,
    train: tuple[PartyData, PartyData],
    test: tuple[PartyData, PartyData] | None = None,
    *,
    seed_a,
    seed_b,
    config: ProtocolConfig | None = None,
    features: str = "both",
) -> tuple[TrainResult, OracleModel]:
    """Float replay of federated training; ``features='B'`` drops party A's inputs."""
    F = (config or ProtocolConfig()).frac_bits
    model = OracleModel(spec, cfg, seed_a, seed_b, F, features)

    def prep(pair):
        a, b = pair
        xa = quantize(a.X, F) if a.X is not None and spec.has_matmul else None
        xb = quantize(b.X, F) if b.X is not None and spec.has_matmul else None
        return xa, xb, a.cats, b.cats, b.y

    tr = prep(train)
    te = prep(test) if test is not None else None
    n = len(tr[4])
    res = TrainResult("oracle", top=model.top)

    def rows_of(data, rows):
        return tuple(None if v is None else v[rows] for v in data[:4])

    def predict(data):
        m = len(data[4])
        return np.concatenate([
            model.top.predict(model.z(*rows_of(data, np.arange(lo, min(lo + cfg.batch, m)))))
            for lo in range(0, m, cfg.batch)
        ])

    def evaluate(epoch, train_loss):
        if train_loss is None:
            train_loss = log_loss(predict(tr), tr[4])
        metric = test_metric(predict(te), te[4]) if te is not None else math.nan
        res.history.append({"epoch": epoch, "train_loss": train_loss, "test_metric": metric})

    evaluate(0, None)
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for rows in batch_schedule(n, cfg.batch, cfg.data_seed, epoch):
            args = rows_of(tr, rows)
            yb = tr[4][rows]
            probs = model.top.forward(model.z(*args))
            loss = log_loss(probs, yb)
            res.iter_losses.append(loss)
            total += loss * len(rows)
            g = FxTensor.encode(cfg.lr * model.top.backward(yb), F).decode()
            model.step(*args, g)
        evaluate(epoch, total / n)
    return res, model
