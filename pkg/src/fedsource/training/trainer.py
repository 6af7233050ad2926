"""Federated training loop, run once per party.

Both parties walk the same batch schedule, derived from a public data seed,
so no instance ids cross the wire.  Party B restores Z, runs its plaintext
top model, and feeds ``lr * dZ`` (encoded at scale F) back into the source
layers.  Each history row holds the epoch, the mean training loss and the
test metric; row 0 describes the freshly initialized model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..data import Dataset, even_ranges, vsplit
from ..embed import EmbedDims, EmbedMatMulLayer
from ..matmul import MatMulDims, MatMulLayer
from ..tensor import CipherTensor, FxTensor
from ..transport import Session
from .metrics import log_loss, test_metric
from .topmodels import TopModel

MODEL_KINDS = ("lr", "mlr", "mlp", "wdl")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    batch: int = 128
    momentum: float = 0.9
    data_seed: int = 0
    initializer: str = "uniform"


@dataclass(frozen=True)
class ModelSpec:
    """Shape of a federated model.

    ``hidden`` is the width of Z for ``mlp`` (and for ``wdl`` when nonzero);
    ``wdl`` adds an embedding layer over one categorical field per party.
    """

    kind: str
    in_a: int
    in_b: int
    n_classes: int = 2
    hidden: int = 64
    vocab_a: int = 0
    vocab_b: int = 0
    embed_dim: int = 4

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}")
        if self.kind == "lr" and self.n_classes != 2:
            raise ValueError("lr is a binary model; use mlr for more classes")
        if self.kind == "wdl" and (self.vocab_a <= 0 or self.vocab_b <= 0):
            raise ValueError("wdl needs a categorical vocabulary on both sides")

    @property
    def n_out(self) -> int:
        return 1 if self.n_classes == 2 else self.n_classes

    @property
    def out(self) -> int:
        if self.kind == "mlp" or (self.kind == "wdl" and self.hidden):
            return self.hidden
        return self.n_out

    @property
    def has_matmul(self) -> bool:
        return self.in_a > 0 and self.in_b > 0

    @classmethod
    def for_dataset(cls, kind: str, ds: Dataset, ranges=None, **kw) -> "ModelSpec":
        ranges = ranges or even_ranges(ds.X.shape[1])
        (la, ha), (lb, hb) = ranges
        if kind == "wdl":
            kw.setdefault("hidden", 0)
            kw.setdefault("vocab_a", ds.vocab[0])
            kw.setdefault("vocab_b", ds.vocab[1])
        return cls(kind, ha - la, hb - lb, ds.n_classes, **kw)


@dataclass
class PartyData:
    """One party's columns of an aligned dataset; only B carries labels."""

    X: sp.csr_matrix | None
    cats: np.ndarray | None = None
    y: np.ndarray | None = None

    def __len__(self) -> int:
        if self.X is not None:
            return self.X.shape[0]
        return len(self.cats)


def party_views(ds: Dataset, ranges=None) -> tuple[PartyData, PartyData]:
    ranges = ranges or even_ranges(ds.X.shape[1])
    xa, xb = vsplit(ds.X, ranges)
    ca = cb = None
    if ds.cats is not None:
        ca, cb = ds.cats[:, 0], ds.cats[:, 1]
    return PartyData(xa, ca), PartyData(xb, cb, ds.y)


def batch_schedule(n: int, batch: int, data_seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([data_seed, epoch]).permutation(n)
    return [perm[i:i + batch] for i in range(0, n, batch)]


def build_layers(session: Session, spec: ModelSpec, cfg: TrainConfig) -> list:
    layers = []
    if spec.has_matmul:
        layers.append(MatMulLayer(session, "mm", MatMulDims(spec.in_a, spec.in_b, spec.out),
                                  momentum=cfg.momentum, initializer=cfg.initializer))
    if spec.kind == "wdl":
        dims = EmbedDims(spec.vocab_a, spec.vocab_b, spec.embed_dim, spec.out)
        layers.append(EmbedMatMulLayer(session, "em", dims, momentum=cfg.momentum, initializer=cfg.initializer))
    if not layers:
        raise ValueError("model has no source layer")
    return layers


def build_top(gen: np.random.Generator, spec: ModelSpec, cfg: TrainConfig) -> TopModel:
    return TopModel(spec.out, spec.n_out, gen=gen, lr=cfg.lr, momentum=cfg.momentum)


@dataclass
class TrainResult:
    party: str
    history: list[dict] = field(default_factory=list)
    iter_losses: list[float] = field(default_factory=list)
    layers: list = field(default_factory=list)
    top: TopModel | None = None


class _Inputs:
    """Encoded per-layer inputs for one party's rows."""

    def __init__(self, session: Session, layers, data: PartyData):
        cfg = session.config
        self.x = None
        if data.X is not None and any(l.kind == "matmul" for l in layers):
            self.x = FxTensor.encode(data.X, cfg.frac_bits, bound_bits=cfg.feature_bits)
        self.cats = data.cats
        self.layers = layers

    def for_layer(self, layer, rows):
        if layer.kind == "matmul":
            return self.x.take_rows(rows)
        return [int(i) for i in self.cats[rows]]


def _forward(layers, inputs: _Inputs, rows) -> np.ndarray | None:
    z = None
    for layer in layers:
        out = layer.forward(inputs.for_layer(layer, rows))
        if out is not None:
            z = out.decode() if z is None else z + out.decode()
    return z


def _predict(layers, inputs: _Inputs, n: int, batch: int, top: TopModel | None) -> np.ndarray | None:
    probs = []
    for lo in range(0, n, batch):
        z = _forward(layers, inputs, np.arange(lo, min(lo + batch, n)))
        if top is not None:
            probs.append(top.predict(z))
    return np.concatenate(probs) if top is not None and probs else None


def train_party(
    session: Session,
    spec: ModelSpec,
    cfg: TrainConfig,
    train: PartyData,
    test: PartyData | None = None,
    *,
    checkpoint_path=None,
) -> TrainResult:
    """Run this party's side of training; B's result carries the metrics history."""
    is_b = session.party == "B"
    if is_b and train.y is None:
        raise ValueError("party B needs labels")
    layers = build_layers(session, spec, cfg)
    for layer in layers:
        layer.setup()
    top = build_top(session.rng.spawn("top.init").numpy(), spec, cfg) if is_b else None
    tr_in = _Inputs(session, layers, train)
    te_in = _Inputs(session, layers, test) if test is not None else None
    n = len(train)
    F = session.config.frac_bits
    res = TrainResult(session.party, layers=layers, top=top)

    def evaluate(epoch: int, train_loss: float | None):
        if epoch == 0:
            p = _predict(layers, tr_in, n, cfg.batch, top)
            train_loss = log_loss(p, train.y) if is_b else None
        metric = math.nan
        if te_in is not None:
            p = _predict(layers, te_in, len(test), cfg.batch, top)
            if is_b:
                metric = test_metric(p, test.y)
        if is_b:
            res.history.append({"epoch": epoch, "train_loss": train_loss, "test_metric": metric})

    evaluate(0, None)
    for epoch in range(1, cfg.epochs + 1):
        total, seen = 0.0, 0
        for rows in batch_schedule(n, cfg.batch, cfg.data_seed, epoch):
            z = _forward(layers, tr_in, rows)
            if is_b:
                yb = train.y[rows]
                probs = top.forward(z)
                loss = log_loss(probs, yb)
                res.iter_losses.append(loss)
                total += loss * len(rows)
                seen += len(rows)
                g = FxTensor.encode(cfg.lr * top.backward(yb), F)
                for layer in layers:
                    layer.backward(g)
            else:
                for layer in layers:
                    layer.backward()
        evaluate(epoch, total / seen if is_b else None)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, session.party, cfg.epochs, layers, top)
    return res


# -- metrics and checkpoints ----------------------------------------------------------


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "test_metric"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in row.items()})


def _pack(v):
    if isinstance(v, CipherTensor):
        return {"cipher": v.to_bytes().hex()}
    if isinstance(v, FxTensor):
        return {"plain": v.to_bytes().hex()}
    return None


def save_checkpoint(path, party: str, epoch: int, layers, top: TopModel | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "party": party,
        "epoch": epoch,
        "layers": {
            layer.name: {
                "iteration": layer.iteration,
                "state": {k: _pack(v) for k, v in layer.state_dict().items()},
                "velocity": {k: _pack(v) for k, v in layer.opt.state_dict().items()},
            }
            for layer in layers
        },
    }
    if top is not None:
        doc["top"] = {
            "params": {k: v.tolist() for k, v in top.params.items()},
            "velocity": {k: v.tolist() for k, v in top.velocity.items()},
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, session: Session, layers, top: TopModel | None = None) -> int:
    """Restore layer pieces, caches, velocities and the top model; returns the epoch."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    if doc.get("party") != session.party:
        raise ValueError(f"checkpoint belongs to party {doc.get('party')}")

    def unpack(v):
        if v is None:
            return None
        if "cipher" in v:
            return CipherTensor.from_bytes(bytes.fromhex(v["cipher"]), session.peer_pk)
        return FxTensor.from_bytes(bytes.fromhex(v["plain"]))

    for layer in layers:
        entry = doc["layers"][layer.name]
        layer.load_state_dict({k: unpack(v) for k, v in entry["state"].items()})
        layer.opt.velocity = {k: unpack(v) for k, v in entry["velocity"].items()}
        layer.iteration = entry["iteration"]
    if top is not None:
        top.params = {k: np.asarray(v, dtype=np.float64) for k, v in doc["top"]["params"].items()}
        top.velocity = {k: np.asarray(v, dtype=np.float64) for k, v in doc["top"]["velocity"].items()}
    return doc["epoch"]


__all__ = [
    "TrainConfig", "ModelSpec", "PartyData", "party_views", "batch_schedule", "build_layers",
    "build_top", "TrainResult", "train_party", "write_metrics_csv", "save_checkpoint",
    "load_checkpoint",
]
