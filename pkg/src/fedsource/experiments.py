"""In-process experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import probes
from .config import ProtocolConfig
from .data import Dataset, load_dataset
from .matmul import reference_init
from .paillier import keygen
from .privacy import (
    Violation,
    embed_ground_truth,
    final_weights_truth,
    matmul_ground_truth,
    observations,
    policy_for,
    scan,
)
from .rng import DRBG
from .training.oracle import oracle_train
from .training.split import SplitSpec, train_split_party
from .training.trainer import ModelSpec, PartyData, TrainConfig, TrainResult, party_views, train_party
from .transport import Session, local_sessions, run_parties


def seeded_keys(key_bits: int, party: str, seed):
    """A key pair derived from the party's own seed (reproducible runs need reproducible keys)."""
    return keygen(key_bits, party, DRBG(seed).spawn("keygen"))


def party_keys(key_bits: int, seed_a, seed_b):
    return seeded_keys(key_bits, "A", seed_a), seeded_keys(key_bits, "B", seed_b)


@dataclass
class FederatedRun:
    spec: ModelSpec
    a: TrainResult
    b: TrainResult
    session_a: Session
    session_b: Session

    @property
    def history(self) -> list[dict]:
        return self.b.history


def federated_run(
    spec: ModelSpec,
    cfg: TrainConfig,
    train: Dataset,
    test: Dataset | None = None,
    *,
    ranges=None,
    seed_a=1,
    seed_b=2,
    key_bits: int = 512,
    trace: bool = False,
) -> FederatedRun:
    config = ProtocolConfig(key_bits=key_bits)
    ka, kb = party_keys(key_bits, seed_a, seed_b)
    sa, sb = local_sessions(config, ka, kb, seed_a, seed_b, trace=trace)
    ta, tb = party_views(train, ranges)
    ea = eb = None
    if test is not None:
        ea, eb = party_views(test, ranges)
    try:
        ra, rb = run_parties(
            lambda: train_party(sa, spec, cfg, ta, ea),
            lambda: train_party(sb, spec, cfg, tb, eb),
        )
    finally:
        sa.close()
        sb.close()
    return FederatedRun(spec, ra, rb, sa, sb)


def oracle_run(spec: ModelSpec, cfg: TrainConfig, train: Dataset, test: Dataset | None = None, *,
               ranges=None, seed_a=1, seed_b=2, key_bits: int = 512, features: str = "both"):
    pair = party_views(train, ranges)
    tpair = party_views(test, ranges) if test is not None else None
    return oracle_train(spec, cfg, pair, tpair, seed_a=seed_a, seed_b=seed_b,
                        config=ProtocolConfig(key_bits=key_bits), features=features)


# -- privacy scans ------------------------------------------------------------------------


def _party_state(result: TrainResult) -> dict:
    out = {}
    for layer in result.layers:
        for k, v in layer.state_dict().items():
            if v is not None:
                out[f"{layer.name}.{k}"] = v
    return out


def scan_run(run: FederatedRun, *, only: tuple[str, ...] | None = None) -> list[Violation]:
    """Scan both transcripts and final states of a traced run against every restricted quantity."""
    ta, tb = run.session_a.trace, run.session_b.trace
    if not ta.enabled or not tb.enabled:
        raise ValueError("privacy scans need a traced run")
    found: list[Violation] = []
    for party, session, result in (("A", run.session_a, run.a), ("B", run.session_b, run.b)):
        forbidden: dict[str, list] = {}
        for la, lb in zip(run.a.layers, run.b.layers):
            if la.kind == "matmul":
                gt = matmul_ground_truth(ta, tb, la.name)
            else:
                gt = embed_ground_truth(ta, tb, la.name)
            gt_final = final_weights_truth(la.plaintext_state(), lb.plaintext_state(), la.kind)
            names = policy_for(la.kind, party)
            if only is not None:
                names = tuple(n for n in names if n in only)
            for n in names:
                forbidden.setdefault(n, []).extend(gt.get(n, []) + gt_final.get(n, []))
        found += scan(party, observations(session.transcript, _party_state(result)), forbidden)
    return found


# -- probes -------------------------------------------------------------------------------


def forward_probe(n: int = 1000, runs: int = 5, epochs: int = 3, *, dataset: str = "a9a",
                  key_bits: int = 512, seed: int = 1) -> probes.ProbeReport:
    """AUC of A's own weight piece as a label predictor, averaged over seeded runs."""
    ds = load_dataset(dataset, n, seed=seed)
    spec = ModelSpec.for_dataset("lr", ds)
    xa = party_views(ds)[0].X
    aucs = []
    for r in range(runs):
        run = federated_run(spec, TrainConfig(epochs=epochs), ds, seed_a=100 + r, seed_b=200 + r, key_bits=key_bits)
        aucs.append(probes.activation_auc(xa, run.a.layers[0].U.decode(), ds.y))
    return probes.forward_masked_report(aucs)


def split_run(spec: SplitSpec, cfg: TrainConfig, a: PartyData, b: PartyData, *, seed_a=1, seed_b=2, key_bits: int = 512):
    config = ProtocolConfig(key_bits=key_bits)
    ka, kb = party_keys(key_bits, seed_a, seed_b)
    sa, sb = local_sessions(config, ka, kb, seed_a, seed_b)
    try:
        ra, rb = run_parties(lambda: train_split_party(sa, spec, cfg, a), lambda: train_split_party(sb, spec, cfg, b))
    finally:
        sa.close()
        sb.close()
    return ra, rb, sa, sb


def forward_baseline_probe(n: int = 3000, *, dataset: str = "w8a", seed: int = 1, key_bits: int = 512) -> probes.ProbeReport:
    ds = load_dataset(dataset, n, seed=seed)
    a, b = party_views(ds)
    spec = SplitSpec("linear", in_a=a.X.shape[1], in_b=b.X.shape[1])
    (bottom_a, _), _, _, _ = split_run(spec, TrainConfig(), a, b, key_bits=key_bits)
    return probes.forward_baseline_report(probes.activation_auc(a.X, bottom_a.w, ds.y))


def ablation_probe(n: int = 3000, factors=(1.0, 1e3, 1e6), *, dataset: str = "w8a", seed: int = 1,
                   seed_a=1, seed_b=2) -> probes.ProbeReport:
    """Shares made once at init, A updating its piece with plaintext gradients (float replay)."""
    ds = load_dataset(dataset, n, seed=seed)
    spec = ModelSpec.for_dataset("lr", ds)
    _, model = oracle_run(spec, TrainConfig(), ds, seed_a=seed_a, seed_b=seed_b)
    w0, _ = reference_init(seed_a, seed_b, "mm", spec.in_a, spec.in_b, spec.out)
    xa = party_views(ds)[0].X
    direction = DRBG(seed_b).spawn("ablation.mask").numpy().uniform(-1.0, 1.0, size=w0.shape)
    results = {f: probes.ablation_trajectory(xa, w0, model.params["W_A"], f * direction, ds.y) for f in factors}
    return probes.ablation_report(results)


def derivative_probe(n: int = 2000, hidden_layers=(1, 2, 3), *, width: int = 16, seed: int = 3,
                     key_bits: int = 512, masked_check: bool = True) -> probes.ProbeReport:
    """Cosine-sign label recovery on the split baseline, plus the masked-run message count."""
    ds = load_dataset("separable", n, seed=seed)
    a = PartyData(None, ds.cats[:, 0])
    b = PartyData(None, ds.cats[:, 1], ds.y)
    recov = {}
    for h in hidden_layers:
        spec = SplitSpec("embed", vocab_a=ds.vocab[0], vocab_b=ds.vocab[1], dim=8, hidden=(width,) * h)
        (_, seen), _, _, _ = split_run(spec, TrainConfig(), a, b, key_bits=key_bits)
        rows, d = seen.last_epoch()
        recov[h] = probes.cosine_sign_recovery(d, ds.y[rows])
    count = masked_gradient_messages(key_bits=key_bits) if masked_check else None
    return probes.derivative_report(recov, count)


def masked_gradient_messages(n: int = 64, epochs: int = 1, *, key_bits: int = 512, seed: int = 5) -> int:
    """Messages in a traced mini-WDL run from which A reads dL/dE_A in plaintext."""
    ds = load_dataset("categorical", n, seed=seed)
    spec = ModelSpec.for_dataset("wdl", ds)
    run = federated_run(spec, TrainConfig(epochs=epochs, batch=32), ds, trace=True, key_bits=key_bits)
    return sum(1 for v in scan_run(run, only=("gradE_A",)) if v.party == "A")


def shares_probe(n: int = 128, hidden: int = 32, *, key_bits: int = 512, seed: int = 1) -> probes.ProbeReport:
    """Sign agreement between A's piece and the restored weight after one epoch of an MLP."""
    ds = load_dataset("a9a", n, seed=seed)
    spec = ModelSpec.for_dataset("mlp", ds, hidden=hidden)
    run = federated_run(spec, TrainConfig(epochs=1), ds, key_bits=key_bits)
    la, lb = run.a.layers[0], run.b.layers[0]
    return probes.shares_report(la.U.decode(), (la.U + lb.V_peer).decode())


def collocated_vs_local(n: int = 3000, *, dataset: str = "w8a", seed: int = 1, epochs: int = 10) -> tuple[float, float]:
    """Test metric of the oracle with both parties' features and with B's features only."""
    from .data import train_test_split

    ds = load_dataset(dataset, n, seed=seed)
    tr, te = train_test_split(ds, 0.2, seed=seed)
    spec = ModelSpec.for_dataset("lr", ds)
    cfg = TrainConfig(epochs=epochs)
    both, _ = oracle_run(spec, cfg, tr, te)
    local, _ = oracle_run(spec, cfg, tr, te, features="B")
    return both.history[-1]["test_metric"], local.history[-1]["test_metric"]


def mean_abs_gap(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
