"""Leakage probes.

Each probe plays party A after the fact: it takes only what A observed or
holds and tries to predict B's labels.  Reports carry the score, the
threshold it is judged against, and the verdict.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .training.metrics import auc

# thresholds of the acceptance checks
FORWARD_MASKED_BAND = (0.45, 0.55)
FORWARD_BASELINE_MIN = 0.8
ABLATION_MIN = 0.75
DERIVATIVE_MIN = 0.99
SHARE_SIGN_BAND = (0.4, 0.6)


@dataclass
class ProbeReport:
    probe: str
    metric: str
    value: float
    threshold: str
    passed: bool
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


def _within(v: float, band) -> bool:
    return band[0] <= v <= band[1]


# -- forward activations --------------------------------------------------------------


def activation_auc(x_a, weights, labels) -> float:
    """AUC of ranking instances by ``X_A @ w`` (first output column)."""
    scores = np.asarray(x_a @ np.asarray(weights)[:, :1]).ravel()
    return auc(scores, labels)


def forward_masked_report(aucs) -> ProbeReport:
    """Mean over runs of AUC(X_A U_A): A's own piece should predict nothing."""
    v = float(np.mean(aucs))
    return ProbeReport("forward", "auc(X_A U_A)", v, f"in {list(FORWARD_MASKED_BAND)}",
                       _within(v, FORWARD_MASKED_BAND), {"runs": [float(a) for a in aucs]})


def forward_baseline_report(value: float) -> ProbeReport:
    return ProbeReport("forward-baseline", "auc(X_A W_A)", float(value), f">= {FORWARD_BASELINE_MIN}",
                       value >= FORWARD_BASELINE_MIN)


def ablation_trajectory(x_a, w_a_init, w_a_final, v_a, labels) -> dict:
    """Shares created once, never re-masked: A's piece moves by exactly the weight update.

    ``U_A(t) = W_A(t) - V_A`` with a fixed ``V_A``, so ``U_A(T) - U_A(0)``
    equals ``W_A(T) - W_A(0)`` no matter how large ``V_A`` is.
    """
    u0 = w_a_init - v_a
    ut = w_a_final - v_a
    return {
        "raw": activation_auc(x_a, ut, labels),
        "differenced": activation_auc(x_a, ut - u0, labels),
    }


def ablation_report(results: dict[float, dict]) -> ProbeReport:
    """``results`` maps a V_A amplification factor to :func:`ablation_trajectory` output."""
    worst = min(r["differenced"] for r in results.values())
    return ProbeReport("forward-ablation", "auc(X_A (U_A(T) - U_A(0)))", worst, f">= {ABLATION_MIN}",
                       worst >= ABLATION_MIN, {str(k): v for k, v in results.items()})


# -- derivatives ------------------------------------------------------------------------


def cosine_sign_recovery(derivs, labels, ref: int | None = None) -> float:
    """Label recovery by clustering derivatives on the sign of their cosine to a reference.

    An instance is put in the reference's cluster when the cosine is positive;
    recovery is the fraction of instances whose cluster agrees with whether
    their label equals the reference's label.
    """
    d = np.asarray(derivs, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if set(np.unique(y)) - {0, 1}:
        raise ValueError("the derivative probe needs a binary task")
    norms = np.linalg.norm(d, axis=1)
    if ref is None:
        nz = np.flatnonzero(norms > 0)
        if not nz.size:
            return 0.5
        ref = int(nz[0])
    same = (d @ d[ref]) > 0
    return float(np.mean(same == (y == y[ref])))


def derivative_report(recoveries: dict[int, float], plaintext_messages: int | None = None) -> ProbeReport:
    """``recoveries`` maps hidden-layer count to recovery rate on the baseline."""
    worst = min(recoveries.values())
    details = {"by_hidden_layers": {str(k): v for k, v in recoveries.items()}}
    ok = worst >= DERIVATIVE_MIN
    if plaintext_messages is not None:
        details["masked_plaintext_gradE_A_messages"] = plaintext_messages
        ok = ok and plaintext_messages == 0
    return ProbeReport("derivative", "label recovery", worst, f">= {DERIVATIVE_MIN}", ok, details)


# -- model shares ------------------------------------------------------------------------


def share_statistics(piece, logical) -> dict:
    piece = np.asarray(piece, dtype=np.float64).ravel()
    logical = np.asarray(logical, dtype=np.float64).ravel()
    gap = np.abs(piece - logical)
    return {
        "coords": int(piece.size),
        "sign_agreement": float(np.mean(np.sign(piece) == np.sign(logical))),
        "gap_min": float(gap.min()),
        "gap_median": float(np.median(gap)),
        "gap_max": float(gap.max()),
        "degenerate": bool(np.all(gap == 0)),
    }


def shares_report(piece, logical) -> ProbeReport:
    st = share_statistics(piece, logical)
    v = st["sign_agreement"]
    ok = _within(v, SHARE_SIGN_BAND) and not st["degenerate"] and st["coords"] >= 1000
    return ProbeReport("shares", "sign agreement", v, f"in {list(SHARE_SIGN_BAND)}", ok, st)


def mask_sweep(logical, factors, gen: np.random.Generator) -> list[dict]:
    """Piece statistics for masks of growing amplitude (one mask direction, rescaled)."""
    w = np.asarray(logical, dtype=np.float64)
    base = gen.uniform(-1.0, 1.0, size=w.shape)
    return [dict(factor=float(f), **share_statistics(w - f * base, w)) for f in factors]
