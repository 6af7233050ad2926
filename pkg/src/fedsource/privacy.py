"""Transcript and state scanning against restricted plaintext quantities.

A policy lists, per party, the quantities that party must never hold in
plaintext.  The scanner looks at everything a party received plus its final
state.  Plain payloads are decoded as integer tensors; cipher payloads are
parsed structurally into their raw residues (never decrypted).  An observed
tensor violates the policy when it equals (or negates) a ground-truth
quantity of the same shape to within one unit at the coarser of the two
scales.

Ground truth comes from the per-party debug traces of an instrumented run,
combined here the way only a test harness could.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import CipherTensor, FxTensor, lkup, lkup_bw, matmul, matmul_t
from .transport import PayloadKind, Trace, Transcript

MATMUL_POLICY = {
    "A": ("Z", "X_B", "XAWA", "XBWB", "gradZ", "gradWA", "W_A", "W_B", "U_B", "V_A"),
    "B": ("X_A", "XAWA", "XBWB", "gradWA", "W_A", "W_B", "U_A", "V_B"),
}

EMBED_POLICY = {
    "A": ("Z", "E_A", "E_B", "EAWA", "EBWB", "gradZ", "gradE_A", "gradE_B", "gradW_A", "gradW_B",
          "gradQ_A", "gradQ_B", "Q_A", "Q_B", "W_A", "W_B"),
    "B": ("E_A", "E_B", "EAWA", "EBWB", "gradE_A", "gradE_B", "gradW_A", "gradQ_A", "gradQ_B",
          "Q_A", "Q_B", "W_A", "W_B"),
}

# with a shared top model B must not see Z or dZ either
SS_EXTRA = {"A": (), "B": ("Z", "gradZ")}


@dataclass(frozen=True)
class Violation:
    party: str
    quantity: str
    source: str

    def __str__(self) -> str:
        return f"{self.party} holds {self.quantity} via {self.source}"


def parse_cipher_payload(payload: bytes) -> FxTensor:
    """Residues of a cipher tensor payload as plain integers (no key needed)."""
    rows, cols, scale, _ = struct.unpack_from(">IIBB", payload, 0)
    off = 10
    vals = []
    for _ in range(rows * cols):
        (ln,) = struct.unpack_from(">I", payload, off)
        off += 4
        vals.append(int.from_bytes(payload[off:off + ln], "big"))
        off += ln
    raw = np.empty((rows, cols), dtype=object)
    if vals:
        raw.ravel()[:] = vals
    return FxTensor(raw, scale)


def observations(transcript: Transcript, state: dict | None = None) -> list[tuple[str, FxTensor]]:
    """Every integer tensor a party received or holds at the end."""
    out: list[tuple[str, FxTensor]] = []
    for e in transcript.received():
        if e.kind == PayloadKind.PLAIN:
            out.append((f"recv:{e.tag}", FxTensor.from_bytes(e.payload)))
        elif e.kind == PayloadKind.CIPHER:
            out.append((f"recv:{e.tag}", parse_cipher_payload(e.payload)))
    for name, value in (state or {}).items():
        if isinstance(value, CipherTensor):
            out.append((f"state:{name}", parse_cipher_payload(value.to_bytes())))
        elif isinstance(value, FxTensor):
            out.append((f"state:{name}", value))
    return out


def _aligned(t: FxTensor, scale: int) -> np.ndarray:
    shift = t.scale - scale
    raw = t.raw
    return raw >> shift if shift else raw


def matches(obs: FxTensor, truth: FxTensor, ulp: int = 1) -> bool:
    """Equal or negated within ``ulp`` at the coarser scale; trivial truths never match."""
    if obs.shape != truth.shape or not obs.shape[0] * obs.shape[1]:
        return False
    s = min(obs.scale, truth.scale)
    g = _aligned(truth, s)
    if all(abs(v) <= ulp for v in g.ravel()):
        return False
    o = _aligned(obs, s)
    d_pos = o - g
    if all(abs(v) <= ulp for v in d_pos.ravel()):
        return True
    d_neg = o + g
    return all(abs(v) <= ulp for v in d_neg.ravel())


def scan(party: str, observed: Iterable[tuple[str, FxTensor]], forbidden: dict[str, list[FxTensor]]) -> list[Violation]:
    by_shape: dict[tuple, list[tuple[str, FxTensor]]] = {}
    for name, values in forbidden.items():
        for v in values:
            by_shape.setdefault(v.shape, []).append((name, v))
    found: list[Violation] = []
    for source, obs in observed:
        for name, truth in by_shape.get(obs.shape, ()):
            if matches(obs, truth):
                found.append(Violation(party, name, source))
                break
    return found


def scan_transcript(transcript: Transcript, policy_names, ground_truth: dict[str, list[FxTensor]], state=None) -> list[Violation]:
    forbidden = {k: ground_truth[k] for k in policy_names if k in ground_truth}
    return scan(transcript.party, observations(transcript, state), forbidden)


# -- ground truth from traces --------------------------------------------------------


def _grads(trace_a: Trace, trace_b: Trace, name: str, shared_grad: bool) -> dict:
    if shared_grad:
        pa, pb = trace_a.by_step(f"{name}.gradpiece"), trace_b.by_step(f"{name}.gradpiece")
        return {t: pa[t] + pb[t] for t in pa if t in pb}
    return trace_b.by_step(f"{name}.grad")


def matmul_ground_truth(trace_a: Trace, trace_b: Trace, name: str, *, shared_grad: bool = False) -> dict[str, list[FxTensor]]:
    """Restricted quantities of every recorded step of a linear layer."""
    a = {k: trace_a.by_step(f"{name}.{k}") for k in ("x", "U", "Vpeer")}
    b = {k: trace_b.by_step(f"{name}.{k}") for k in ("x", "U", "Vpeer")}
    grads = _grads(trace_a, trace_b, name, shared_grad)
    gt: dict[str, list[FxTensor]] = {k: [] for k in set(MATMUL_POLICY["A"]) | set(MATMUL_POLICY["B"])}
    for t in a["x"]:
        xa, ua, vb = a["x"][t], a["U"][t], a["Vpeer"][t]
        xb, ub, va = b["x"][t], b["U"][t], b["Vpeer"][t]
        wa, wb = ua + va, ub + vb
        xawa, xbwb = matmul(xa, wa), matmul(xb, wb)
        for k, v in (("X_A", xa), ("X_B", xb), ("W_A", wa), ("W_B", wb), ("U_A", ua), ("U_B", ub),
                     ("V_A", va), ("V_B", vb), ("XAWA", xawa), ("XBWB", xbwb), ("Z", xawa + xbwb)):
            gt[k].append(v)
        if t in grads:
            gt["gradZ"].append(grads[t])
            gt["gradWA"].append(matmul_t(xa, grads[t]))
    return gt


def _idx(t: FxTensor) -> list[int]:
    return [int(v) for v in t.raw.ravel()]


def embed_ground_truth(trace_a: Trace, trace_b: Trace, name: str, *, shared_grad: bool = False) -> dict[str, list[FxTensor]]:
    """Restricted quantities of every recorded step of an embedding layer."""
    keys = ("idx", "S", "Tpeer", "U", "Vpeer")
    a = {k: trace_a.by_step(f"{name}.{k}") for k in keys}
    b = {k: trace_b.by_step(f"{name}.{k}") for k in keys}
    grads = _grads(trace_a, trace_b, name, shared_grad)
    gt: dict[str, list[FxTensor]] = {k: [] for k in set(EMBED_POLICY["A"]) | set(EMBED_POLICY["B"])}
    for t in a["idx"]:
        qa, qb = a["S"][t] + b["Tpeer"][t], b["S"][t] + a["Tpeer"][t]
        wa, wb = a["U"][t] + b["Vpeer"][t], b["U"][t] + a["Vpeer"][t]
        idx_a, idx_b = _idx(a["idx"][t]), _idx(b["idx"][t])
        ea, eb = lkup(qa, idx_a), lkup(qb, idx_b)
        eawa, ebwb = matmul(ea, wa), matmul(eb, wb)
        for k, v in (("Q_A", qa), ("Q_B", qb), ("W_A", wa), ("W_B", wb), ("E_A", ea), ("E_B", eb),
                     ("EAWA", eawa), ("EBWB", ebwb), ("Z", eawa + ebwb)):
            gt[k].append(v)
        if t in grads:
            d = grads[t]
            gea, geb = matmul(d, wa.T), matmul(d, wb.T)
            gt["gradZ"].append(d)
            gt["gradE_A"].append(gea)
            gt["gradE_B"].append(geb)
            gt["gradW_A"].append(matmul_t(ea, d))
            gt["gradW_B"].append(matmul_t(eb, d))
            gt["gradQ_A"].append(lkup_bw(gea, idx_a, qa.shape[0]))
            gt["gradQ_B"].append(lkup_bw(geb, idx_b, qb.shape[0]))
    return gt


def final_weights_truth(state_a: dict, state_b: dict, kind: str) -> dict[str, list[FxTensor]]:
    """Restored parameters after the last update (for final-state scans)."""
    out = {"W_A": [state_a["U"] + state_b["V_peer"]], "W_B": [state_b["U"] + state_a["V_peer"]]}
    if kind == "embed":
        out["Q_A"] = [state_a["S"] + state_b["T_peer"]]
        out["Q_B"] = [state_b["S"] + state_a["T_peer"]]
    return out


def policy_for(kind: str, party: str, *, shared: bool = False) -> tuple[str, ...]:
    base = MATMUL_POLICY if kind == "matmul" else EMBED_POLICY
    role = "B" if party == "B" else "A"
    names = base[role]
    if shared:
        names = names + tuple(n for n in SS_EXTRA[role] if n not in names)
    return names


# -- alternative inputs with identical outputs ----------------------------------------------


def unimodular(n: int, gen: np.random.Generator, spread: int = 3) -> tuple[FxTensor, FxTensor]:
    """Random integer matrix M with det +-1 and its exact integer inverse (both at scale 0).

    M = P L U with unit-triangular L, U and a signed permutation P, so every
    factor inverts over the integers.  The identity is redrawn, so a witness
    built from M always differs from its source.
    """
    while True:
        m, m_inv = _unimodular_draw(n, gen, spread)
        if any(m[i, j] != (1 if i == j else 0) for i in range(n) for j in range(n)):
            return FxTensor(m, 0), FxTensor(m_inv, 0)


def _unimodular_draw(n: int, gen: np.random.Generator, spread: int):
    lower = np.eye(n, dtype=object)
    upper = np.eye(n, dtype=object)
    for i in range(n):
        for j in range(i):
            lower[i, j] = int(gen.integers(-spread, spread + 1))
            upper[j, i] = int(gen.integers(-spread, spread + 1))
    perm = gen.permutation(n)
    signs = gen.choice([-1, 1], size=n)
    p = np.zeros((n, n), dtype=object)
    for i, j in enumerate(perm):
        p[i, j] = int(signs[i])
    m = p.dot(lower).dot(upper)
    # inverses of unit-triangular factors by substitution
    lower_inv = np.eye(n, dtype=object)
    for i in range(n):
        for j in range(i):
            lower_inv[i, j] = -sum(lower[i, k] * lower_inv[k, j] for k in range(j, i))
    upper_inv = np.eye(n, dtype=object)
    for j in range(n):
        for i in range(j - 1, -1, -1):
            upper_inv[i, j] = -sum(upper[i, k] * upper_inv[k, j] for k in range(i + 1, j + 1))
    return m, upper_inv.dot(lower_inv).dot(p.T)


def linear_witness(x: FxTensor, w: FxTensor, gen: np.random.Generator) -> tuple[FxTensor, FxTensor]:
    """(X M^-1, M W): different features and weights, the same product."""
    m, m_inv = unimodular(x.shape[1], gen)
    return matmul(x.to_dense(), m_inv), matmul(m, w)


def embed_witness(table: FxTensor, idx, w: FxTensor, gen: np.random.Generator):
    """Row-permuted, basis-changed table with re-mapped indices and compensating weights."""
    rows = table.shape[0]
    perm = gen.permutation(rows)
    where = np.empty(rows, dtype=np.int64)
    where[perm] = np.arange(rows)
    m, m_inv = unimodular(table.shape[1], gen)
    new_table = matmul(table.take_rows(perm), m_inv)
    new_idx = [int(where[i]) for i in idx]
    return new_table, new_idx, matmul(m, w)
