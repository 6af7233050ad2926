"""Timing of the encrypted forward product with dense and CSR kernels."""

from __future__ import annotations

import csv
import gc
import io
import time

import numpy as np
import scipy.sparse as sp

from .config import TEST_CONFIG, ProtocolConfig
from .paillier import keygen
from .rng import DRBG
from .tensor import FxTensor, encrypt_tensor, pc_matmul

SPARSITY_GRID = (0.0, 0.5, 0.9, 0.99)


def _features(batch: int, cols: int, sparsity: float, gen: np.random.Generator) -> sp.csr_matrix:
    mask = gen.random((batch, cols)) >= sparsity
    vals = gen.uniform(-1.0, 1.0, size=(batch, cols)) * mask
    return sp.csr_matrix(vals)


def bench_sparse(
    batch: int = 128,
    cols: int = 1000,
    out: int = 1,
    sparsities=SPARSITY_GRID,
    *,
    config: ProtocolConfig = TEST_CONFIG,
    seed: int = 0,
    repeats: int = 1,
    chunk: int = 8,
) -> list[dict]:
    """Seconds per batch for both kernels at each sparsity.

    The batch is timed in ``chunk``-row pieces; each piece keeps its best of
    ``repeats`` runs and the batch time is the sum over pieces.
    """
    rng = DRBG(seed)
    keys = keygen(config.key_bits, "B", rng.spawn("keys"))
    gen = rng.spawn("features").numpy()
    w = FxTensor.encode(gen.uniform(-0.1, 0.1, size=(cols, out)), 2 * config.frac_bits)
    enc_w = encrypt_tensor(keys.public, w, rng.spawn("weights"), secret=keys.secret)
    rows = []
    for s in sparsities:
        x = FxTensor.encode(_features(batch, cols, s, gen), config.frac_bits)
        xd = x.to_dense()
        # kernels alternate chunk by chunk so drifting host speed hits both alike
        chunks = [list(range(i, min(i + chunk, batch))) for i in range(0, batch, chunk)]
        parts = [(x.take_rows(c), xd.take_rows(c)) for c in chunks]
        best = {"dense": [float("inf")] * len(parts), "csr": [float("inf")] * len(parts)}
        gc.disable()
        try:
            for r in range(repeats):
                for k, (xs, xds) in enumerate(parts):
                    order = (("dense", xds, True), ("csr", xs, False))
                    for name, arg, dense in order if (r + k) % 2 == 0 else order[::-1]:
                        t0 = time.process_time()
                        pc_matmul(arg, enc_w, rng, dense_path=dense)
                        best[name][k] = min(best[name][k], time.process_time() - t0)
        finally:
            gc.enable()
        timings = {name: sum(v) for name, v in best.items()}
        rows.append({
            "sparsity": s,
            "nnz": x.nnz,
            "dense_s": timings["dense"],
            "csr_s": timings["csr"],
            "speedup": timings["dense"] / timings["csr"],
        })
    return rows


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["sparsity", "nnz", "dense_s", "csr_s", "speedup"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
