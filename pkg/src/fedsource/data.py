"""Datasets: LIBSVM text I/O, vertical feature splits and synthetic generators.

Index base is auto-detected per file: if any feature index is 0 the file is
read as 0-based, otherwise as 1-based (the LIBSVM convention).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DATA_DIR_ENV = "FEDSOURCE_DATA_DIR"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Aligned instances: CSR features, integer labels in 0..K-1, optional categorical fields."""

    X: sp.csr_matrix
    y: np.ndarray
    n_classes: int
    cats: np.ndarray | None = None
    vocab: tuple[int, ...] = ()

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        cats = None if self.cats is None else self.cats[rows]
        return Dataset(self.X[rows], self.y[rows], self.n_classes, cats, self.vocab)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


# -- LIBSVM ------------------------------------------------------------------------


def load_libsvm(path, n_features: int | None = None) -> Dataset:
    """Parse ``label idx:val ...`` lines; labels are remapped to 0..K-1 in sorted order."""
    labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    min_index = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            try:
                labels.append(float(parts[0]))
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad label {parts[0]!r}") from None
            entries = []
            for tok in parts[1:]:
                idx_s, sep, val_s = tok.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: bad feature {tok!r}") from None
                if idx < 0:
                    raise DataFormatError(f"{path}:{lineno}: negative feature index {idx}")
                min_index = idx if min_index is None else min(min_index, idx)
                entries.append((idx, val))
            rows.append(entries)
    base = 0 if min_index == 0 else 1
    indptr, indices, data = [0], [], []
    for entries in rows:
        for idx, val in entries:
            indices.append(idx - base)
            data.append(val)
        indptr.append(len(indices))
    width = (max(indices) + 1) if indices else 0
    if n_features is not None:
        if width > n_features:
            raise DataFormatError(f"{path}: feature index {width - 1 + base} exceeds declared {n_features} features")
        width = n_features
    X = sp.csr_matrix((np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), indptr), shape=(len(rows), width))
    X.eliminate_zeros()
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    return Dataset(X, y.astype(np.int64), max(len(classes), 2))


def save_libsvm(path, X, y, *, one_based: bool = True) -> None:
    X = sp.csr_matrix(X)
    off = 1 if one_based else 0
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(X.shape[0]):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            feats = " ".join(f"{j + off}:{float(v)!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))
            fh.write(f"{int(y[i])} {feats}".rstrip() + "\n")


def find_dataset(name: str) -> Path | None:
    """A LIBSVM file named ``name`` in the data directory, if one exists."""
    root = os.environ.get(DATA_DIR_ENV)
    if not root:
        return None
    p = Path(root) / name
    return p if p.is_file() else None


# -- vertical split ----------------------------------------------------------------


def even_ranges(n_features: int, parts: int = 2) -> list[tuple[int, int]]:
    """Contiguous ranges, earlier parties take the extra column (123 -> 62/61)."""
    if parts < 1 or n_features < parts:
        raise ValueError("need at least one column per party")
    base, extra = divmod(n_features, parts)
    out, lo = [], 0
    for i in range(parts):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def check_ranges(ranges, n_features: int) -> None:
    pos = 0
    for lo, hi in sorted(ranges):
        if lo < pos:
            raise ValueError(f"feature ranges overlap at column {lo}")
        if lo > pos:
            raise ValueError(f"columns {pos}..{lo - 1} belong to no party")
        if hi <= lo:
            raise ValueError(f"empty range ({lo}, {hi})")
        pos = hi
    if pos != n_features:
        raise ValueError(f"columns {pos}..{n_features - 1} belong to no party")


def vsplit(X, ranges) -> list[sp.csr_matrix]:
    X = sp.csr_matrix(X)
    check_ranges(ranges, X.shape[1])
    return [X[:, lo:hi].tocsr() for lo, hi in ranges]


def merge(parts) -> sp.csr_matrix:
    return sp.hstack(parts, format="csr")


# -- synthetic data -----------------------------------------------------------------

ADULT_FIELDS = (5, 8, 16, 7, 15, 6, 5, 2, 3, 6, 2, 3, 4, 41)


def _one_hot(codes: np.ndarray, sizes) -> sp.csr_matrix:
    n = codes.shape[0]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    cols = (codes + offsets).ravel()
    rows = np.repeat(np.arange(n), codes.shape[1])
    return sp.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(n, int(sum(sizes))))


def _labels(gen, logits: np.ndarray) -> np.ndarray:
    return (gen.random(logits.shape) < 1.0 / (1.0 + np.exp(-logits))).astype(np.int64)


def adult_like(n: int, seed: int = 0) -> Dataset:
    """123 one-hot columns in 14 fields (14 nonzeros per row), signal in every field."""
    gen = np.random.default_rng(seed)
    sizes = ADULT_FIELDS
    codes = np.stack([gen.integers(0, k, size=n) for k in sizes], axis=1)
    X = _one_hot(codes, sizes)
    w = gen.normal(0.0, 0.6, size=X.shape[1])
    logits = X @ w
    logits = (logits - logits.mean()) * 1.0 - 1.0
    return Dataset(X, _labels(gen, logits), 2)


def web_like(n: int, n_features: int = 300, density: float = 0.04, seed: int = 0) -> Dataset:
    """Sparse binary features; the label depends mostly on the first half of the columns."""
    gen = np.random.default_rng(seed)
    X = sp.random(n, n_features, density=density, format="csr", random_state=gen, data_rvs=lambda k: np.ones(k))
    half = n_features - n_features // 2
    w = np.concatenate([gen.normal(0.0, 2.0, size=half), gen.normal(0.0, 0.3, size=n_features - half)])
    logits = X @ w
    return Dataset(X, _labels(gen, 1.5 * (logits - np.median(logits))), 2)


def multiclass_like(n: int, n_features: int = 40, n_classes: int = 3, seed: int = 0) -> Dataset:
    gen = np.random.default_rng(seed)
    X = sp.random(n, n_features, density=0.3, format="csr", random_state=gen, data_rvs=lambda k: gen.random(k))
    w = gen.normal(0.0, 2.0, size=(n_features, n_classes))
    logits = np.asarray(X @ w) + gen.gumbel(size=(n, n_classes))
    return Dataset(X, logits.argmax(axis=1).astype(np.int64), n_classes)


def categorical_like(n: int, n_numeric: int = 20, vocab=(20, 20), seed: int = 0) -> Dataset:
    """Sparse numeric columns plus one categorical field per party."""
    gen = np.random.default_rng(seed)
    X = sp.random(n, n_numeric, density=0.2, format="csr", random_state=gen, data_rvs=lambda k: gen.random(k))
    cats = np.stack([gen.integers(0, v, size=n) for v in vocab], axis=1)
    effects = [gen.normal(0.0, 1.5, size=v) for v in vocab]
    logits = np.asarray(X @ gen.normal(0.0, 1.0, size=n_numeric)).ravel()
    logits = logits + sum(e[cats[:, j]] for j, e in enumerate(effects))
    return Dataset(X, _labels(gen, logits - np.median(logits)), 2, cats, tuple(vocab))


def separable_like(n: int, vocab=(30, 30), seed: int = 0) -> Dataset:
    """Binary labels that are a deterministic function of the two categorical fields."""
    gen = np.random.default_rng(seed)
    cats = np.stack([gen.integers(0, v, size=n) for v in vocab], axis=1)
    effects = [gen.normal(0.0, 1.0, size=v) for v in vocab]
    score = sum(e[cats[:, j]] for j, e in enumerate(effects))
    y = (score > np.median(score)).astype(np.int64)
    return Dataset(sp.csr_matrix((n, 0)), y, 2, cats, tuple(vocab))


SYNTHETIC = {
    "a9a": adult_like,
    "w8a": web_like,
    "multiclass": multiclass_like,
    "categorical": categorical_like,
    "separable": separable_like,
}


def load_dataset(name: str, n: int | None = None, seed: int = 0) -> Dataset:
    """A local LIBSVM file if present in the data directory, else the synthetic surrogate."""
    path = find_dataset(name)
    if path is not None:
        ds = load_libsvm(path, 123 if name == "a9a" else 300 if name == "w8a" else None)
        return ds.head(n) if n else ds
    if name not in SYNTHETIC:
        raise KeyError(f"unknown dataset {name!r}; synthetic choices are {sorted(SYNTHETIC)}")
    return SYNTHETIC[name](n or 5000, seed=seed)


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = len(ds) - int(math.floor(len(ds) * test_fraction))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))
