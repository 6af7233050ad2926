"""Fixed-point plaintext tensors and their Paillier-encrypted counterparts.

:class:`FxTensor` is a 2-D matrix of signed Python integers with a scale
exponent, stored dense (numpy object array) or CSR.  :class:`CipherTensor` is
always dense: an encrypted matrix must not reveal where its zeros are.  Only
plaintext operands exploit sparsity, which is where the sparse speedup of
``pc_matmul`` comes from.

All homomorphic kernels preserve exact integer semantics: decrypting the
output equals the corresponding plaintext operation on raw integers.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Sequence

import gmpy2
import numpy as np

from .fixedpoint import FixedPointOverflow, ScaleMismatchError, encode_raw
from .paillier import (
    KeyMismatchError,
    MalformedCiphertextError,
    PlaintextRangeError,
    PublicKey,
    SecretKey,
    party_code,
    party_label,
)
from .rng import DRBG


class ShapeMismatchError(ValueError):
    pass


def _object_matrix(rows: int, cols: int, fill=0) -> np.ndarray:
    out = np.empty((rows, cols), dtype=object)
    out.fill(fill)
    return out


def _as_object(a) -> np.ndarray:
    arr = np.asarray(a, dtype=object)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, 0)
    if arr.ndim != 2:
        raise ShapeMismatchError("tensors are 2-D")
    # normalise numpy / gmpy2 scalars to Python ints
    flat = [int(v) for v in arr.ravel()]
    out = np.empty(arr.shape, dtype=object)
    out.ravel()[:] = flat if flat else []
    return out


class FxTensor:
    """Fixed-point integer matrix, dense or CSR."""

    __slots__ = ("shape", "scale", "_dense", "_csr")

    def __init__(self, raw, scale: int):
        self._dense = _as_object(raw)
        self.shape = tuple(self._dense.shape)
        self.scale = int(scale)
        self._csr = None

    # -- constructors -----------------------------------------------------

    @classmethod
    def sparse(cls, indptr, indices, data, shape, scale: int) -> "FxTensor":
        t = cls.__new__(cls)
        t.shape = (int(shape[0]), int(shape[1]))
        t.scale = int(scale)
        t._dense = None
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        vals = [int(v) for v in data]
        if len(indptr) != t.shape[0] + 1 or indptr[0] != 0 or indptr[-1] != len(indices) or len(vals) != len(indices):
            raise ShapeMismatchError("inconsistent CSR arrays")
        keep = [i for i, v in enumerate(vals) if v != 0]
        if len(keep) != len(vals):
            # drop explicit zeros
            counts = np.zeros(t.shape[0], dtype=np.int64)
            rows = np.repeat(np.arange(t.shape[0]), np.diff(indptr))
            rows = rows[keep]
            np.add.at(counts, rows, 1)
            indptr = np.concatenate([[0], np.cumsum(counts)])
            indices = indices[keep]
            vals = [vals[i] for i in keep]
        for r in range(t.shape[0]):
            seg = indices[indptr[r]:indptr[r + 1]]
            if len(seg) and (np.any(np.diff(seg) <= 0) or seg[0] < 0 or seg[-1] >= t.shape[1]):
                raise ShapeMismatchError(f"CSR column indices of row {r} not strictly increasing/in range")
        data_arr = np.empty(len(vals), dtype=object)
        data_arr[:] = vals
        t._csr = (indptr, indices, data_arr)
        return t

    @classmethod
    def zeros(cls, shape, scale: int) -> "FxTensor":
        return cls(_object_matrix(shape[0], shape[1]), scale)

    @classmethod
    def encode(cls, x, scale: int, *, bound_bits: int | None = None) -> "FxTensor":
        """Round-to-nearest encoding of a float matrix (numpy or scipy.sparse)."""
        if hasattr(x, "tocsr"):
            m = x.tocsr()
            m.sort_indices()
            data = [encode_raw(float(v), scale) for v in m.data]
            t = cls.sparse(m.indptr, m.indices, data, m.shape, scale)
        else:
            arr = np.asarray(x, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(-1, 1)
            if not np.all(np.isfinite(arr)):
                raise FixedPointOverflow("cannot encode non-finite values")
            rounded = np.floor(np.ldexp(arr, scale) + 0.5)
            t = cls(np.vectorize(int, otypes=[object])(rounded) if rounded.size else _object_matrix(*arr.shape), scale)
        if bound_bits is not None and t.max_bits() >= bound_bits:
            raise FixedPointOverflow(f"encoded magnitude exceeds {bound_bits} bits")
        return t

    # -- views ------------------------------------------------------------

    @property
    def is_sparse(self) -> bool:
        return self._dense is None

    @property
    def raw(self) -> np.ndarray:
        if self._dense is None:
            indptr, indices, data = self._csr
            d = _object_matrix(*self.shape)
            for r in range(self.shape[0]):
                for p in range(indptr[r], indptr[r + 1]):
                    d[r, indices[p]] = data[p]
            self._dense = d
        return self._dense

    @property
    def csr(self):
        if self._csr is None:
            d = self._dense
            indptr = [0]
            indices: list[int] = []
            data: list[int] = []
            for r in range(self.shape[0]):
                for c in range(self.shape[1]):
                    v = d[r, c]
                    if v != 0:
                        indices.append(c)
                        data.append(v)
                indptr.append(len(indices))
            arr = np.empty(len(data), dtype=object)
            arr[:] = data
            self._csr = (np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64), arr)
        return self._csr

    @property
    def nnz(self) -> int:
        return len(self.csr[2])

    def to_dense(self) -> "FxTensor":
        return FxTensor(self.raw, self.scale)

    def to_sparse(self) -> "FxTensor":
        indptr, indices, data = self.csr
        return FxTensor.sparse(indptr, indices, data, self.shape, self.scale)

    def iter_nonzero(self) -> Iterable[tuple[int, int, int]]:
        indptr, indices, data = self.csr
        for r in range(self.shape[0]):
            for p in range(indptr[r], indptr[r + 1]):
                yield r, int(indices[p]), data[p]

    def decode(self) -> np.ndarray:
        div = 1 << self.scale
        out = np.zeros(self.shape, dtype=np.float64)
        if self.is_sparse:
            for r, c, v in self.iter_nonzero():
                out[r, c] = v / div
        else:
            for (r, c), v in np.ndenumerate(self._dense):
                out[r, c] = v / div
        return out

    @property
    def T(self) -> "FxTensor":
        if self.is_sparse:
            rows, cols = self.shape
            entries = sorted((c, r, v) for r, c, v in self.iter_nonzero())
            counts = np.zeros(cols, dtype=np.int64)
            for c, _, _ in entries:
                counts[c] += 1
            indptr = np.concatenate([[0], np.cumsum(counts)])
            return FxTensor.sparse(indptr, [e[1] for e in entries], [e[2] for e in entries], (cols, rows), self.scale)
        return FxTensor(self._dense.T.copy(), self.scale)

    def take_rows(self, idx: Sequence[int]) -> "FxTensor":
        idx = [int(i) for i in idx]
        if self.is_sparse:
            indptr, indices, data = self._csr
            new_ptr = [0]
            new_idx: list[int] = []
            new_data: list[int] = []
            for r in idx:
                new_idx.extend(indices[indptr[r]:indptr[r + 1]].tolist())
                new_data.extend(data[indptr[r]:indptr[r + 1]].tolist())
                new_ptr.append(len(new_idx))
            return FxTensor.sparse(new_ptr, new_idx, new_data, (len(idx), self.shape[1]), self.scale)
        return FxTensor(self._dense[idx, :], self.scale)

    def take_cols(self, start: int, stop: int) -> "FxTensor":
        if self.is_sparse:
            indptr, indices, data = self.csr
            new_ptr = [0]
            new_idx: list[int] = []
            new_data: list[int] = []
            for r in range(self.shape[0]):
                for p in range(indptr[r], indptr[r + 1]):
                    c = indices[p]
                    if start <= c < stop:
                        new_idx.append(int(c) - start)
                        new_data.append(data[p])
                new_ptr.append(len(new_idx))
            return FxTensor.sparse(new_ptr, new_idx, new_data, (self.shape[0], stop - start), self.scale)
        return FxTensor(self._dense[:, start:stop], self.scale)

    # -- arithmetic ---------------------------------------------------------

    def _check_same(self, other: "FxTensor") -> None:
        if self.shape != other.shape:
            raise ShapeMismatchError(f"shape {self.shape} vs {other.shape}")
        if self.scale != other.scale:
            raise ScaleMismatchError(f"scale {self.scale} vs {other.scale}")

    def __add__(self, other: "FxTensor") -> "FxTensor":
        self._check_same(other)
        return FxTensor(self.raw + other.raw, self.scale)

    def __sub__(self, other: "FxTensor") -> "FxTensor":
        self._check_same(other)
        return FxTensor(self.raw - other.raw, self.scale)

    def __neg__(self) -> "FxTensor":
        return FxTensor(-self.raw, self.scale)

    def truncate(self, by_bits: int) -> "FxTensor":
        """Floor-shift every entry right by ``by_bits``, lowering the scale."""
        if by_bits < 0 or by_bits > self.scale:
            raise ScaleMismatchError(f"cannot drop {by_bits} bits from scale {self.scale}")
        return FxTensor(self.raw >> by_bits if self.raw.size else self.raw, self.scale - by_bits)

    def upscale(self, by_bits: int) -> "FxTensor":
        return FxTensor(self.raw * (1 << by_bits) if self.raw.size else self.raw, self.scale + by_bits)

    def max_bits(self) -> int:
        vals = self.csr[2] if self.is_sparse else self._dense.ravel()
        return max((abs(int(v)).bit_length() for v in vals), default=0)

    def row_l1_bits(self) -> int:
        """Bit length of the largest row L1 norm."""
        best = 0
        if self.is_sparse:
            indptr, _, data = self._csr
            for r in range(self.shape[0]):
                best = max(best, sum(abs(v) for v in data[indptr[r]:indptr[r + 1]]))
        else:
            for r in range(self.shape[0]):
                best = max(best, sum(abs(v) for v in self._dense[r]))
        return int(best).bit_length()

    def equals(self, other: "FxTensor") -> bool:
        return self.shape == other.shape and self.scale == other.scale and bool(np.all(self.raw == other.raw))

    def __eq__(self, other):  # exact raw equality, storage-agnostic
        return isinstance(other, FxTensor) and self.equals(other)

    __hash__ = None

    def __repr__(self) -> str:
        kind = "csr" if self.is_sparse else "dense"
        return f"FxTensor(shape={self.shape}, scale={self.scale}, {kind})"

    # -- wire form ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        rows, cols = self.shape
        parts = [struct.pack(">IIB", rows, cols, self.scale)]
        for v in self.raw.ravel():
            v = int(v)
            b = v.to_bytes((v.bit_length() + 8) // 8, "big", signed=True) if v else b""
            parts.append(struct.pack(">I", len(b)))
            parts.append(b)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FxTensor":
        if len(buf) < 9:
            raise ValueError("truncated plaintext tensor")
        rows, cols, scale = struct.unpack_from(">IIB", buf, 0)
        off = 9
        vals = []
        for _ in range(rows * cols):
            (ln,) = struct.unpack_from(">I", buf, off)
            off += 4
            vals.append(int.from_bytes(buf[off:off + ln], "big", signed=True) if ln else 0)
            off += ln
        if off != len(buf):
            raise ValueError("trailing bytes after plaintext tensor")
        raw = _object_matrix(rows, cols)
        if vals:
            raw.ravel()[:] = vals
        return cls(raw, scale)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# plaintext oracle arithmetic
# ---------------------------------------------------------------------------


def matmul(x: FxTensor, y: FxTensor) -> FxTensor:
    if x.shape[1] != y.shape[0]:
        raise ShapeMismatchError(f"matmul {x.shape} @ {y.shape}")
    rows, cols = x.shape[0], y.shape[1]
    if x.is_sparse:
        out = _object_matrix(rows, cols)
        yr = y.raw
        indptr, indices, data = x.csr
        for r in range(rows):
            acc = out[r]
            for p in range(indptr[r], indptr[r + 1]):
                acc += data[p] * yr[indices[p]]
        return FxTensor(out, x.scale + y.scale)
    if x.shape[1] == 0:
        return FxTensor.zeros((rows, cols), x.scale + y.scale)
    return FxTensor(x.raw.dot(y.raw), x.scale + y.scale)


def matmul_t(x: FxTensor, y: FxTensor) -> FxTensor:
    """``x.T @ y`` iterating the nonzeros of ``x`` once."""
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatchError(f"matmul_t {x.shape}^T @ {y.shape}")
    out = _object_matrix(x.shape[1], y.shape[1])
    yr = y.raw
    for r, c, v in x.iter_nonzero():
        out[c] += v * yr[r]
    return FxTensor(out, x.scale + y.scale)


def _check_indices(idx: Sequence[int], rows: int) -> list[int]:
    out = [int(i) for i in idx]
    for pos, i in enumerate(out):
        if not 0 <= i < rows:
            raise IndexError(f"index {i} at position {pos} outside table of {rows} rows")
    return out


def lkup(table: FxTensor, idx: Sequence[int]) -> FxTensor:
    """Embedding lookup: row ``i`` of the output is ``table[idx[i]]``."""
    idx = _check_indices(idx, table.shape[0])
    return FxTensor(table.raw[idx, :] if idx else _object_matrix(0, table.shape[1]), table.scale)


def lkup_bw(grads: FxTensor, idx: Sequence[int], rows: int) -> FxTensor:
    """Embedding backward: row ``r`` sums the gradient rows whose index is ``r``."""
    idx = _check_indices(idx, rows)
    if len(idx) != grads.shape[0]:
        raise ShapeMismatchError("one index per gradient row")
    out = _object_matrix(rows, grads.shape[1])
    g = grads.raw
    for pos, r in enumerate(idx):
        out[r] += g[pos]
    return FxTensor(out, grads.scale)


def scale_by(x: FxTensor, k: int, k_scale: int) -> FxTensor:
    return FxTensor(x.raw * int(k), x.scale + k_scale)


# ---------------------------------------------------------------------------
# ciphertext tensors
# ---------------------------------------------------------------------------


class CipherTensor:
    """Dense matrix of Paillier ciphertexts under one party's key."""

    __slots__ = ("data", "shape", "scale", "pk")

    def __init__(self, data: np.ndarray, scale: int, pk: PublicKey):
        if data.ndim != 2:
            raise ShapeMismatchError("cipher tensors are 2-D")
        self.data = data
        self.shape = tuple(data.shape)
        self.scale = int(scale)
        self.pk = pk

    @property
    def owner(self) -> str:
        return self.pk.owner

    @property
    def T(self) -> "CipherTensor":
        return CipherTensor(self.data.T.copy(), self.scale, self.pk)

    def take_rows(self, idx: Sequence[int]) -> "CipherTensor":
        return CipherTensor(self.data[list(idx), :], self.scale, self.pk)

    def to_bytes(self) -> bytes:
        rows, cols = self.shape
        parts = [struct.pack(">IIBB", rows, cols, self.scale, party_code(self.owner))]
        for v in self.data.ravel():
            b = int(v).to_bytes((int(v).bit_length() + 7) // 8, "big")
            parts.append(struct.pack(">I", len(b)))
            parts.append(b)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, pk: PublicKey) -> "CipherTensor":
        if len(buf) < 10:
            raise MalformedCiphertextError("truncated cipher tensor")
        rows, cols, scale, code = struct.unpack_from(">IIBB", buf, 0)
        if party_label(code) != pk.owner:
            raise KeyMismatchError(f"cipher tensor under key {party_label(code)}, expected {pk.owner}")
        off = 10
        data = _object_matrix(rows, cols, None)
        flat = data.ravel()
        n2 = pk.nsquare
        for i in range(rows * cols):
            (ln,) = struct.unpack_from(">I", buf, off)
            off += 4
            v = gmpy2.mpz(int.from_bytes(buf[off:off + ln], "big"))
            off += ln
            if not 0 < v < n2:
                raise MalformedCiphertextError(f"ciphertext {i} outside Z_(n^2)")
            flat[i] = v
        if off != len(buf):
            raise MalformedCiphertextError("trailing bytes after cipher tensor")
        return cls(data, scale, pk)

    def __repr__(self) -> str:
        return f"CipherTensor(shape={self.shape}, scale={self.scale}, owner={self.owner})"


class OpStats:
    """Counts homomorphic scalar multiplications (modular exponentiations)."""

    def __init__(self):
        self.hom_mul = 0


def _fresh_zero(pk: PublicKey, rng: DRBG | None, secret: SecretKey | None = None):
    rng = rng or DRBG()
    return secret.obfuscator(rng) if secret is not None else pk.obfuscator(rng)


def encrypt_tensor(pk: PublicKey, t: FxTensor, rng: DRBG, *, secret: SecretKey | None = None) -> CipherTensor:
    """Element-wise encryption (zeros included); ``secret`` enables the owner fast path."""
    raw = t.raw
    bad = [(r, c) for (r, c), v in np.ndenumerate(raw) if abs(v) > pk.max_plain]
    if bad:
        raise PlaintextRangeError(f"{len(bad)} element(s) outside the plaintext range; first at index {bad[0]}")
    out = _object_matrix(*t.shape, None)
    n2 = pk.nsquare
    for (r, c), v in np.ndenumerate(raw):
        out[r, c] = pk.encode_plain(v) * _fresh_zero(pk, rng, secret) % n2
    return CipherTensor(out, t.scale, pk)


def decrypt_tensor(sk: SecretKey, ct: CipherTensor) -> FxTensor:
    if ct.owner != sk.owner:
        raise KeyMismatchError(f"cipher tensor under key {ct.owner} cannot be decrypted by party {sk.owner}")
    raw = _object_matrix(*ct.shape)
    n2 = sk.public.nsquare
    for (r, c), v in np.ndenumerate(ct.data):
        if not 0 < v < n2:
            raise MalformedCiphertextError(f"ciphertext at {(r, c)} outside Z_(n^2)")
        raw[r, c] = sk.raw_decrypt(v)
    return FxTensor(raw, ct.scale)


def _fill_untouched(out: np.ndarray, pk: PublicKey, rng: DRBG | None) -> None:
    flat = out.ravel()
    for i in range(flat.size):
        if flat[i] is None:
            flat[i] = _fresh_zero(pk, rng)


class _Products:
    """Per-output running products of ``c**v`` terms.

    Terms with negative exponents are collected apart and inverted once per
    output entry; a negative exponent costs gmpy2 a modular inverse per call.
    """

    def __init__(self, rows: int, cols: int, n2):
        self.n2 = n2
        self.pos = [[None] * cols for _ in range(rows)]
        self.neg = [[None] * cols for _ in range(rows)]

    def add_row(self, i: int, cs, v) -> None:
        """Multiply ``cs[j]**v`` into every output of row ``i``."""
        n2 = self.n2
        if v < 0:
            acc, v = self.neg[i], -v
        else:
            acc = self.pos[i]
        for j, c in enumerate(cs):
            term = c if v == 1 else gmpy2.powmod(c, v, n2)
            cur = acc[j]
            acc[j] = term if cur is None else cur * term % n2

    def add(self, i: int, j: int, c, v) -> None:
        n2 = self.n2
        if v < 0:
            acc, v = self.neg[i], -v
        else:
            acc = self.pos[i]
        term = c if v == 1 else gmpy2.powmod(c, v, n2)
        cur = acc[j]
        acc[j] = term if cur is None else cur * term % n2

    def finish(self, pk: PublicKey, rng: DRBG | None) -> np.ndarray:
        n2 = self.n2
        out = _object_matrix(len(self.pos), len(self.pos[0]) if self.pos else 0, None)
        for i, (prow, nrow) in enumerate(zip(self.pos, self.neg)):
            for j, (a, b) in enumerate(zip(prow, nrow)):
                if b is not None:
                    b = gmpy2.invert(b, n2)
                    a = b if a is None else a * b % n2
                out[i, j] = a
        _fill_untouched(out, pk, rng)
        return out


def pc_matmul(
    x: FxTensor,
    w: CipherTensor,
    rng: DRBG | None = None,
    *,
    dense_path: bool = False,
    stats: OpStats | None = None,
) -> CipherTensor:
    """``[[X @ W]] = prod_k [[W_kj]]**X_ik`` for plaintext X and encrypted W.

    The CSR path touches only nonzeros of X (cost nnz(X) * cols(W));
    ``dense_path`` walks every entry.  Output entries that receive no term are
    fresh encryptions of zero.
    """
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"pc_matmul {x.shape} @ {w.shape}")
    rows, cols = x.shape[0], w.shape[1]
    # both kernels iterate plain lists so they differ only in the entries they visit
    W = w.data.tolist()
    acc = _Products(rows, cols, w.pk.nsquare)
    count = 0
    if dense_path:
        for i, xrow in enumerate(x.raw.tolist()):
            if not any(xrow):
                continue
            for k, v in enumerate(xrow):
                acc.add_row(i, W[k], v)
            count += len(xrow) * cols
    else:
        indptr, indices, data = (a.tolist() for a in x.csr)
        for i in range(rows):
            for p in range(indptr[i], indptr[i + 1]):
                acc.add_row(i, W[indices[p]], data[p])
            count += (indptr[i + 1] - indptr[i]) * cols
    if stats is not None:
        stats.hom_mul += count
    return CipherTensor(acc.finish(w.pk, rng), x.scale + w.scale, w.pk)


def pc_matmul_t(x: FxTensor, g: CipherTensor, rng: DRBG | None = None, *, stats: OpStats | None = None) -> CipherTensor:
    """``[[X.T @ G]]`` iterating the nonzeros of X once."""
    if x.shape[0] != g.shape[0]:
        raise ShapeMismatchError(f"pc_matmul_t {x.shape}^T @ {g.shape}")
    cols = g.shape[1]
    G = g.data.tolist()
    acc = _Products(x.shape[1], cols, g.pk.nsquare)
    count = 0
    for r, c, v in x.iter_nonzero():
        acc.add_row(c, G[r], v)
        count += cols
    if stats is not None:
        stats.hom_mul += count
    return CipherTensor(acc.finish(g.pk, rng), x.scale + g.scale, g.pk)


def cp_matmul(c: CipherTensor, p: FxTensor, rng: DRBG | None = None, *, stats: OpStats | None = None) -> CipherTensor:
    """``[[C @ P]]`` for encrypted C and plaintext P."""
    if c.shape[1] != p.shape[0]:
        raise ShapeMismatchError(f"cp_matmul {c.shape} @ {p.shape}")
    rows, cols = c.shape[0], p.shape[1]
    C = c.data.tolist()
    acc = _Products(rows, cols, c.pk.nsquare)
    nz = list(p.iter_nonzero())
    for i in range(rows):
        ci = C[i]
        for k, j, v in nz:
            acc.add(i, j, ci[k], v)
    if stats is not None:
        stats.hom_mul += rows * len(nz)
    return CipherTensor(acc.finish(c.pk, rng), c.scale + p.scale, c.pk)


def _check_cipher_pair(a: CipherTensor, b: CipherTensor) -> None:
    if a.owner != b.owner:
        raise KeyMismatchError(f"cipher tensors under keys {a.owner} and {b.owner}")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape {a.shape} vs {b.shape}")
    if a.scale != b.scale:
        raise ScaleMismatchError(f"scale {a.scale} vs {b.scale}")


def cipher_add(a: CipherTensor, b: CipherTensor) -> CipherTensor:
    _check_cipher_pair(a, b)
    n2 = a.pk.nsquare
    out = _object_matrix(*a.shape, None)
    A, B = a.data, b.data
    for idx in np.ndindex(*a.shape):
        out[idx] = A[idx] * B[idx] % n2
    return CipherTensor(out, a.scale, a.pk)


def cipher_neg(a: CipherTensor) -> CipherTensor:
    out = _object_matrix(*a.shape, None)
    n2 = a.pk.nsquare
    for idx in np.ndindex(*a.shape):
        out[idx] = gmpy2.invert(a.data[idx], n2)
    return CipherTensor(out, a.scale, a.pk)


def cipher_sub(a: CipherTensor, b: CipherTensor) -> CipherTensor:
    return cipher_add(a, cipher_neg(b))


def cipher_add_plain(a: CipherTensor, p: FxTensor) -> CipherTensor:
    """Add a plaintext tensor (no re-randomisation; callers mask before sending)."""
    if a.shape != p.shape:
        raise ShapeMismatchError(f"shape {a.shape} vs {p.shape}")
    if a.scale != p.scale:
        raise ScaleMismatchError(f"scale {a.scale} vs {p.scale}")
    pk = a.pk
    raw = p.raw
    bad = [idx for idx, v in np.ndenumerate(raw) if abs(v) > pk.max_plain]
    if bad:
        raise PlaintextRangeError(f"{len(bad)} element(s) outside the plaintext range; first at index {bad[0]}")
    out = _object_matrix(*a.shape, None)
    n2 = pk.nsquare
    for idx in np.ndindex(*a.shape):
        v = raw[idx]
        out[idx] = a.data[idx] if v == 0 else a.data[idx] * pk.encode_plain(v) % n2
    return CipherTensor(out, a.scale, pk)


def cipher_scale(a: CipherTensor, k: int, k_scale: int) -> CipherTensor:
    out = _object_matrix(*a.shape, None)
    n2 = a.pk.nsquare
    for idx in np.ndindex(*a.shape):
        out[idx] = gmpy2.powmod(a.data[idx], int(k), n2)
    return CipherTensor(out, a.scale + k_scale, a.pk)


def rerandomize(a: CipherTensor, rng: DRBG, *, secret: SecretKey | None = None) -> CipherTensor:
    out = _object_matrix(*a.shape, None)
    n2 = a.pk.nsquare
    for idx in np.ndindex(*a.shape):
        out[idx] = a.data[idx] * _fresh_zero(a.pk, rng, secret) % n2
    return CipherTensor(out, a.scale, a.pk)


def row_gather(table: CipherTensor, idx: Sequence[int], *, rerandomize_rows: bool = False, rng: DRBG | None = None) -> CipherTensor:
    """Encrypted lookup: output row ``i`` is (a copy of) ``table[idx[i]]``."""
    idx = _check_indices(idx, table.shape[0])
    out = CipherTensor(table.data[idx, :] if idx else _object_matrix(0, table.shape[1], None), table.scale, table.pk)
    if rerandomize_rows:
        out = rerandomize(out, rng or DRBG())
    return out


def scatter_add_rows(grads: CipherTensor, idx: Sequence[int], table_rows: int, rng: DRBG | None = None) -> CipherTensor:
    """Encrypted lookup backward; untouched rows are fresh encryptions of zero."""
    idx = _check_indices(idx, table_rows)
    if len(idx) != grads.shape[0]:
        raise ShapeMismatchError("one index per gradient row")
    cols = grads.shape[1]
    n2 = grads.pk.nsquare
    out = _object_matrix(table_rows, cols, None)
    for pos, r in enumerate(idx):
        acc = out[r]
        g = grads.data[pos]
        for j in range(cols):
            acc[j] = g[j] if acc[j] is None else acc[j] * g[j] % n2
    _fill_untouched(out, grads.pk, rng)
    return CipherTensor(out, grads.scale, grads.pk)


def plain_parse(ct: CipherTensor) -> FxTensor:
    """Reinterpret ciphertext residues as raw integers (for leak scanning only)."""
    raw = _object_matrix(*ct.shape)
    for idx in np.ndindex(*ct.shape):
        raw[idx] = int(ct.data[idx])
    return FxTensor(raw, ct.scale)
