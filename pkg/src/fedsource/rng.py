"""Seedable deterministic random bit generator.

Every party owns one :class:`DRBG`.  Sub-streams are derived by label with
:meth:`DRBG.spawn`, so two runs with the same party seeds consume identical
randomness at every protocol step regardless of thread scheduling.  Without a
seed the generator is keyed from ``os.urandom``.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np


class DRBG:
    """SHAKE-256 keyed counter-mode generator."""

    def __init__(self, seed: int | bytes | str | None = None, *, _key: bytes | None = None):
        if _key is not None:
            self._key = _key
        elif seed is None:
            self._key = os.urandom(32)
        else:
            if isinstance(seed, int):
                seed = seed.to_bytes((seed.bit_length() + 8) // 8 or 1, "big", signed=True)
            elif isinstance(seed, str):
                seed = seed.encode()
            self._key = hashlib.sha256(b"fedsource.drbg" + seed).digest()
        self._counter = 0

    def spawn(self, label: str) -> "DRBG":
        """Independent child stream; does not advance this stream."""
        return DRBG(_key=hashlib.sha256(self._key + b"/" + label.encode()).digest())

    def randbytes(self, n: int) -> bytes:
        block = self._key + self._counter.to_bytes(8, "big")
        self._counter += 1
        return hashlib.shake_256(block).digest(n)

    def randbits(self, k: int) -> int:
        if k <= 0:
            return 0
        nbytes = (k + 7) // 8
        return int.from_bytes(self.randbytes(nbytes), "big") >> (8 * nbytes - k)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs a positive bound")
        k = n.bit_length()
        while True:
            r = self.randbits(k)
            if r < n:
                return r

    def uniform_signed(self, bits: int, count: int) -> list[int]:
        """``count`` integers uniform on the closed interval [-2**bits, 2**bits]."""
        width = (1 << (bits + 1)) + 1
        k = width.bit_length()
        nbytes = (k + 7) // 8
        out: list[int] = []
        shift = 8 * nbytes - k
        offset = 1 << bits
        while len(out) < count:
            need = count - len(out)
            # one extra draw per value absorbs most rejections
            buf = self.randbytes(nbytes * (need + need // 2 + 1))
            for i in range(0, len(buf), nbytes):
                r = int.from_bytes(buf[i:i + nbytes], "big") >> shift
                if r < width:
                    out.append(r - offset)
                    if len(out) == count:
                        break
        return out

    def numpy(self) -> np.random.Generator:
        """A numpy generator seeded from this stream (for float-valued work)."""
        return np.random.default_rng(int.from_bytes(self.randbytes(16), "big"))
