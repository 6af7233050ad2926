"""Fixed-point encoding and integer-domain additive secret sharing.

A real ``x`` is carried as the signed integer ``round(x * 2**scale)``.  Shares
live over the integers: a secret ``v`` is the exact sum of two pieces, one of
which is a bounded uniform mask wide enough (``stat_bits`` beyond the value
bound) to hide ``v`` statistically.  Nothing is reduced modulo anything, so
masks cancel exactly and pieces can be decrypted under either party's key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .rng import DRBG

DEFAULT_FRAC_BITS = 20
DEFAULT_STAT_BITS = 40
DEFAULT_VALUE_BITS = 128


class FixedPointOverflow(OverflowError):
    pass


class ScaleMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FxScalar:
    raw: int
    scale: int

    def decode(self) -> float:
        return decode(self)


@dataclass(frozen=True)
class SharePiece:
    raw: int
    scale: int
    owner: str


def encode_raw(x: float, scale: int) -> int:
    """Round-to-nearest integer of ``x * 2**scale`` (ties toward +inf)."""
    if not math.isfinite(x):
        raise FixedPointOverflow(f"cannot encode non-finite value {x!r}")
    return math.floor(math.ldexp(x, scale) + 0.5)


def encode(x: float, f_bits: int = DEFAULT_FRAC_BITS, value_bits: int = DEFAULT_VALUE_BITS) -> FxScalar:
    raw = encode_raw(x, f_bits)
    if raw.bit_length() >= value_bits:
        raise FixedPointOverflow(f"|{x}| * 2**{f_bits} does not fit in {value_bits} bits")
    return FxScalar(raw=raw, scale=f_bits)


def decode(v: FxScalar | SharePiece) -> float:
    return v.raw / (1 << v.scale)


def sample_mask(rng: DRBG, value_bits: int = DEFAULT_VALUE_BITS, stat_bits: int = DEFAULT_STAT_BITS) -> int:
    """One mask uniform on [-2**(value_bits+stat_bits), 2**(value_bits+stat_bits)]."""
    return rng.uniform_signed(value_bits + stat_bits, 1)[0]


def share(
    v: FxScalar,
    rng: DRBG,
    *,
    dealer: str = "A",
    value_bits: int = DEFAULT_VALUE_BITS,
    stat_bits: int = DEFAULT_STAT_BITS,
) -> tuple[SharePiece, SharePiece]:
    """Split ``v`` into (piece@A, piece@B); the dealer keeps the mask."""
    if v.raw.bit_length() >= value_bits:
        raise FixedPointOverflow(f"secret exceeds the {value_bits}-bit value bound")
    other = "B" if dealer == "A" else "A"
    m = sample_mask(rng, value_bits, stat_bits)
    kept = SharePiece(raw=m, scale=v.scale, owner=dealer)
    sent = SharePiece(raw=v.raw - m, scale=v.scale, owner=other)
    return (kept, sent) if dealer == "A" else (sent, kept)


def restore(pa: SharePiece, pb: SharePiece) -> FxScalar:
    if pa.scale != pb.scale:
        raise ScaleMismatchError(f"cannot restore pieces at scales {pa.scale} and {pb.scale}")
    return FxScalar(raw=pa.raw + pb.raw, scale=pa.scale)


def truncate_piece(p: SharePiece, by_bits: int) -> SharePiece:
    """Arithmetic shift right (floor toward -inf), lowering the scale.

    Truncating the two pieces independently and restoring differs from
    truncating the secret by at most one unit at the new scale.
    """
    if by_bits < 0 or by_bits > p.scale:
        raise ScaleMismatchError(f"cannot drop {by_bits} bits from scale {p.scale}")
    return SharePiece(raw=p.raw >> by_bits, scale=p.scale - by_bits, owner=p.owner)
