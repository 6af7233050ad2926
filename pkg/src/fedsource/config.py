"""Protocol parameters that both parties must agree on at connect time."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .paillier import ALLOWED_KEY_BITS


class ConfigMismatchError(Exception):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    """Fixed-point and masking budget.

    ``frac_bits`` (F) fractional bits per fixed-point factor; ``stat_bits``
    (lambda) statistical hiding margin; ``value_bits`` bound on the raw
    magnitude of any logical value that gets masked; ``growth_bits`` headroom
    for random-walk growth of share pieces across updates; ``feature_bits``
    bound on raw feature magnitudes (features are encoded at scale F).
    """

    key_bits: int = 2048
    frac_bits: int = 20
    stat_bits: int = 40
    value_bits: int = 128
    growth_bits: int = 12
    feature_bits: int = 36
    max_inner_log2: int = 20

    def __post_init__(self):
        if self.key_bits not in ALLOWED_KEY_BITS:
            raise ValueError(f"key_bits must be one of {ALLOWED_KEY_BITS}")
        if self.frac_bits <= 0 or self.stat_bits < 0 or self.value_bits <= 0:
            raise ValueError("frac_bits and value_bits must be positive, stat_bits non-negative")
        need = self.worst_case_bits
        if need >= self.key_bits - 2:
            raise ValueError(
                f"masking budget needs {need} plaintext bits but a {self.key_bits}-bit key offers {self.key_bits - 2}"
            )

    @property
    def piece_bits(self) -> int:
        """Bound on share pieces of persistent weights and tables."""
        return self.value_bits + self.stat_bits + self.growth_bits

    @property
    def lookup_share_bits(self) -> int:
        """Bound on embedding-lookup shares (a piece plus a piece-hiding mask)."""
        return self.piece_bits + self.stat_bits + 1

    def mask_bits(self, bound_bits: int) -> int:
        return bound_bits + self.stat_bits

    def product_bits(self, left_bits: int, right_bits: int, inner: int) -> int:
        """Bound on a sum of ``inner`` products of values under the given bounds."""
        return left_bits + right_bits + max(inner - 1, 0).bit_length()

    @property
    def worst_case_bits(self) -> int:
        # stage-2 embed product: lookup share times weight piece, masked, plus two more pieces
        prod = self.lookup_share_bits + self.piece_bits + self.max_inner_log2
        return self.mask_bits(prod) + 3

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProtocolConfig":
        return cls(**json.loads(text))

    def check_compatible(self, other: "ProtocolConfig") -> None:
        if self != other:
            mine, theirs = asdict(self), asdict(other)
            diff = sorted(k for k in mine if mine[k] != theirs[k])
            raise ConfigMismatchError(f"peer configuration differs in {diff}")


TEST_CONFIG = ProtocolConfig(key_bits=512)
