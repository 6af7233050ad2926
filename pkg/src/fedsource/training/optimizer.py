"""Momentum SGD applied independently to each share piece.

The velocity update ``v <- beta*v + g`` is linear, so running it on the two
pieces of a shared weight and restoring gives the logical velocity up to one
truncation unit per piece per step.
"""

from __future__ import annotations

from ..fixedpoint import FixedPointOverflow, ScaleMismatchError, encode_raw
from ..tensor import FxTensor


class FederatedOptimizer:
    """Per-piece momentum state keyed by piece name."""

    def __init__(self, momentum: float = 0.9, frac_bits: int = 20, bound_bits: int | None = None):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.momentum = momentum
        self.frac_bits = frac_bits
        self.beta_raw = encode_raw(momentum, frac_bits)
        self.bound_bits = bound_bits
        self.velocity: dict[str, FxTensor] = {}

    @property
    def beta(self) -> float:
        """The momentum actually applied (quantized to ``frac_bits``)."""
        return self.beta_raw / (1 << self.frac_bits)

    def step(self, key: str, piece: FxTensor, grad: FxTensor) -> FxTensor:
        if piece.scale != grad.scale:
            raise ScaleMismatchError(f"{key}: piece at scale {piece.scale}, gradient at {grad.scale}")
        v = self.velocity.get(key)
        if v is None or self.beta_raw == 0:
            v = grad.to_dense()
        else:
            v = FxTensor(v.raw * self.beta_raw, v.scale + self.frac_bits).truncate(self.frac_bits) + grad.to_dense()
        self.velocity[key] = v
        new = piece - v
        if self.bound_bits is not None and new.max_bits() >= self.bound_bits:
            raise FixedPointOverflow(f"{key}: share piece outgrew {self.bound_bits} bits")
        return new

    def state_dict(self) -> dict:
        return {k: v for k, v in self.velocity.items()}
