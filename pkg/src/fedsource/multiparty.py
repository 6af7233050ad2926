"""The federated linear layer with several feature-only parties.

Party B is the hub of a star: it runs the two-party protocol once per
feature party ``A(i)``, each time with a slice of its own piece ``U_B``
(``U_B // M`` per slice, the remainder folded into the first slice so the
slices sum to ``U_B`` exactly).  ``W_B = U_B + sum_i V_B(i)``, where ``V_B(i)``
is held by ``A(i)``.  The scaled gradient is encrypted once and sent to every
feature party; refreshed ``[[V_A(i)]]`` caches are re-encrypted and sent back.
"""

from __future__ import annotations

import numpy as np

from .matmul import MatMulDims, MatMulLayer, sample_piece
from .tensor import FxTensor, encrypt_tensor
from .training.optimizer import FederatedOptimizer
from .transport import ProtocolError, Session

PREFIX = "mp.mm"


def member_label(i: int) -> str:
    """Party label of feature party ``i`` (1-based); party 1 is plain ``A``."""
    return "A" if i == 1 else f"A{i}"


def member_layer(session: Session, name: str, index: int, in_a: int, in_b: int, out: int, **kwargs) -> MatMulLayer:
    """The feature-party side of pair ``index``; an ordinary two-party layer."""
    kwargs.setdefault("refresh", "resend")
    return MatMulLayer(session, name, MatMulDims(in_a, in_b, out), prefix=PREFIX, suffix=f".{index}", **kwargs)


def split_piece(u: FxTensor, m: int) -> list[FxTensor]:
    base = FxTensor(u.raw // m if u.raw.size else u.raw, u.scale)
    first = u - FxTensor(base.raw * (m - 1), u.scale)
    return [first] + [base] * (m - 1)


class MultiPartyHub:
    """Party B's side: one two-party layer per feature party, sharing ``U_B``."""

    def __init__(
        self,
        sessions: list[Session],
        name: str,
        in_b: int,
        in_as: list[int],
        out: int,
        *,
        momentum: float = 0.9,
        initializer: str = "uniform",
        refresh: str = "resend",
    ):
        if not sessions or len(sessions) != len(in_as):
            raise ValueError("one session and one input width per feature party")
        for s in sessions:
            if s.party != "B":
                raise ValueError("the hub runs as party B")
        self.sessions = sessions
        self.name = name
        self.M = len(sessions)
        s0 = sessions[0]
        cfg = s0.config
        scale = 2 * cfg.frac_bits
        gen = s0.rng.spawn(f"{name}.init").numpy()
        self.U = sample_piece(gen, (in_b, out), in_b, scale, initializer)
        v_pieces = [sample_piece(gen, (ia, out), ia, scale, initializer) for ia in in_as]
        self.opt = FederatedOptimizer(momentum, cfg.frac_bits, cfg.piece_bits)
        self.layers = [
            MatMulLayer(
                s, name, MatMulDims(ia, in_b, out), momentum=momentum, refresh=refresh,
                prefix=PREFIX, suffix=f".{i + 1}", pieces=(self.U, v),
            )
            for i, (s, ia, v) in enumerate(zip(sessions, in_as, v_pieces))
        ]

    def setup(self) -> "MultiPartyHub":
        for layer in self.layers:
            layer.setup()
        return self

    def forward(self, x_b: FxTensor) -> FxTensor:
        z = None
        for layer, piece in zip(self.layers, split_piece(self.U, self.M)):
            layer.U = piece
            zi = layer.forward(x_b, u_override=piece)
            z = zi if z is None else z + zi
        return z

    def backward(self, grad: FxTensor) -> None:
        s0 = self.sessions[0]
        if grad.scale != s0.config.frac_bits:
            raise ProtocolError("scaled gradient must be at scale F", f"{self.name}/bw")
        enc_g = encrypt_tensor(s0.pk, grad, s0.rng, secret=s0.sk)
        grad_w = None
        for layer in self.layers:
            grad_w = layer.backward(grad, enc_grad=enc_g, update_own=False)
        self.U = self.opt.step(f"{self.name}.U", self.U, grad_w)
        for layer in self.layers:
            layer.U = self.U

    def v_pieces(self) -> list[FxTensor]:
        """The hub's pieces ``V_A(i)`` of each feature party's weight."""
        return [layer.V_peer for layer in self.layers]


def restore_weights(hub: MultiPartyHub, members: list[MatMulLayer]) -> tuple[list[np.ndarray], np.ndarray]:
    """Test-harness helper: logical (W_A(i) list, W_B) as float arrays."""
    w_as = [(m.U + v).decode() for m, v in zip(members, hub.v_pieces())]
    w_b = hub.U
    for m in members:
        w_b = w_b + m.V_peer
    return w_as, w_b.decode()
