"""Shared-activation adapters and a minimal secret-shared top model.

With a shared top model the source layers never restore Z at party B: both
parties keep their piece (``forward_ss``) and later receive a piece of the
scaled gradient (``backward_ss``).  :class:`SSTopLinear` is the smallest top
model that closes the loop: a fixed linear map whose weight ``P`` is itself
split between the parties, so B sees the logits and the loss derivative but
never Z or dZ.
"""

from __future__ import annotations

from .matmul import fed_product, role_of, sample_piece
from .tensor import CipherTensor, FxTensor, cp_matmul, encrypt_tensor, matmul
from .transforms import he2ss_recv, he2ss_send
from .transport import ProtocolError, Session


class SSTopLinear:
    """``logits = (Z_A + Z_B) @ (P_A + P_B)`` computed on shares; ``P`` is not trained.

    ``in_bits`` bounds each party's input piece once truncated to scale F; both
    parties must pass the same value.
    """

    def __init__(
        self,
        session: Session,
        name: str,
        in_dim: int,
        out_dim: int,
        *,
        in_bits: int,
        piece: FxTensor | None = None,
        piece_bits: int | None = None,
    ):
        self.session = session
        self.name = name
        self.role = role_of(session.party)
        self.F = session.config.frac_bits
        if piece is None:
            gen = session.rng.spawn(f"{name}.init").numpy()
            piece = sample_piece(gen, (in_dim, out_dim), in_dim, self.F, "uniform")
        if piece.shape != (in_dim, out_dim) or piece.scale != self.F:
            raise ProtocolError(f"top weight piece must be {in_dim}x{out_dim} at scale {self.F}")
        self.P = piece
        self.piece_bits = piece_bits if piece_bits is not None else self.F + 8
        if self.P.max_bits() > self.piece_bits:
            raise ProtocolError(f"top weight piece exceeds the declared {self.piece_bits} bits")
        self.in_bits = in_bits
        self.enc_P_peer: CipherTensor | None = None
        self.iteration = 0
        self._fw = False

    def tag(self, step: str) -> str:
        it = "init" if step.startswith("init") else self.iteration
        return f"{self.name}/{it}/top.{step}"

    def setup(self) -> "SSTopLinear":
        s = self.session
        s.send_cipher(self.tag(f"init.encP.{s.party}"), encrypt_tensor(s.pk, self.P, s.rng, secret=s.sk))
        self.enc_P_peer = s.recv_cipher(self.tag(f"init.encP.{s.peer}"))
        return self

    def forward(self, z_piece: FxTensor) -> FxTensor | None:
        """Take this party's Z piece (any scale >= F); B returns logits at scale 2F."""
        self.iteration += 1
        s, c = self.session, self.session.config
        x = z_piece.truncate(z_piece.scale - self.F)
        s.trace(f"{self.name}.zpiece", x, self.iteration)
        bits = c.product_bits(self.in_bits, self.piece_bits, x.shape[1])
        piece = fed_product(s, x, self.P, self.enc_P_peer, self.tag("fw"), bits, bits)
        self._fw = True
        if self.role == "A":
            s.send_plain(self.tag("fw.logits"), piece)
            return None
        other = s.recv_plain(self.tag("fw.logits"))
        return other + piece

    def backward(self, dlogits: FxTensor | None = None) -> FxTensor:
        """B passes ``lr * dL/dlogits`` at scale F; both get their dZ piece at F."""
        if not self._fw:
            raise ProtocolError("backward called before forward", self.tag("bw"))
        self._fw = False
        s, c = self.session, self.session.config
        if self.role == "B":
            if dlogits is None or dlogits.scale != self.F:
                raise ProtocolError(f"B needs the scaled logit gradient at scale {self.F}", self.tag("bw"))
            s.send_cipher(self.tag("bw.encgrad"), encrypt_tensor(s.pk, dlogits, s.rng, secret=s.sk))
            rest = he2ss_recv(s, self.tag("bw.he2ss"), c.value_bits)
            piece = matmul(dlogits, self.P.T) + rest
        else:
            d = s.recv_cipher(self.tag("bw.encgrad"))
            piece, _ = he2ss_send(s, cp_matmul(d, self.P.T, s.rng), self.tag("bw.he2ss"), c.value_bits)
        return piece.truncate(self.F)


def truncated_bits(layer, top_scale: int) -> int:
    """Bound on a source layer's Z piece after truncation to ``top_scale``."""
    native = 3 * top_scale if layer.kind == "matmul" else 4 * top_scale
    return layer.zpiece_bits - (native - top_scale)

