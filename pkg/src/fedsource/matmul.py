"""Federated linear source layer over secret-shared weights.

Each logical weight ``W_p`` of party ``p`` is split as ``U_p + V_p``: ``p``
holds ``U_p`` in plaintext, the peer holds ``V_p`` in plaintext, and ``p``
keeps ``[[V_p]]`` under the peer's key so it can multiply its features into
the peer's piece without seeing it.

Scales: features at F, weight pieces at 2F, products at 3F.  Party B applies
the learning rate to dZ and encodes it at F, so gradients land at 2F and no
truncation is ever needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import DRBG
from .tensor import (
    CipherTensor,
    FxTensor,
    OpStats,
    cipher_sub,
    encrypt_tensor,
    matmul,
    matmul_t,
    pc_matmul,
    pc_matmul_t,
)
from .training.optimizer import FederatedOptimizer
from .transforms import he2ss_recv, he2ss_send, ss2he
from .transport import ProtocolError, Session

INITIALIZERS = ("uniform", "zero")
REFRESH_POLICIES = ("auto", "homomorphic", "resend")


def role_of(party: str) -> str:
    return "B" if party == "B" else "A"


def sample_piece(gen: np.random.Generator, shape, fan_in: int, scale: int, initializer: str) -> FxTensor:
    """One party's half of a weight: uniform on +-1/(2 sqrt(fan_in)).

    The two halves are drawn by different parties, so the logical weight is
    their sum (triangular on +-1/sqrt(fan_in)).
    """
    if initializer not in INITIALIZERS:
        raise ValueError(f"unknown initializer {initializer!r}")
    rows, cols = shape
    if initializer == "zero" or rows * cols == 0:
        return FxTensor.zeros(shape, scale)
    bound = 0.5 / math.sqrt(max(fan_in, 1))
    return FxTensor.encode(gen.uniform(-bound, bound, size=(rows, cols)), scale)


def draw_init(rng: DRBG, name: str, own_shape, peer_shape, scale: int, initializer: str) -> tuple[FxTensor, FxTensor]:
    """Own piece first, then the piece this party generates for the peer."""
    gen = rng.spawn(f"{name}.init").numpy()
    own = sample_piece(gen, own_shape, own_shape[0], scale, initializer)
    peer = sample_piece(gen, peer_shape, peer_shape[0], scale, initializer)
    return own, peer


def reference_init(seed_a, seed_b, name: str, in_a: int, in_b: int, out: int, frac_bits: int = 20, initializer: str = "uniform"):
    """Logical (W_A, W_B) as float arrays, recomputed from the party seeds."""
    ua, vb = draw_init(DRBG(seed_a), name, (in_a, out), (in_b, out), 2 * frac_bits, initializer)
    ub, va = draw_init(DRBG(seed_b), name, (in_b, out), (in_a, out), 2 * frac_bits, initializer)
    return (ua + va).decode(), (ub + vb).decode()


def fed_product(
    session: Session,
    x: FxTensor,
    w_plain: FxTensor,
    w_enc: CipherTensor,
    tag: str,
    own_bits: int,
    peer_bits: int,
    stats: OpStats | None = None,
) -> FxTensor:
    """This party's piece of ``x@(w_plain + w_hidden) + peer's mirror product``.

    ``w_enc`` encrypts (under the peer's key) the piece of the weight that the
    peer holds.  The encrypted product is converted to shares; we keep the
    mask and receive the peer's masked remainder.  ``own_bits``/``peer_bits``
    bound the two encrypted products.
    """
    local = matmul(x, w_plain)
    enc = pc_matmul(x, w_enc, session.rng, stats=stats)
    eps, _ = he2ss_send(session, enc, f"{tag}.{session.party}", own_bits)
    d = he2ss_recv(session, f"{tag}.{session.peer}", peer_bits)
    if d.shape != local.shape:
        raise ProtocolError(f"batch misalignment: peer sent {d.shape}, local product is {local.shape}", f"{tag}.{session.peer}")
    return local + eps + d


@dataclass(frozen=True)
class MatMulDims:
    in_a: int
    in_b: int
    out: int


class MatMulLayer:
    """One party's half of the federated linear layer.

    ``session.party`` decides the role: ``"B"`` holds labels and receives Z;
    any ``A*`` label plays the feature-only role.
    """

    kind = "matmul"

    def __init__(
        self,
        session: Session,
        name: str,
        dims: MatMulDims,
        *,
        momentum: float = 0.9,
        initializer: str = "uniform",
        refresh: str = "auto",
        prefix: str = "mm",
        suffix: str = "",
        pieces: tuple[FxTensor, FxTensor] | None = None,
        optimizer: FederatedOptimizer | None = None,
    ):
        if refresh not in REFRESH_POLICIES:
            raise ValueError(f"refresh policy must be one of {REFRESH_POLICIES}")
        self.session = session
        self.name = name
        self.dims = dims
        self.role = role_of(session.party)
        cfg = session.config
        self.F = cfg.frac_bits
        self.wscale = 2 * cfg.frac_bits
        self.prefix = prefix
        self.suffix = suffix
        self.opt = optimizer or FederatedOptimizer(momentum, cfg.frac_bits, cfg.piece_bits)
        if refresh == "auto":
            refresh = "homomorphic" if self.opt.beta_raw == 0 else "resend"
        if refresh == "homomorphic" and self.opt.beta_raw != 0:
            raise ValueError("homomorphic cache refresh is only exact without momentum")
        self.refresh = refresh
        self.iteration = 0
        self.stats = OpStats()
        self._fw = None
        self._ss = False
        self.in_own = dims.in_b if self.role == "B" else dims.in_a
        self.in_peer = dims.in_a if self.role == "B" else dims.in_b
        if pieces is None:
            pieces = draw_init(session.rng, name, (self.in_own, dims.out), (self.in_peer, dims.out), self.wscale, initializer)
        self.U, self.V_peer = pieces
        self.enc_V_own: CipherTensor | None = None

    # -- helpers -------------------------------------------------------------

    def tag(self, step: str) -> str:
        it = "init" if step.startswith("init") else self.iteration
        prefix = self.prefix + ("ss" if self._ss else "")
        return f"{self.name}/{it}/{prefix}.{step}{self.suffix}"

    @property
    def own_product_bits(self) -> int:
        c = self.session.config
        return c.product_bits(c.feature_bits, c.piece_bits, self.in_own)

    @property
    def peer_product_bits(self) -> int:
        c = self.session.config
        return c.product_bits(c.feature_bits, c.piece_bits, self.in_peer)

    @property
    def zpiece_bits(self) -> int:
        """Bound on either party's piece of Z (at scale 3F) in the shared variant."""
        return max(self.own_product_bits, self.peer_product_bits) + self.session.config.stat_bits + 2

    def _encrypt_own(self, t: FxTensor) -> CipherTensor:
        s = self.session
        return encrypt_tensor(s.pk, t, s.rng, secret=s.sk)

    # -- protocol ---------------------------------------------------------------

    def setup(self) -> "MatMulLayer":
        """Exchange encrypted peer pieces (one cipher tensor each way)."""
        s = self.session
        s.send_cipher(self.tag(f"init.encV.{s.party}"), self._encrypt_own(self.V_peer))
        self.enc_V_own = s.recv_cipher(self.tag(f"init.encV.{s.peer}"))
        return self

    def _shares(self, x: FxTensor, u: FxTensor) -> FxTensor:
        if x.shape[1] != self.in_own:
            raise ProtocolError(f"features have {x.shape[1]} columns, layer expects {self.in_own}", self.tag("fw"))
        if x.scale != self.F:
            raise ProtocolError(f"features must be at scale {self.F}", self.tag("fw"))
        s = self.session
        s.trace(f"{self.name}.x", x, self.iteration)
        s.trace(f"{self.name}.U", self.U, self.iteration)
        s.trace(f"{self.name}.Vpeer", self.V_peer, self.iteration)
        self._fw = x
        return fed_product(s, x, u, self.enc_V_own, self.tag("fw.he2ss"), self.own_product_bits, self.peer_product_bits, self.stats)

    def forward(self, x: FxTensor, *, u_override: FxTensor | None = None) -> FxTensor | None:
        """Party B returns Z at scale 3F; party A returns None."""
        self.iteration += 1
        self._ss = False
        s = self.session
        z_piece = self._shares(x, self.U if u_override is None else u_override)
        if self.role == "A":
            s.send_plain(self.tag("fw.zshare"), z_piece)
            return None
        other = s.recv_plain(self.tag("fw.zshare"))
        if other.shape != z_piece.shape:
            raise ProtocolError(f"batch misalignment: {other.shape} vs {z_piece.shape}", self.tag("fw.zshare"))
        return other + z_piece

    def forward_ss(self, x: FxTensor) -> FxTensor:
        """Both parties keep their piece of Z (scale 3F); nothing else is sent."""
        self.iteration += 1
        self._ss = True
        return self._shares(x, self.U)

    def _update(self, key: str, piece: FxTensor, grad: FxTensor) -> FxTensor:
        return self.opt.step(f"{self.name}.{key}", piece, grad)

    def backward(self, grad: FxTensor | None = None, *, enc_grad: CipherTensor | None = None, update_own: bool = True):
        """Apply one SGD step.  B passes ``grad`` = lr * dZ at scale F.

        Returns B's plaintext own-weight gradient (scale 2F) or None at A.
        """
        if self._fw is None:
            raise ProtocolError("backward called before forward", self.tag("bw"))
        s, x = self.session, self._fw
        self._fw = None
        grad_bits = s.config.value_bits
        if self.role == "B":
            if grad is None or grad.scale != self.F:
                raise ProtocolError(f"B needs the scaled gradient at scale {self.F}", self.tag("bw"))
            s.trace(f"{self.name}.grad", grad, self.iteration)
            if enc_grad is None:
                enc_grad = self._encrypt_own(grad)
            s.send_cipher(self.tag("bw.encgrad"), enc_grad)
            piece = he2ss_recv(s, self.tag("bw.he2ss.gradA"), grad_bits)
            self.V_peer = self._update("Vpeer", self.V_peer, piece)
            grad_w = matmul_t(x, grad)
            if update_own:
                self.U = self._update("U", self.U, grad_w)
            if self.refresh == "resend":
                s.send_cipher(self.tag("bw.refresh.V"), self._encrypt_own(self.V_peer))
            return grad_w
        g = s.recv_cipher(self.tag("bw.encgrad"))
        enc_gw = pc_matmul_t(x, g, s.rng, stats=self.stats)
        phi, sent = he2ss_send(s, enc_gw, self.tag("bw.he2ss.gradA"), grad_bits)
        self.U = self._update("U", self.U, phi)
        if self.refresh == "resend":
            self.enc_V_own = s.recv_cipher(self.tag("bw.refresh.V"))
        else:
            self.enc_V_own = cipher_sub(self.enc_V_own, sent)
        return None

    def backward_ss(self, grad_piece: FxTensor) -> None:
        """Backward from a shared gradient (each party holds one piece at F)."""
        if self._fw is None:
            raise ProtocolError("backward called before forward", self.tag("bw"))
        s, x = self.session, self._fw
        self._fw = None
        c = s.config
        if grad_piece.scale != self.F:
            raise ProtocolError(f"gradient pieces must be at scale {self.F}", self.tag("bw"))
        s.trace(f"{self.name}.gradpiece", grad_piece, self.iteration)
        g = ss2he(s, grad_piece, self.tag("bw.ss2he"))
        own_bits = c.value_bits
        enc_gw = pc_matmul_t(x, g, s.rng, stats=self.stats)
        phi, sent = he2ss_send(s, enc_gw, self.tag(f"bw.he2ss.grad.{s.party}"), own_bits)
        piece = he2ss_recv(s, self.tag(f"bw.he2ss.grad.{s.peer}"), own_bits)
        self.U = self._update("U", self.U, phi)
        self.V_peer = self._update("Vpeer", self.V_peer, piece)
        if self.refresh == "resend":
            s.send_cipher(self.tag(f"bw.refresh.V.{s.party}"), self._encrypt_own(self.V_peer))
            self.enc_V_own = s.recv_cipher(self.tag(f"bw.refresh.V.{s.peer}"))
        else:
            self.enc_V_own = cipher_sub(self.enc_V_own, sent)

    # -- state ------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {"U": self.U, "V_peer": self.V_peer, "enc_V_own": self.enc_V_own}

    def load_state_dict(self, state: dict) -> None:
        self.U = state["U"]
        self.V_peer = state["V_peer"]
        self.enc_V_own = state["enc_V_own"]

    def plaintext_state(self) -> dict[str, FxTensor]:
        return {"U": self.U, "V_peer": self.V_peer}
