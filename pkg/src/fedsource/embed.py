"""Federated embedding lookup followed by a linear map, over shared tables.

Party ``p`` owns categorical indices ``idx_p`` into a table ``Q_p = S_p + T_p``
and a weight ``W_p = U_p + V_p``; ``p`` holds ``S_p`` and ``U_p``, the peer
``q`` holds ``T_p`` and ``V_p``.  Each plaintext piece a party holds is
mirrored at the other party, encrypted under the holder's key:

    at p:  S_p, T_q, U_p, V_q  plus  [[T_p]]_q, [[U_q]]_q, [[V_p]]_q

Forward, stage 1: ``p`` gathers its rows from ``[[T_p]]_q`` and converts them
to shares, giving ``psi_p`` (kept) and ``C_p = E_p - psi_p`` (at the peer).
Stage 2 runs two shared products: ``psi_p`` against ``U_p | [[V_p]]`` and
``C_q`` against ``V_q | [[U_q]]``.  Their pieces sum to ``E_A W_A + E_B W_B``.

Scales: tables, weights and lookup shares at 2F, Z at 4F.  Gradients arrive
at 3F; each party floors its own gradient share by F bits before updating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matmul import draw_init, fed_product, role_of
from .rng import DRBG
from .tensor import (
    CipherTensor,
    FxTensor,
    OpStats,
    cipher_add,
    cipher_add_plain,
    cp_matmul,
    encrypt_tensor,
    lkup,
    matmul,
    matmul_t,
    pc_matmul,
    pc_matmul_t,
    row_gather,
    scatter_add_rows,
)
from .training.optimizer import FederatedOptimizer
from .transforms import he2ss_recv, he2ss_send, ss2he
from .transport import ProtocolError, Session


@dataclass(frozen=True)
class EmbedDims:
    vocab_a: int
    vocab_b: int
    dim: int
    out: int


def draw_embed_init(rng: DRBG, name: str, vocab_own: int, vocab_peer: int, dim: int, out: int, scale: int, initializer: str):
    """(S_own, T_peer, U_own, V_peer) in a fixed draw order."""
    s, t = draw_init(rng, f"{name}.table", (vocab_own, dim), (vocab_peer, dim), scale, initializer)
    u, v = draw_init(rng, f"{name}.weight", (dim, out), (dim, out), scale, initializer)
    return s, t, u, v


def reference_embed_init(seed_a, seed_b, name: str, dims: EmbedDims, frac_bits: int = 20, initializer: str = "uniform"):
    """Logical (Q_A, Q_B, W_A, W_B) as float arrays from the party seeds."""
    sc = 2 * frac_bits
    sa, tb, ua, vb = draw_embed_init(DRBG(seed_a), name, dims.vocab_a, dims.vocab_b, dims.dim, dims.out, sc, initializer)
    sb, ta, ub, va = draw_embed_init(DRBG(seed_b), name, dims.vocab_b, dims.vocab_a, dims.dim, dims.out, sc, initializer)
    return (sa + ta).decode(), (sb + tb).decode(), (ua + va).decode(), (ub + vb).decode()


class EmbedMatMulLayer:
    """One party's half of the federated embedding + linear layer (one field)."""

    kind = "embed"

    def __init__(
        self,
        session: Session,
        name: str,
        dims: EmbedDims,
        *,
        momentum: float = 0.9,
        initializer: str = "uniform",
        optimizer: FederatedOptimizer | None = None,
    ):
        self.session = session
        self.name = name
        self.dims = dims
        self.role = role_of(session.party)
        cfg = session.config
        self.F = cfg.frac_bits
        self.scale = 2 * cfg.frac_bits
        self.opt = optimizer or FederatedOptimizer(momentum, cfg.frac_bits, cfg.piece_bits)
        self.vocab_own = dims.vocab_b if self.role == "B" else dims.vocab_a
        self.vocab_peer = dims.vocab_a if self.role == "B" else dims.vocab_b
        self.S, self.T_peer, self.U, self.V_peer = draw_embed_init(
            session.rng, name, self.vocab_own, self.vocab_peer, dims.dim, dims.out, self.scale, initializer
        )
        self.enc_T_own: CipherTensor | None = None
        self.enc_U_peer: CipherTensor | None = None
        self.enc_V_own: CipherTensor | None = None
        self.iteration = 0
        self.stats = OpStats()
        self._fw = None
        self._ss = False

    def tag(self, step: str) -> str:
        it = "init" if step.startswith("init") else self.iteration
        prefix = "emss" if self._ss else "em"
        return f"{self.name}/{it}/{prefix}.{step}"

    def _enc(self, t: FxTensor) -> CipherTensor:
        s = self.session
        return encrypt_tensor(s.pk, t, s.rng, secret=s.sk)

    @property
    def product_bits(self) -> int:
        c = self.session.config
        return c.product_bits(c.lookup_share_bits, c.piece_bits, self.dims.dim)

    @property
    def zpiece_bits(self) -> int:
        """Bound on either party's piece of Z (at scale 4F) in the shared variant."""
        return self.product_bits + self.session.config.stat_bits + 3

    def _send_caches(self, step: str) -> None:
        s = self.session
        s.send_cipher(self.tag(f"{step}.T.{s.party}"), self._enc(self.T_peer))
        s.send_cipher(self.tag(f"{step}.U.{s.party}"), self._enc(self.U))
        s.send_cipher(self.tag(f"{step}.V.{s.party}"), self._enc(self.V_peer))

    def _recv_caches(self, step: str) -> None:
        s = self.session
        self.enc_T_own = s.recv_cipher(self.tag(f"{step}.T.{s.peer}"))
        self.enc_U_peer = s.recv_cipher(self.tag(f"{step}.U.{s.peer}"))
        self.enc_V_own = s.recv_cipher(self.tag(f"{step}.V.{s.peer}"))

    def setup(self) -> "EmbedMatMulLayer":
        self._send_caches("init.enc")
        self._recv_caches("init.enc")
        return self

    # -- forward -----------------------------------------------------------------

    def _shares(self, idx) -> FxTensor:
        s, c = self.session, self.session.config
        idx = [int(i) for i in idx]
        for pos, i in enumerate(idx):
            if not 0 <= i < self.vocab_own:
                raise ProtocolError(f"index {i} at position {pos} outside vocabulary of {self.vocab_own}", self.tag("fw"))
        s.trace(f"{self.name}.idx", FxTensor(np.array(idx, dtype=object).reshape(-1, 1), 0), self.iteration)
        for key, val in (("S", self.S), ("Tpeer", self.T_peer), ("U", self.U), ("Vpeer", self.V_peer)):
            s.trace(f"{self.name}.{key}", val, self.iteration)
        gathered = row_gather(self.enc_T_own, idx)
        mu, _ = he2ss_send(s, gathered, self.tag(f"fw.lkup.he2ss.{s.party}"), c.piece_bits)
        psi = lkup(self.S, idx) + mu
        c_peer = he2ss_recv(s, self.tag(f"fw.lkup.he2ss.{s.peer}"), c.piece_bits)
        if c_peer.shape[0] != psi.shape[0]:
            raise ProtocolError(f"batch misalignment: {c_peer.shape[0]} vs {psi.shape[0]}", self.tag("fw.lkup"))
        bits = self.product_bits
        z1 = fed_product(s, psi, self.U, self.enc_V_own, self.tag("fw.mm1"), bits, bits, self.stats)
        z2 = fed_product(s, c_peer, self.V_peer, self.enc_U_peer, self.tag("fw.mm2"), bits, bits, self.stats)
        self._fw = (idx, psi, c_peer)
        return z1 + z2

    def forward(self, idx) -> FxTensor | None:
        """Party B returns Z at scale 4F; party A returns None."""
        self.iteration += 1
        self._ss = False
        s = self.session
        piece = self._shares(idx)
        if self.role == "A":
            s.send_plain(self.tag("fw.zshare"), piece)
            return None
        other = s.recv_plain(self.tag("fw.zshare"))
        if other.shape != piece.shape:
            raise ProtocolError(f"batch misalignment: {other.shape} vs {piece.shape}", self.tag("fw.zshare"))
        return other + piece

    def forward_ss(self, idx) -> FxTensor:
        """Both parties keep their piece of Z (scale 4F)."""
        self.iteration += 1
        self._ss = True
        return self._shares(idx)

    # -- backward ----------------------------------------------------------------

    def _step(self, key: str, piece: FxTensor, grad_share: FxTensor) -> FxTensor:
        return self.opt.step(f"{self.name}.{key}", piece, grad_share.truncate(self.F))

    def _take_context(self):
        if self._fw is None:
            raise ProtocolError("backward called before forward", self.tag("bw"))
        ctx, self._fw = self._fw, None
        return ctx

    def backward(self, grad: FxTensor | None = None) -> None:
        """One SGD step.  B passes ``grad`` = lr * dZ at scale F."""
        idx, psi, c_peer = self._take_context()
        s, c = self.session, self.session.config
        vb = c.value_bits
        if self.role == "B":
            if grad is None or grad.scale != self.F:
                raise ProtocolError(f"B needs the scaled gradient at scale {self.F}", self.tag("bw"))
            s.trace(f"{self.name}.grad", grad, self.iteration)
            s.send_cipher(self.tag("bw.encgrad"), self._enc(grad))
            s.send_cipher(self.tag("bw.w.CtG"), self._enc(matmul_t(c_peer, grad)))
            s.send_cipher(self.tag("bw.w.psiG"), self._enc(matmul_t(psi, grad)))
            s.send_cipher(self.tag("bw.q.gVt"), self._enc(matmul(grad, self.V_peer.T)))
            # own table gradient, computed under A's key with pre-update weights
            enc_e = cipher_add_plain(pc_matmul(grad, self.enc_V_own.T, s.rng, stats=self.stats), matmul(grad, self.U.T))
            rho_b, _ = he2ss_send(s, scatter_add_rows(enc_e, idx, self.vocab_own, s.rng), self.tag("bw.q.he2ss.B"), vb)
            gw_a = he2ss_recv(s, self.tag("bw.w.he2ss.gradA"), vb)
            gw_b = he2ss_recv(s, self.tag("bw.w.he2ss.gradB"), vb)
            gq_a = he2ss_recv(s, self.tag("bw.q.he2ss.A"), vb)
            self.V_peer = self._step("Vpeer", self.V_peer, gw_a)
            self.U = self._step("U", self.U, gw_b)
            self.T_peer = self._step("Tpeer", self.T_peer, gq_a)
            self.S = self._step("S", self.S, rho_b)
        else:
            g = s.recv_cipher(self.tag("bw.encgrad"))
            ctg = s.recv_cipher(self.tag("bw.w.CtG"))
            psig = s.recv_cipher(self.tag("bw.w.psiG"))
            gvt = s.recv_cipher(self.tag("bw.q.gVt"))
            enc_gw_a = cipher_add(pc_matmul_t(psi, g, s.rng, stats=self.stats), ctg)
            enc_gw_b = cipher_add(pc_matmul_t(c_peer, g, s.rng, stats=self.stats), psig)
            phi, _ = he2ss_send(s, enc_gw_a, self.tag("bw.w.he2ss.gradA"), vb)
            xi, _ = he2ss_send(s, enc_gw_b, self.tag("bw.w.he2ss.gradB"), vb)
            enc_e = cipher_add(cp_matmul(g, self.U.T, s.rng, stats=self.stats), gvt)
            rho_a, _ = he2ss_send(s, scatter_add_rows(enc_e, idx, self.vocab_own, s.rng), self.tag("bw.q.he2ss.A"), vb)
            gq_b = he2ss_recv(s, self.tag("bw.q.he2ss.B"), vb)
            self.U = self._step("U", self.U, phi)
            self.V_peer = self._step("Vpeer", self.V_peer, xi)
            self.S = self._step("S", self.S, rho_a)
            self.T_peer = self._step("Tpeer", self.T_peer, gq_b)
        self._refresh()

    def _refresh(self) -> None:
        if self.role == "A":
            self._send_caches("bw.refresh")
            self._recv_caches("bw.refresh")
        else:
            self._recv_caches("bw.refresh")
            self._send_caches("bw.refresh")

    def backward_ss(self, grad_piece: FxTensor) -> None:
        """Backward from a shared gradient; the flow is symmetric in the parties."""
        idx, psi, c_peer = self._take_context()
        s, c = self.session, self.session.config
        vb = c.value_bits
        if grad_piece.scale != self.F:
            raise ProtocolError(f"gradient pieces must be at scale {self.F}", self.tag("bw"))
        s.trace(f"{self.name}.gradpiece", grad_piece, self.iteration)
        me, peer = s.party, s.peer
        g = ss2he(s, grad_piece, self.tag("bw.ss2he"))
        # what the peer needs to finish the gradients of *its* parameters
        s.send_cipher(self.tag(f"bw.w.C.{me}"), self._enc(c_peer))
        s.send_cipher(self.tag(f"bw.w.CtG.{me}"), self._enc(matmul_t(c_peer, grad_piece)))
        s.send_cipher(self.tag(f"bw.q.gVt.{me}"), self._enc(matmul(grad_piece, self.V_peer.T)))
        enc_c_own = s.recv_cipher(self.tag(f"bw.w.C.{peer}"))
        ctg = s.recv_cipher(self.tag(f"bw.w.CtG.{peer}"))
        gvt = s.recv_cipher(self.tag(f"bw.q.gVt.{peer}"))
        enc_gw = cipher_add(
            cipher_add(pc_matmul_t(psi, g, s.rng, stats=self.stats), cp_matmul(enc_c_own.T, grad_piece, s.rng, stats=self.stats)),
            ctg,
        )
        enc_e = cipher_add(
            cipher_add(cp_matmul(g, self.U.T, s.rng, stats=self.stats), gvt),
            pc_matmul(grad_piece, self.enc_V_own.T, s.rng, stats=self.stats),
        )
        phi, _ = he2ss_send(s, enc_gw, self.tag(f"bw.w.he2ss.{me}"), vb)
        rho, _ = he2ss_send(s, scatter_add_rows(enc_e, idx, self.vocab_own, s.rng), self.tag(f"bw.q.he2ss.{me}"), vb)
        gw_peer = he2ss_recv(s, self.tag(f"bw.w.he2ss.{peer}"), vb)
        gq_peer = he2ss_recv(s, self.tag(f"bw.q.he2ss.{peer}"), vb)
        self.U = self._step("U", self.U, phi)
        self.S = self._step("S", self.S, rho)
        self.V_peer = self._step("Vpeer", self.V_peer, gw_peer)
        self.T_peer = self._step("Tpeer", self.T_peer, gq_peer)
        self._refresh()

    # -- state ------------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "S": self.S, "T_peer": self.T_peer, "U": self.U, "V_peer": self.V_peer,
            "enc_T_own": self.enc_T_own, "enc_U_peer": self.enc_U_peer, "enc_V_own": self.enc_V_own,
        }

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            setattr(self, k, v)

    def plaintext_state(self) -> dict[str, FxTensor]:
        return {"S": self.S, "T_peer": self.T_peer, "U": self.U, "V_peer": self.V_peer}
