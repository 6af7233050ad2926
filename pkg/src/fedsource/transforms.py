"""Conversions between encrypted values and additive share pairs.

``he2ss``: the party holding ``[[v]]`` under the peer's key keeps a fresh mask
``phi`` and sends ``[[v - phi]]``; the key owner decrypts its piece.

``ss2he``: each party encrypts its own piece under its own key and sends it;
the receiver adds its piece homomorphically and ends with ``[[v]]`` under the
peer's key.

Only ciphertexts cross the channel in either direction.
"""

from __future__ import annotations

import numpy as np

from .tensor import CipherTensor, FxTensor, cipher_add_plain, decrypt_tensor, encrypt_tensor, rerandomize
from .transport import ProtocolError, Session


class ShareOverflowError(ProtocolError):
    """A decrypted share exceeded its declared bound (an upstream range bug)."""


def sample_mask_tensor(session: Session, shape, scale: int, value_bits: int) -> FxTensor:
    bits = value_bits + session.config.stat_bits
    rows, cols = shape
    vals = session.rng.uniform_signed(bits, rows * cols)
    raw = np.empty((rows, cols), dtype=object)
    if vals:
        raw.ravel()[:] = vals
    return FxTensor(raw, scale)


def he2ss_send(session: Session, ct: CipherTensor, tag: str, value_bits: int) -> tuple[FxTensor, CipherTensor]:
    """Mask-and-send half.  Returns the kept mask and the ciphertext that was sent."""
    if ct.owner != session.peer:
        raise ProtocolError(f"he2ss needs a ciphertext under the peer's key, got {ct.owner}", tag)
    phi = sample_mask_tensor(session, ct.shape, ct.scale, value_bits)
    masked = rerandomize(cipher_add_plain(ct, -phi), session.rng)
    session.send_cipher(tag, masked)
    return phi, masked


def he2ss_recv(session: Session, tag: str, value_bits: int) -> FxTensor:
    """Key-owner half: decrypt the masked piece and check its declared bound."""
    ct = session.recv_cipher(tag, owner=session.party)
    piece = decrypt_tensor(session.sk, ct)
    limit = value_bits + session.config.stat_bits + 1
    if piece.max_bits() > limit:
        raise ShareOverflowError(f"decrypted share has {piece.max_bits()} bits, bound is {limit}", tag)
    return piece


def ss2he_send(session: Session, piece: FxTensor, tag: str) -> None:
    session.send_cipher(tag, encrypt_tensor(session.pk, piece, session.rng, secret=session.sk))


def ss2he_recv(session: Session, piece: FxTensor, tag: str) -> CipherTensor:
    """Receive ``[[peer piece]]`` under the peer's key and add our own piece."""
    ct = session.recv_cipher(tag)
    if ct.shape != piece.shape or ct.scale != piece.scale:
        raise ProtocolError(f"ss2he piece {piece.shape}@{piece.scale} vs cipher {ct.shape}@{ct.scale}", tag)
    return cipher_add_plain(ct, piece)


def ss2he(session: Session, piece: FxTensor, tag: str) -> CipherTensor:
    """Both directions at once; returns ``[[v]]`` under the peer's key."""
    ss2he_send(session, piece, f"{tag}.{session.party}")
    return ss2he_recv(session, piece, f"{tag}.{session.peer}")
