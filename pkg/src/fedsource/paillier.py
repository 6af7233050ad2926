"""Paillier additive homomorphic encryption with signed (centered) plaintexts.

The generator is fixed to ``g = n + 1`` so that ``g**m = 1 + m*n (mod n**2)``
and encryption costs a single modular exponentiation (the ``r**n``
obfuscator).  Plaintexts are signed integers ``v`` with ``|v| < n // 2``;
decryption maps the residue back into that centered range.

Every key and ciphertext carries the label of the party that owns the secret
key.  Mixing ciphertexts of different owners, or decrypting with another
party's key, raises :class:`KeyMismatchError` instead of returning garbage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property

import gmpy2

from .rng import DRBG

ALLOWED_KEY_BITS = (512, 1024, 2048)
DEFAULT_KEY_BITS = 2048


class PaillierError(Exception):
    pass


class KeyMismatchError(PaillierError):
    """A ciphertext was used with a key belonging to another party."""


class MalformedCiphertextError(PaillierError):
    pass


class PlaintextRangeError(PaillierError, ValueError):
    pass


def party_code(label: str) -> int:
    """One-byte wire code of a party label: B=0, A=1, A<i>=i."""
    if label == "B":
        return 0
    if label == "A":
        return 1
    if label.startswith("A") and label[1:].isdigit():
        i = int(label[1:])
        if 1 <= i <= 254:
            return i
    raise ValueError(f"bad party label {label!r}")


def party_label(code: int) -> str:
    if code == 0:
        return "B"
    if code == 1:
        return "A"
    if 2 <= code <= 254:
        return f"A{code}"
    raise ValueError(f"bad party code {code}")


def _pack_int(value: int) -> bytes:
    raw = int(value).to_bytes((int(value).bit_length() + 7) // 8, "big")
    return struct.pack(">I", len(raw)) + raw


def _unpack_int(buf: bytes, offset: int) -> tuple[int, int]:
    (length,) = struct.unpack_from(">I", buf, offset)
    start = offset + 4
    end = start + length
    if end > len(buf):
        raise MalformedCiphertextError("truncated integer field")
    return int.from_bytes(buf[start:end], "big"), end


@dataclass(frozen=True)
class PublicKey:
    n: int
    owner: str

    @cached_property
    def nsquare(self):
        return gmpy2.mpz(self.n) * self.n

    @property
    def g(self) -> int:
        return self.n + 1

    @property
    def max_plain(self) -> int:
        """Largest admissible magnitude (exclusive bound is ``n // 2``)."""
        return self.n // 2 - 1

    @property
    def plain_bits(self) -> int:
        return self.max_plain.bit_length()

    def check_plain(self, v: int) -> None:
        if abs(v) > self.max_plain:
            raise PlaintextRangeError(f"|plaintext| must be < n//2 ({self.n.bit_length()}-bit key)")

    def random_r(self, rng: DRBG):
        while True:
            r = rng.randbelow(self.n)
            if r > 1 and gmpy2.gcd(r, self.n) == 1:
                return gmpy2.mpz(r)

    def obfuscator(self, rng: DRBG):
        return gmpy2.powmod(self.random_r(rng), self.n, self.nsquare)

    def encode_plain(self, v: int):
        """``g**v mod n**2`` for the signed plaintext ``v`` (no randomness)."""
        return (1 + (gmpy2.mpz(v) % self.n) * self.n) % self.nsquare

    def to_bytes(self) -> bytes:
        return struct.pack(">B", party_code(self.owner)) + _pack_int(self.n)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PublicKey":
        if len(buf) < 5:
            raise MalformedCiphertextError("truncated public key")
        owner = party_label(buf[0])
        n, end = _unpack_int(buf, 1)
        if end != len(buf):
            raise MalformedCiphertextError("trailing bytes after public key")
        return cls(n=n, owner=owner)


@dataclass(frozen=True)
class SecretKey:
    p: int
    q: int
    public: PublicKey = field(repr=False)

    @property
    def owner(self) -> str:
        return self.public.owner

    @cached_property
    def _lam(self):
        return gmpy2.lcm(self.p - 1, self.q - 1)

    @cached_property
    def _mu(self):
        n = self.public.n
        x = gmpy2.powmod(self.public.g, self._lam, self.public.nsquare)
        return gmpy2.invert((x - 1) // n, n)

    @cached_property
    def _crt(self):
        p, q = gmpy2.mpz(self.p), gmpy2.mpz(self.q)
        p2, q2 = p * p, q * q
        g = self.public.g
        hp = gmpy2.invert((gmpy2.powmod(g, p - 1, p2) - 1) // p, p)
        hq = gmpy2.invert((gmpy2.powmod(g, q - 1, q2) - 1) // q, q)
        q_inv_p = gmpy2.invert(q, p)
        # r**n mod p**2 only needs n mod phi(p**2)
        n = gmpy2.mpz(self.public.n)
        en_p = n % (p * (p - 1))
        en_q = n % (q * (q - 1))
        q2_inv_p2 = gmpy2.invert(q2, p2)
        return p, q, p2, q2, hp, hq, q_inv_p, en_p, en_q, q2_inv_p2

    def _check(self, c: "Ciphertext") -> int:
        if c.owner != self.owner:
            raise KeyMismatchError(f"ciphertext under key {c.owner} cannot be decrypted by party {self.owner}")
        v = c.value
        if not 0 < v < self.public.nsquare:
            raise MalformedCiphertextError("ciphertext outside Z_{n^2}")
        return v

    def raw_decrypt(self, value, *, crt: bool = True) -> int:
        """Decrypt a bare residue to its centered plaintext."""
        n = self.public.n
        if crt:
            p, q, p2, q2, hp, hq, q_inv_p, *_ = self._crt
            mp = (gmpy2.powmod(value, p - 1, p2) - 1) // p * hp % p
            mq = (gmpy2.powmod(value, q - 1, q2) - 1) // q * hq % q
            m = mq + ((mp - mq) * q_inv_p % p) * q
        else:
            x = gmpy2.powmod(value, self._lam, self.public.nsquare)
            m = (x - 1) // n * self._mu % n
        m = int(m)
        return m if m <= n // 2 else m - n

    def decrypt(self, c: "Ciphertext", *, crt: bool = True) -> int:
        return self.raw_decrypt(self._check(c), crt=crt)

    def obfuscator(self, rng: DRBG):
        """``r**n mod n**2`` computed through the factorisation (owner-only fast path)."""
        r = self.public.random_r(rng)
        p, q, p2, q2, _, _, _, en_p, en_q, q2_inv_p2 = self._crt
        xp = gmpy2.powmod(r, en_p, p2)
        xq = gmpy2.powmod(r, en_q, q2)
        return xq + ((xp - xq) * q2_inv_p2 % p2) * q2


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    secret: SecretKey

    @property
    def owner(self) -> str:
        return self.public.owner


@dataclass(frozen=True)
class Ciphertext:
    value: int
    owner: str

    def to_bytes(self) -> bytes:
        return struct.pack(">B", party_code(self.owner)) + _pack_int(self.value)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Ciphertext":
        if len(buf) < 5:
            raise MalformedCiphertextError("truncated ciphertext")
        owner = party_label(buf[0])
        value, end = _unpack_int(buf, 1)
        if end != len(buf):
            raise MalformedCiphertextError("trailing bytes after ciphertext")
        return cls(value=value, owner=owner)


def _prime(bits: int, rng: DRBG):
    while True:
        cand = rng.randbits(bits) | (3 << (bits - 2)) | 1
        p = gmpy2.next_prime(cand)
        if p.bit_length() == bits:
            return p


def keygen(bits: int = DEFAULT_KEY_BITS, owner: str = "A", rng: DRBG | None = None) -> KeyPair:
    """Generate a Paillier key pair for ``owner``.

    Raises ``ValueError`` for key sizes other than 512, 1024 or 2048 bits.
    """
    if bits not in ALLOWED_KEY_BITS:
        raise ValueError(f"key size must be one of {ALLOWED_KEY_BITS}, got {bits}")
    party_code(owner)
    rng = rng or DRBG()
    half = bits // 2
    while True:
        p = _prime(half, rng)
        q = _prime(half, rng)
        if p != q and (p * q).bit_length() == bits:
            break
    pk = PublicKey(n=int(p * q), owner=owner)
    return KeyPair(public=pk, secret=SecretKey(p=int(p), q=int(q), public=pk))


def encrypt(pk: PublicKey, v: int, rng: DRBG | None = None, *, secret: SecretKey | None = None) -> Ciphertext:
    """Probabilistic encryption of the signed integer ``v``.

    Passing the matching ``secret`` key only speeds up the obfuscator; the
    ciphertext distribution is unchanged.
    """
    pk.check_plain(v)
    rng = rng or DRBG()
    obf = secret.obfuscator(rng) if secret is not None else pk.obfuscator(rng)
    return Ciphertext(value=int(pk.encode_plain(v) * obf % pk.nsquare), owner=pk.owner)


def decrypt(sk: SecretKey, c: Ciphertext) -> int:
    return sk.decrypt(c)


def _same_owner(*owners: str) -> None:
    if len(set(owners)) != 1:
        raise KeyMismatchError(f"ciphertexts under different keys: {sorted(set(owners))}")


def add_cipher(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    _same_owner(pk.owner, c1.owner, c2.owner)
    return Ciphertext(value=int(gmpy2.mpz(c1.value) * c2.value % pk.nsquare), owner=pk.owner)


def add_plain(pk: PublicKey, c: Ciphertext, k: int) -> Ciphertext:
    _same_owner(pk.owner, c.owner)
    pk.check_plain(k)
    return Ciphertext(value=int(gmpy2.mpz(c.value) * pk.encode_plain(k) % pk.nsquare), owner=pk.owner)


def mul_plain(pk: PublicKey, c: Ciphertext, k: int) -> Ciphertext:
    """Scalar multiplication; the caller guarantees ``|k * v| < n // 2``.

    Negative ``k`` exponentiates the modular inverse of ``c``.
    """
    _same_owner(pk.owner, c.owner)
    return Ciphertext(value=int(gmpy2.powmod(c.value, k, pk.nsquare)), owner=pk.owner)
