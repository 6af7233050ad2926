"""Duplex, step-tagged messaging between parties, with full transcripts.

A :class:`Session` wraps one ordered channel between two parties.  Every
message carries a payload kind and a step tag; ``recv`` names the tag it
expects and raises :class:`DesyncError` on the first mismatch.  Both
directions are appended to the party's :class:`Transcript` in program order,
so two runs with equal seeds produce equal transcripts.

Frame layout: 4-byte big-endian length of the rest, 1-byte kind, 2-byte tag
length, UTF-8 tag, payload.
"""

from __future__ import annotations

import hashlib
import json
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

from .config import ConfigMismatchError, ProtocolConfig
from .paillier import KeyPair, MalformedCiphertextError, PublicKey, party_code, party_label
from .rng import DRBG
from .tensor import CipherTensor, FxTensor

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 600.0


class PayloadKind(IntEnum):
    CIPHER = 1
    PLAIN = 2  # blinded share piece or other legitimately public tensor
    PUBKEY = 3
    CONTROL = 4


class ProtocolError(Exception):
    def __init__(self, message: str, step_tag: str | None = None):
        super().__init__(message if step_tag is None else f"[{step_tag}] {message}")
        self.step_tag = step_tag


class DesyncError(ProtocolError):
    pass


class ChannelClosed(ProtocolError):
    pass


class MalformedPayloadError(ProtocolError):
    pass


# -- framing ----------------------------------------------------------------


def encode_frame(kind: int, tag: str, payload: bytes) -> bytes:
    t = tag.encode()
    body = struct.pack(">BH", int(kind), len(t)) + t + payload
    return struct.pack(">I", len(body)) + body


def decode_body(body: bytes) -> tuple[PayloadKind, str, bytes]:
    if len(body) < 3:
        raise MalformedPayloadError("frame shorter than its header")
    kind, tlen = struct.unpack_from(">BH", body, 0)
    if len(body) < 3 + tlen:
        raise MalformedPayloadError("frame tag truncated")
    try:
        kind = PayloadKind(kind)
    except ValueError:
        raise MalformedPayloadError(f"unknown payload kind {kind}") from None
    return kind, body[3:3 + tlen].decode(), body[3 + tlen:]


# -- channels -----------------------------------------------------------------

_CLOSED = object()


class QueueChannel:
    """One end of an in-process duplex channel."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox

    def send_body(self, body: bytes) -> None:
        self._outbox.put(body)

    def recv_body(self, timeout: float | None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self) -> None:
        self._outbox.put(_CLOSED)


def queue_pair() -> tuple[QueueChannel, QueueChannel]:
    q1, q2 = queue.Queue(), queue.Queue()
    return QueueChannel(q1, q2), QueueChannel(q2, q1)


class TcpChannel:
    """Length-prefixed frames over a socket; a reader thread fills an inbox."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._inbox: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_exact(self, n: int) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                return None
            buf.extend(chunk)
        return bytes(buf)

    def _read_loop(self) -> None:
        try:
            while True:
                head = self._read_exact(4)
                if head is None:
                    break
                (length,) = struct.unpack(">I", head)
                body = self._read_exact(length)
                if body is None:
                    break
                self._inbox.put(body)
        except OSError:
            pass
        self._inbox.put(_CLOSED)

    def send_body(self, body: bytes) -> None:
        with self._lock:
            self._sock.sendall(struct.pack(">I", len(body)) + body)

    def recv_body(self, timeout: float | None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ChannelClosed("peer closed the connection")
        return item

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_listen(host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> TcpChannel:
    with socket.create_server((host, port), reuse_port=False) as srv:
        srv.settimeout(timeout)
        conn, _ = srv.accept()
        conn.settimeout(None)
        return TcpChannel(conn)


def tcp_connect(host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> TcpChannel:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=5)
            sock.settimeout(None)
            return TcpChannel(sock)
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


# -- transcripts ----------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    direction: str  # "send" or "recv"
    tag: str
    kind: PayloadKind
    payload: bytes
    wall_time: float

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.payload).hexdigest()

    def dump_line(self) -> str:
        return f"{self.direction}\t{self.tag}\t{self.kind.name}\t{len(self.payload)}\t{self.digest}"


@dataclass
class Transcript:
    party: str
    entries: list[TranscriptEntry] = field(default_factory=list)

    def append(self, entry: TranscriptEntry) -> None:
        self.entries.append(entry)

    def received(self) -> list[TranscriptEntry]:
        return [e for e in self.entries if e.direction == "recv"]

    def dump(self) -> str:
        return "\n".join(e.dump_line() for e in self.entries)

    def digest(self) -> str:
        """Digest over direction, tag, kind and payload (wall times excluded)."""
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.direction}|{e.tag}|{int(e.kind)}|".encode())
            h.update(hashlib.sha256(e.payload).digest())
        return h.hexdigest()

    def tags(self) -> list[str]:
        return [e.tag for e in self.entries]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps({"dir": e.direction, "tag": e.tag, "kind": e.kind.name, "payload": e.payload.hex()}) + "\n")

    @classmethod
    def load(cls, path, party: str = "?") -> "Transcript":
        t = cls(party)
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    t.append(TranscriptEntry(d["dir"], d["tag"], PayloadKind[d["kind"]], bytes.fromhex(d["payload"]), 0.0))
        return t


class Trace:
    """Debug record of plaintext values a party holds, for test-harness oracles.

    Never sent anywhere; a disabled trace records nothing.  Records are keyed
    by name and protocol step (the layer iteration).
    """

    def __init__(self, enabled: bool = False):
        self.enabled = enabled
        self.records: list[tuple[str, object, FxTensor]] = []

    def __call__(self, name: str, value: FxTensor, step=None) -> None:
        if self.enabled:
            self.records.append((name, step, value))

    def get(self, name: str) -> list[FxTensor]:
        return [v for n, _, v in self.records if n == name]

    def by_step(self, name: str) -> dict:
        return {st: v for n, st, v in self.records if n == name}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for n, st, v in self.records:
                fh.write(json.dumps({"name": n, "step": st, "value": v.to_bytes().hex()}) + "\n")

    @classmethod
    def load(cls, path) -> "Trace":
        t = cls(True)
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    t.records.append((d["name"], d["step"], FxTensor.from_bytes(bytes.fromhex(d["value"]))))
        return t


# -- sessions ---------------------------------------------------------------------


class Session:
    """One party's end of a two-party protocol channel."""

    def __init__(
        self,
        party: str,
        peer: str,
        channel,
        config: ProtocolConfig,
        keys: KeyPair,
        rng: DRBG,
        *,
        timeout: float = DEFAULT_TIMEOUT,
        trace: bool = False,
    ):
        party_code(party)
        party_code(peer)
        self.party = party
        self.peer = peer
        self.channel = channel
        self.config = config
        self.keys = keys
        self.rng = rng
        self.timeout = timeout
        self.transcript = Transcript(party)
        self.trace = Trace(trace)
        self.peer_pk: PublicKey | None = None

    @property
    def pk(self) -> PublicKey:
        return self.keys.public

    @property
    def sk(self):
        return self.keys.secret

    # raw messaging

    def send(self, tag: str, kind: PayloadKind, payload: bytes) -> None:
        self.channel.send_body(encode_frame(kind, tag, payload)[4:])
        self.transcript.append(TranscriptEntry("send", tag, PayloadKind(kind), payload, time.time()))

    def recv(self, tag: str, kind: PayloadKind) -> bytes:
        try:
            body = self.channel.recv_body(self.timeout)
        except TimeoutError as exc:
            raise ProtocolError(str(exc), tag) from None
        except ChannelClosed as exc:
            raise ChannelClosed(str(exc), tag) from None
        got_kind, got_tag, payload = decode_body(body)
        self.transcript.append(TranscriptEntry("recv", got_tag, got_kind, payload, time.time()))
        if got_tag != tag:
            raise DesyncError(f"expected step {tag!r}, received {got_tag!r}", tag)
        if got_kind != kind:
            raise MalformedPayloadError(f"expected {PayloadKind(kind).name} payload, received {got_kind.name}", tag)
        return payload

    # typed helpers

    def send_cipher(self, tag: str, ct: CipherTensor) -> None:
        self.send(tag, PayloadKind.CIPHER, ct.to_bytes())

    def recv_cipher(self, tag: str, *, owner: str | None = None) -> CipherTensor:
        """Receive a cipher tensor under ``owner``'s key (default: the peer's)."""
        payload = self.recv(tag, PayloadKind.CIPHER)
        want = owner or self.peer
        pk = self.pk if want == self.party else self.peer_pk
        try:
            return CipherTensor.from_bytes(payload, pk)
        except (MalformedCiphertextError, ValueError, struct.error) as exc:
            raise MalformedPayloadError(str(exc), tag) from None

    def send_plain(self, tag: str, t: FxTensor) -> None:
        self.send(tag, PayloadKind.PLAIN, t.to_bytes())

    def recv_plain(self, tag: str) -> FxTensor:
        payload = self.recv(tag, PayloadKind.PLAIN)
        try:
            return FxTensor.from_bytes(payload)
        except (ValueError, struct.error) as exc:
            raise MalformedPayloadError(str(exc), tag) from None

    def send_control(self, tag: str, obj) -> None:
        self.send(tag, PayloadKind.CONTROL, json.dumps(obj, sort_keys=True).encode())

    def recv_control(self, tag: str):
        payload = self.recv(tag, PayloadKind.CONTROL)
        try:
            return json.loads(payload)
        except ValueError as exc:
            raise MalformedPayloadError(str(exc), tag) from None

    def close(self) -> None:
        self.channel.close()


def connect(
    party: str,
    peer: str,
    channel,
    config: ProtocolConfig,
    keys: KeyPair,
    rng: DRBG,
    **kwargs,
) -> Session:
    """Open a session: exchange protocol config and public keys, then check both."""
    if keys.owner != party:
        raise ValueError(f"key pair belongs to {keys.owner}, not {party}")
    if keys.public.n.bit_length() != config.key_bits:
        raise ConfigMismatchError(f"key has {keys.public.n.bit_length()} bits, config says {config.key_bits}")
    s = Session(party, peer, channel, config, keys, rng, **kwargs)
    s.send_control("hello", {"version": PROTOCOL_VERSION, "party": party, "config": json.loads(config.to_json())})
    s.send("pubkey", PayloadKind.PUBKEY, keys.public.to_bytes())
    hello = s.recv_control("hello")
    if hello.get("version") != PROTOCOL_VERSION:
        raise ConfigMismatchError(f"peer speaks protocol version {hello.get('version')}")
    if hello.get("party") != peer:
        raise ConfigMismatchError(f"expected peer {peer}, got {hello.get('party')}")
    config.check_compatible(ProtocolConfig(**hello["config"]))
    pk = PublicKey.from_bytes(s.recv("pubkey", PayloadKind.PUBKEY))
    if pk.owner != peer:
        raise ConfigMismatchError(f"peer public key labelled {pk.owner}, expected {peer}")
    s.peer_pk = pk
    return s


def run_parties(*tasks: Callable[[], object], timeout: float | None = None) -> list:
    """Run one callable per party in threads; re-raise the first failure.

    Each callable should close its session on error so the peer unblocks; this
    helper does not know about sessions.
    """
    results: list = [None] * len(tasks)
    errors: list = [None] * len(tasks)

    def wrap(i, fn):
        try:
            results[i] = fn()
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[i] = exc

    threads = [threading.Thread(target=wrap, args=(i, fn), daemon=True) for i, fn in enumerate(tasks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    for exc in errors:
        if exc is not None:
            raise exc
    return results


def local_sessions(
    config: ProtocolConfig,
    keys_a: KeyPair,
    keys_b: KeyPair,
    seed_a=None,
    seed_b=None,
    *,
    trace: bool = False,
    timeout: float = DEFAULT_TIMEOUT,
) -> tuple[Session, Session]:
    """Connected in-process (A, B) sessions, handshake done in two threads."""
    ca, cb = queue_pair()
    ra, rb = DRBG(seed_a), DRBG(seed_b)
    a_label, b_label = keys_a.owner, keys_b.owner
    sa, sb = run_parties(
        lambda: connect(a_label, b_label, ca, config, keys_a, ra, trace=trace, timeout=timeout),
        lambda: connect(b_label, a_label, cb, config, keys_b, rb, trace=trace, timeout=timeout),
    )
    return sa, sb


__all__ = [
    "PayloadKind", "ProtocolError", "DesyncError", "ChannelClosed", "MalformedPayloadError",
    "encode_frame", "decode_body", "QueueChannel", "queue_pair", "TcpChannel", "tcp_listen",
    "tcp_connect", "TranscriptEntry", "Transcript", "Trace", "Session", "connect", "run_parties",
    "local_sessions", "party_label",
]
