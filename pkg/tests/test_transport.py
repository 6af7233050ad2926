import socket
import struct

import pytest

from fedsource.config import TEST_CONFIG, ConfigMismatchError, ProtocolConfig
from fedsource.rng import DRBG
from fedsource.tensor import FxTensor, encrypt_tensor
from fedsource.transport import (
    ChannelClosed,
    DesyncError,
    MalformedPayloadError,
    PayloadKind,
    ProtocolError,
    Trace,
    Transcript,
    connect,
    decode_body,
    encode_frame,
    queue_pair,
    run_parties,
    tcp_connect,
    tcp_listen,
)


def test_frame_layout():
    f = encode_frame(PayloadKind.PLAIN, "ab", b"xyz")
    # length, kind, tag length, tag, payload
    assert f == struct.pack(">IBH", 8, 2, 2) + b"ab" + b"xyz"
    assert decode_body(f[4:]) == (PayloadKind.PLAIN, "ab", b"xyz")


def test_frame_errors():
    with pytest.raises(MalformedPayloadError):
        decode_body(b"\x01")
    with pytest.raises(MalformedPayloadError):
        decode_body(struct.pack(">BH", 1, 9) + b"ab")
    with pytest.raises(MalformedPayloadError):
        decode_body(struct.pack(">BH", 99, 0))


def test_handshake_sets_peer_keys(sessions, keys_a, keys_b):
    sa, sb = sessions()
    assert sa.peer_pk == keys_b.public and sb.peer_pk == keys_a.public
    assert sa.transcript.tags() == ["hello", "pubkey", "hello", "pubkey"]


def test_typed_roundtrip_and_transcripts(sessions, keys_a):
    sa, sb = sessions()
    t = FxTensor.encode([[1.0, -2.0]], 8)
    sa.send_plain("s1", t)
    assert sb.recv_plain("s1") == t
    ct = encrypt_tensor(keys_a.public, t, DRBG(0))
    sa.send_cipher("s2", ct)
    got = sb.recv_cipher("s2")
    assert got.data.tolist() == ct.data.tolist()
    sb.send_control("s3", {"k": 1})
    assert sa.recv_control("s3") == {"k": 1}
    # what one side sent, the other side received, byte for byte
    sent = [(e.tag, e.payload) for e in sa.transcript.entries if e.direction == "send"]
    recv = [(e.tag, e.payload) for e in sb.transcript.entries if e.direction == "recv"]
    assert sent == recv


def test_desync_names_expected_step(sessions):
    sa, sb = sessions()
    sa.send_control("step.7", 0)
    with pytest.raises(DesyncError) as info:
        sb.recv_control("step.8")
    assert info.value.step_tag == "step.8"
    assert "step.7" in str(info.value)


def test_kind_mismatch(sessions):
    sa, sb = sessions()
    sa.send_control("x", 1)
    with pytest.raises(MalformedPayloadError):
        sb.recv_plain("x")


def test_malformed_cipher_payload(sessions):
    sa, sb = sessions()
    sa.send("c", PayloadKind.CIPHER, b"\x00\x01")
    with pytest.raises(MalformedPayloadError) as info:
        sb.recv_cipher("c")
    assert info.value.step_tag == "c"


def test_closed_and_timeout(sessions):
    sa, sb = sessions()
    sb.timeout = 0.05
    with pytest.raises(ProtocolError, match="timeout"):
        sb.recv_control("never")
    sa.close()
    with pytest.raises(ChannelClosed):
        sb.recv_control("gone")


def test_config_mismatch(keys_a, keys_b):
    ca, cb = queue_pair()
    other = ProtocolConfig(key_bits=512, frac_bits=16)
    with pytest.raises(ConfigMismatchError, match="frac_bits"):
        run_parties(
            lambda: connect("A", "B", ca, TEST_CONFIG, keys_a, DRBG(1), timeout=5),
            lambda: connect("B", "A", cb, other, keys_b, DRBG(2), timeout=5),
        )


def test_wrong_key_owner(keys_a):
    ca, _ = queue_pair()
    with pytest.raises(ValueError):
        connect("B", "A", ca, TEST_CONFIG, keys_a, DRBG(0))


def test_key_size_must_match_config(keys_a):
    ca, _ = queue_pair()
    with pytest.raises(ConfigMismatchError):
        connect("A", "B", ca, ProtocolConfig(key_bits=1024), keys_a, DRBG(0))


def test_tcp_session(keys_a, keys_b):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]

    def party_b():
        ch = tcp_listen("127.0.0.1", port, timeout=10)
        sb = connect("B", "A", ch, TEST_CONFIG, keys_b, DRBG(2), timeout=10)
        big = sb.recv_plain("big")
        sb.send_plain("echo", big)
        sb.close()
        return big

    def party_a():
        ch = tcp_connect("127.0.0.1", port, timeout=10)
        sa = connect("A", "B", ch, TEST_CONFIG, keys_a, DRBG(1), timeout=10)
        t = FxTensor.encode([[float(i) for i in range(3000)]], 20)
        sa.send_plain("big", t)
        back = sa.recv_plain("echo")
        sa.close()
        return t, back

    (t, back), big = run_parties(party_a, party_b, timeout=30)
    assert back == t and big == t


def test_transcript_save_load(sessions, tmp_path):
    sa, sb = sessions()
    sa.send_control("x", [1, 2])
    sb.recv_control("x")
    p = tmp_path / "t.jsonl"
    sb.transcript.save(p)
    loaded = Transcript.load(p, "B")
    assert loaded.digest() == sb.transcript.digest()
    assert loaded.dump() == sb.transcript.dump()


def test_trace_disabled_records_nothing(tmp_path):
    t = Trace(False)
    t("x", FxTensor.zeros((1, 1), 0))
    assert t.records == []
    on = Trace(True)
    v = FxTensor.encode([[0.5]], 4)
    on("x", v, step=3)
    on.save(tmp_path / "tr.jsonl")
    back = Trace.load(tmp_path / "tr.jsonl")
    assert back.by_step("x") == {3: v}
