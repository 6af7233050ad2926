import numpy as np
import pytest

from fedsource.rng import DRBG
from fedsource.tensor import FxTensor, decrypt_tensor, encrypt_tensor
from fedsource.transforms import ShareOverflowError, he2ss_recv, he2ss_send, ss2he
from fedsource.transport import PayloadKind, ProtocolError, run_parties

VB = 64


def rand_fx(gen, shape, scale, bits):
    raw = np.empty(shape, dtype=object)
    for idx in np.ndindex(*shape):
        raw[idx] = int(gen.integers(-(2**62), 2**62)) >> (62 - bits)
    return FxTensor(raw, scale)


def test_he2ss_random_cases(sessions, keys_a):
    # B holds [[v]] under A's key and keeps phi; A decrypts v - phi
    sa, sb = sessions()
    gen = np.random.default_rng(0)
    for case in range(40):
        shape = (int(gen.integers(1, 4)), int(gen.integers(1, 4)))
        v = rand_fx(gen, shape, 20, 60)
        ct = encrypt_tensor(keys_a.public, v, DRBG(case))
        (phi, sent), piece = run_parties(
            lambda: he2ss_send(sb, ct, f"h{case}", VB),
            lambda: he2ss_recv(sa, f"h{case}", VB),
        )
        assert piece + phi == v
        # the ciphertext on the wire is not the one that came in
        assert sent.data.ravel()[0] != ct.data.ravel()[0]


def test_he2ss_rejects_own_key(sessions, keys_b):
    sa, sb = sessions()
    ct = encrypt_tensor(keys_b.public, FxTensor.zeros((1, 1), 0), DRBG(0))
    with pytest.raises(ProtocolError):
        he2ss_send(sb, ct, "t", VB)


def test_he2ss_overflow_is_caught(sessions, keys_a):
    sa, sb = sessions()
    too_big = FxTensor(np.array([[1 << 200]], dtype=object), 0)
    ct = encrypt_tensor(keys_a.public, too_big, DRBG(0))
    with pytest.raises(ShareOverflowError):
        run_parties(lambda: he2ss_send(sb, ct, "t", VB), lambda: he2ss_recv(sa, "t", VB))


def test_ss2he_and_roundtrip(sessions):
    sa, sb = sessions()
    gen = np.random.default_rng(1)
    for case in range(20):
        shape = (2, 3)
        pa = rand_fx(gen, shape, 20, 60)
        pb = rand_fx(gen, shape, 20, 60)
        ea, eb = run_parties(lambda: ss2he(sa, pa, f"s{case}"), lambda: ss2he(sb, pb, f"s{case}"))
        # A ends with [[v]] under B's key, B with [[v]] under A's key
        assert ea.owner == "B" and eb.owner == "A"
        assert decrypt_tensor(sb.sk, ea) == pa + pb
        assert decrypt_tensor(sa.sk, eb) == pa + pb
        # back to shares: B masks [[v]]_A, A decrypts
        (phi, _), piece = run_parties(
            lambda: he2ss_send(sb, eb, f"r{case}", VB),
            lambda: he2ss_recv(sa, f"r{case}", VB),
        )
        assert piece + phi == pa + pb


def test_only_ciphertexts_cross(sessions, keys_a):
    sa, sb = sessions()
    v = FxTensor.encode([[1.0]], 20)
    ct = encrypt_tensor(keys_a.public, v, DRBG(0))
    run_parties(lambda: he2ss_send(sb, ct, "t", VB), lambda: he2ss_recv(sa, "t", VB))
    run_parties(lambda: ss2he(sa, v, "u"), lambda: ss2he(sb, v, "u"))
    kinds = {e.kind for e in sa.transcript.entries[4:]}
    assert kinds == {PayloadKind.CIPHER}


def test_ss2he_shape_mismatch(sessions):
    sa, sb = sessions()
    with pytest.raises(ProtocolError):
        run_parties(
            lambda: ss2he(sa, FxTensor.zeros((1, 2), 0), "x"),
            lambda: ss2he(sb, FxTensor.zeros((2, 1), 0), "x"),
        )
