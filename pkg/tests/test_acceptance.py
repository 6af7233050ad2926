"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (visible with or without ``-s``)
before asserting.
"""

import math
import time

import numpy as np
import pytest

from fedsource import experiments as E
from fedsource import probes as P
from fedsource.bench import SPARSITY_GRID, bench_sparse
from fedsource.config import TEST_CONFIG
from fedsource.data import load_dataset, train_test_split
from fedsource.embed import EmbedDims, EmbedMatMulLayer
from fedsource.matmul import MatMulDims, MatMulLayer
from fedsource.multiparty import MultiPartyHub, member_label, member_layer
from fedsource.paillier import add_cipher, add_plain, decrypt, encrypt, keygen, mul_plain
from fedsource.privacy import embed_witness, linear_witness
from fedsource.rng import DRBG
from fedsource.tensor import FxTensor, decrypt_tensor, encrypt_tensor, lkup, matmul
from fedsource.training.trainer import ModelSpec, TrainConfig, write_metrics_csv
from fedsource.transforms import he2ss_recv, he2ss_send, ss2he
from fedsource.transport import local_sessions, run_parties

from layer_helpers import features, raw_matmul

F = TEST_CONFIG.frac_bits


@pytest.fixture
def verdict(capsys):
    def say(number: int, text: str, ok: bool):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}")
        assert ok, text

    return say


def test_01_paillier_randomized(verdict):
    t0 = time.perf_counter()
    keys = keygen(512, "A", DRBG("acc-1"))
    pk, sk = keys.public, keys.secret
    gen = DRBG("acc-1-cases")
    half = pk.max_plain // 2
    bad = 0
    for _ in range(1000):
        a, b = gen.randbelow(2 * half) - half, gen.randbelow(2 * half) - half
        k = gen.randbelow(1 << 64) - (1 << 63)
        ca, cb = encrypt(pk, a, gen), encrypt(pk, b, gen)
        sa = (a + b) if abs(a + b) <= pk.max_plain else None
        ok = decrypt(sk, ca) == a
        if sa is not None:
            ok &= decrypt(sk, add_cipher(pk, ca, cb)) == sa
        small = a >> 200
        ok &= decrypt(sk, mul_plain(pk, encrypt(pk, small, gen), k)) == small * k
        ok &= decrypt(sk, add_plain(pk, ca, -a)) == 0
        bad += not ok
    dt = time.perf_counter() - t0
    verdict(1, f"1000 Paillier cases, {bad} mismatches, {dt:.1f}s at 512-bit keys", bad == 0 and dt < 60)


def test_02_share_conversions(verdict):
    ka, kb = keygen(512, "A", DRBG("acc-2a")), keygen(512, "B", DRBG("acc-2b"))
    sa, sb = local_sessions(TEST_CONFIG, ka, kb, 1, 2, timeout=60)
    gen = np.random.default_rng(2)
    vb = 64
    bad = 0
    for case in range(200):
        shape = (int(gen.integers(1, 5)), int(gen.integers(1, 5)))
        v = FxTensor.encode(gen.normal(scale=100.0, size=shape), F)
        # he2ss: B holds [[v]] under A's key
        ct = encrypt_tensor(ka.public, v, DRBG(case))
        (phi, _), piece = run_parties(lambda: he2ss_send(sb, ct, f"h{case}", vb), lambda: he2ss_recv(sa, f"h{case}", vb))
        bad += piece + phi != v
        # ss2he then back to shares
        ea, eb = run_parties(lambda: ss2he(sa, piece, f"s{case}"), lambda: ss2he(sb, phi, f"s{case}"))
        bad += decrypt_tensor(kb.secret, ea) != v
        (phi2, _), piece2 = run_parties(lambda: he2ss_send(sb, eb, f"r{case}", vb), lambda: he2ss_recv(sa, f"r{case}", vb))
        bad += piece2 + phi2 != v
    sa.close()
    sb.close()
    verdict(2, f"200 he2ss / ss2he / round-trip cases, {bad} mismatches", bad == 0)


def test_03_lossless_forward(verdict, keys_a, keys_b):
    gen = np.random.default_rng(3)
    sa, sb = local_sessions(TEST_CONFIG, keys_a, keys_b, 31, 32, timeout=60)
    bad = {"matmul": 0, "embed": 0}
    for case in range(200):
        in_a, in_b, out, batch = (int(v) for v in gen.integers(1, 9, size=4))
        batch = min(batch, 4)
        dims = MatMulDims(in_a, in_b, out)
        la, lb = MatMulLayer(sa, f"m{case}", dims), MatMulLayer(sb, f"m{case}", dims)
        run_parties(la.setup, lb.setup)
        xa, xb = features(gen, batch, in_a, density=0.7), features(gen, batch, in_b, density=0.7)
        _, z = run_parties(lambda: la.forward(xa), lambda: lb.forward(xb))
        want = raw_matmul(xa.raw, (la.U + lb.V_peer).raw) + raw_matmul(xb.raw, (lb.U + la.V_peer).raw)
        bad["matmul"] += z.raw.tolist() != want.tolist()

        va, vbk, dim = (int(v) for v in gen.integers(1, 9, size=3))
        edims = EmbedDims(va, vbk, dim, out)
        ea, eb = EmbedMatMulLayer(sa, f"e{case}", edims), EmbedMatMulLayer(sb, f"e{case}", edims)
        run_parties(ea.setup, eb.setup)
        ia, ib = gen.integers(0, va, size=batch), gen.integers(0, vbk, size=batch)
        _, z = run_parties(lambda: ea.forward(ia), lambda: eb.forward(ib))
        qa, qb = (ea.S + eb.T_peer).raw, (eb.S + ea.T_peer).raw
        want = raw_matmul(qa[ia], (ea.U + eb.V_peer).raw) + raw_matmul(qb[ib], (eb.U + ea.V_peer).raw)
        bad["embed"] += z.raw.tolist() != want.tolist()
    sa.close()
    sb.close()
    verdict(3, f"200 instances per layer type, mismatches {bad}", not any(bad.values()))


def test_04_logistic_regression_parity(verdict):
    ds = load_dataset("a9a", 5000, seed=0)
    tr, te = train_test_split(ds, 0.2, seed=0)
    spec = ModelSpec.for_dataset("lr", ds)
    cfg = TrainConfig(epochs=10, lr=0.05, batch=128)
    t0 = time.perf_counter()
    run = E.federated_run(spec, cfg, tr, te, key_bits=512)
    dt = time.perf_counter() - t0
    ref, _ = E.oracle_run(spec, cfg, tr, te)
    auc_gap = abs(run.history[-1]["test_metric"] - ref.history[-1]["test_metric"])
    loss_gap = E.mean_abs_gap(run.b.iter_losses, ref.iter_losses)
    ok = auc_gap <= 0.005 and loss_gap <= 1e-3 and dt <= 600
    verdict(4, f"LR 10 epochs: AUC fed {run.history[-1]['test_metric']:.4f} vs oracle {ref.history[-1]['test_metric']:.4f} "
               f"(gap {auc_gap:.2e}), max loss gap {loss_gap:.2e}, {dt:.0f}s", ok)


def test_05_mini_wdl(verdict):
    ds = load_dataset("categorical", 600, seed=0)
    tr, te = train_test_split(ds, 0.2, seed=0)
    spec = ModelSpec.for_dataset("wdl", ds)
    cfg = TrainConfig(epochs=5, batch=128)
    run = E.federated_run(spec, cfg, tr, te)
    ref, model = E.oracle_run(spec, cfg, tr, te)
    k = len(run.b.iter_losses)
    tol = k * 2.0 ** (-F + 1)
    (ma, ea), (mb, eb) = run.a.layers, run.b.layers
    restored = {
        "W_A": ma.U + mb.V_peer, "W_B": mb.U + ma.V_peer,
        "Q_A": ea.S + eb.T_peer, "Q_B": eb.S + ea.T_peer,
        "WE_A": ea.U + eb.V_peer, "WE_B": eb.U + ea.V_peer,
    }
    gaps = {name: float(np.max(np.abs(t.decode() - model.params[name]))) for name, t in restored.items()}
    auc_gap = abs(run.history[-1]["test_metric"] - ref.history[-1]["test_metric"])
    ok = all(g <= tol for g in gaps.values()) and auc_gap <= 0.01
    worst = max(gaps, key=gaps.get)
    verdict(5, f"WDL {k} steps: worst parameter gap {worst} {gaps[worst]:.2e} (bound {tol:.2e}), AUC gap {auc_gap:.2e}", ok)


def test_06_forward_probes(verdict):
    masked = E.forward_probe(n=1000, runs=5, epochs=3)
    base = E.forward_baseline_probe()
    abl = E.ablation_probe()
    ok = masked.passed and base.passed and abl.passed
    verdict(6, f"AUC(X_A U_A) {masked.value:.3f} in [0.45, 0.55]; baseline AUC(X_A W_A) {base.value:.3f} >= 0.8; "
               f"ablation {abl.value:.3f} >= 0.75", ok)


def test_07_derivative_probe(verdict):
    rep = E.derivative_probe()
    by = rep.details["by_hidden_layers"]
    msgs = rep.details["masked_plaintext_gradE_A_messages"]
    verdict(7, f"label recovery by depth {by}; masked run plaintext dL/dE_A messages: {msgs}", rep.passed)


def test_08_privacy_scan(verdict):
    found = {}
    for kind, name, n in (("lr", "a9a", 96), ("mlp", "a9a", 64), ("wdl", "categorical", 64)):
        ds = load_dataset(name, n, seed=8)
        extra = {"hidden": 4} if kind == "mlp" else {}
        run = E.federated_run(ModelSpec.for_dataset(kind, ds, **extra), TrainConfig(epochs=2, batch=32), ds, trace=True)
        found[kind] = len(E.scan_run(run))
    verdict(8, f"policy violations per model {found}", not any(found.values()))


def test_09_non_identifiability(verdict, keys_a, keys_b):
    gen = np.random.default_rng(9)
    sa, sb = local_sessions(TEST_CONFIG, keys_a, keys_b, 91, 92, timeout=60)
    same = {"linear": 0, "embed": 0}

    def z_of(make_a, make_b, fa, fb, patch):
        la, lb = make_a(), make_b()
        patch(la, lb)
        run_parties(la.setup, lb.setup)
        return run_parties(lambda: la.forward(fa), lambda: lb.forward(fb))[1]

    for case in range(100):
        in_a, in_b, out = (int(v) for v in gen.integers(1, 6, size=3))
        batch = int(gen.integers(1, 5))
        dims = MatMulDims(in_a, in_b, out)
        xa, xb = features(gen, batch, in_a), features(gen, batch, in_b)
        mk_a, mk_b = (lambda: MatMulLayer(sa, "w", dims)), (lambda: MatMulLayer(sb, "w", dims))
        base = {}

        def keep(la, lb):
            base["W_A"] = la.U + lb.V_peer

        z0 = z_of(mk_a, mk_b, xa, xb, keep)
        xa2, wa2 = linear_witness(xa, base["W_A"], gen)

        def swap(la, lb):
            la.U = wa2 - lb.V_peer

        z1 = z_of(mk_a, mk_b, xa2, xb, swap)
        same["linear"] += z0 == z1 and xa2 != xa

        va, vbk, dim = (int(v) for v in gen.integers(2, 6, size=3))
        edims = EmbedDims(va, vbk, dim, out)
        ia, ib = [int(i) for i in gen.integers(0, va, size=batch)], gen.integers(0, vbk, size=batch)
        mk_ea, mk_eb = (lambda: EmbedMatMulLayer(sa, "v", edims)), (lambda: EmbedMatMulLayer(sb, "v", edims))

        def keep_e(la, lb):
            base["Q_A"], base["WE_A"] = la.S + lb.T_peer, la.U + lb.V_peer

        z0 = z_of(mk_ea, mk_eb, ia, ib, keep_e)
        q2, ia2, w2 = embed_witness(base["Q_A"], ia, base["WE_A"], gen)

        def swap_e(la, lb):
            la.S = q2 - lb.T_peer
            la.U = w2 - lb.V_peer

        z1 = z_of(mk_ea, mk_eb, ia2, ib, swap_e)
        same["embed"] += z0 == z1 and (q2 != base["Q_A"] or ia2 != ia)
    sa.close()
    sb.close()
    verdict(9, f"witnesses with identical Z: linear {same['linear']}/100, embed {same['embed']}/100",
            same == {"linear": 100, "embed": 100})


def test_10_multiparty(verdict, keys_a, keys_b):
    gen = np.random.default_rng(10)
    steps = 3
    xa = [features(gen, 3, 3) for _ in range(steps)]
    xb = [features(gen, 3, 2) for _ in range(steps)]
    grads = [FxTensor.encode(gen.normal(0, 0.1, size=(3, 1)), F) for _ in range(steps)]

    # two-party reference
    sa, sb = local_sessions(TEST_CONFIG, keys_a, keys_b, 11, 22, timeout=60)
    la = MatMulLayer(sa, "mm", MatMulDims(3, 2, 1), refresh="resend")
    lb = MatMulLayer(sb, "mm", MatMulDims(3, 2, 1), refresh="resend")
    run_parties(la.setup, lb.setup)
    for t in range(steps):
        run_parties(lambda: la.forward(xa[t]), lambda: lb.forward(xb[t]))
        run_parties(la.backward, lambda: lb.backward(grads[t]))

    ma, hb = local_sessions(TEST_CONFIG, keys_a, keys_b, 11, 22, timeout=60)
    hub = MultiPartyHub([hb], "mm", 2, [3], 1)
    m = member_layer(ma, "mm", 1, 3, 2, 1)
    run_parties(hub.setup, m.setup)
    for t in range(steps):
        run_parties(lambda: hub.forward(xb[t]), lambda: m.forward(xa[t]))
        run_parties(lambda: hub.backward(grads[t]), m.backward)
    strip = lambda s: [(e.direction, e.kind, e.payload) for e in s.transcript.entries]  # noqa: E731
    identical = strip(ma) == strip(sa) and strip(hb) == strip(sb)

    # three feature parties against a float replay of the logical model
    widths = [2, 3, 1]
    member_keys = [keygen(512, member_label(i + 1), DRBG(f"acc-10-{i}")) for i in range(3)]
    pairs = [local_sessions(TEST_CONFIG, k, keys_b, 40 + i, 50, timeout=60) for i, k in enumerate(member_keys)]
    hub3 = MultiPartyHub([p[1] for p in pairs], "mm", 2, widths, 1)
    members = [member_layer(p[0], "mm", i + 1, w, 2, 1) for i, (p, w) in enumerate(zip(pairs, widths))]
    run_parties(hub3.setup, *[mm.setup for mm in members])
    w_as = [(mm.U + v).decode() for mm, v in zip(members, hub3.v_pieces())]
    w_b = hub3.U
    for mm in members:
        w_b = w_b + mm.V_peer
    w_b = w_b.decode()
    vel = [np.zeros_like(w) for w in w_as] + [np.zeros_like(w_b)]
    beta = hub3.opt.beta
    xas = [[features(gen, 4, w) for _ in range(steps)] for w in widths]
    xbs = [features(gen, 4, 2) for _ in range(steps)]
    gs = [FxTensor.encode(gen.normal(0, 0.1, size=(4, 1)), F) for _ in range(steps)]
    worst_z, worst_w = 0.0, 0.0
    for t in range(steps):
        z = run_parties(lambda: hub3.forward(xbs[t]), *[lambda mm=mm, x=x: mm.forward(x[t]) for mm, x in zip(members, xas)])[0]
        z_ref = xbs[t].decode() @ w_b + sum(x[t].decode() @ w for x, w in zip(xas, w_as))
        worst_z = max(worst_z, float(np.max(np.abs(z.decode() - z_ref))))
        run_parties(lambda: hub3.backward(gs[t]), *[mm.backward for mm in members])
        g = gs[t].decode()
        for i, (x, w) in enumerate(zip(xas, w_as)):
            vel[i] = beta * vel[i] + x[t].decode().T @ g
            w_as[i] = w - vel[i]
        vel[-1] = beta * vel[-1] + xbs[t].decode().T @ g
        w_b = w_b - vel[-1]
        got_as = [(mm.U + v).decode() for mm, v in zip(members, hub3.v_pieces())]
        got_b = hub3.U
        for mm in members:
            got_b = got_b + mm.V_peer
        worst_w = max([worst_w, float(np.max(np.abs(got_b.decode() - w_b)))] +
                      [float(np.max(np.abs(a - b))) for a, b in zip(got_as, w_as)])
    k = steps
    ok = identical and worst_z <= 1e-9 and worst_w <= k * 2.0 ** (-F + 1)
    verdict(10, f"M=1 payload-identical to two-party: {identical}; M=3 max |Z - oracle| {worst_z:.1e}, "
                f"max weight gap {worst_w:.1e}", ok)


def test_11_sparse_speedup(verdict):
    rows = bench_sparse(128, 1000, 1, SPARSITY_GRID, repeats=5)
    speed = [r["speedup"] for r in rows]
    monotone = all(a <= b for a, b in zip(speed, speed[1:]))
    ok = speed[-1] >= 5 and monotone
    verdict(11, "CSR speedup by sparsity " + ", ".join(f"{r['sparsity']:.0%}: {r['speedup']:.2f}x" for r in rows), ok)


def test_12_determinism(verdict, tmp_path):
    ds = load_dataset("a9a", 300, seed=12)
    tr, te = train_test_split(ds, 0.2, seed=12)
    spec, cfg = ModelSpec.for_dataset("lr", ds), TrainConfig(epochs=2, batch=64)
    out = []
    for i in range(2):
        run = E.federated_run(spec, cfg, tr, te, seed_a=5, seed_b=6)
        path = tmp_path / f"m{i}.csv"
        write_metrics_csv(path, run.history)
        out.append((path.read_bytes(), run.session_a.transcript.digest(), run.session_b.transcript.digest()))
    verdict(12, f"two runs with seeds (5, 6): CSV equal {out[0][0] == out[1][0]}, digests equal {out[0][1:] == out[1][1:]}",
            out[0] == out[1])
