"""Command-line entry point.

Reports go to stdout as JSON lines; a short human summary goes to stderr.
Exit codes: 0 success, 1 a check failed (scan violations, probe verdicts),
2 usage error, 3 protocol error (the failing step tag is reported).
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import subprocess
import sys
from pathlib import Path

from . import experiments as E
from .bench import SPARSITY_GRID, bench_sparse, to_csv
from .config import ConfigMismatchError, ProtocolConfig
from .data import load_dataset, train_test_split
from .paillier import KeyPair, PublicKey, SecretKey, keygen
from .privacy import embed_ground_truth, matmul_ground_truth, observations, policy_for, scan
from .rng import DRBG
from .training.oracle import oracle_train
from .training.trainer import MODEL_KINDS, ModelSpec, TrainConfig, party_views, train_party, write_metrics_csv
from .transport import ProtocolError, Trace, Transcript, connect, tcp_connect, tcp_listen

EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_PROTOCOL = 3


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=float), flush=True)


def say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- key files ------------------------------------------------------------------------


def save_keys(path, keys: KeyPair) -> None:
    doc = {"owner": keys.owner, "bits": keys.public.n.bit_length(), "p": str(keys.secret.p), "q": str(keys.secret.q)}
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        json.dump(doc, fh)


def load_keys(path) -> KeyPair:
    with open(path) as fh:
        doc = json.load(fh)
    p, q = int(doc["p"]), int(doc["q"])
    pk = PublicKey(n=p * q, owner=doc["owner"])
    return KeyPair(pk, SecretKey(p=p, q=q, public=pk))


# -- argument helpers -------------------------------------------------------------------


def parse_ranges(text: str):
    try:
        out = []
        for part in text.split(","):
            lo, hi = part.split(":")
            out.append((int(lo), int(hi)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ranges look like 0:62,62:123, got {text!r}") from None
    if len(out) != 2:
        raise argparse.ArgumentTypeError("give exactly two ranges (party A, then party B)")
    return out


def host_port(text: str):
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and data")
    g.add_argument("--model", choices=MODEL_KINDS, default="lr")
    g.add_argument("--dataset", default="a9a", help="LIBSVM file name in $FEDSOURCE_DATA_DIR or a synthetic surrogate")
    g.add_argument("--n", type=int, default=5000, help="number of instances to use")
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--split", choices=("even", "ranges"), default="even")
    g.add_argument("--ranges", type=parse_ranges, help="column ranges for --split ranges, e.g. 0:62,62:123")
    g.add_argument("--hidden", type=int, help="width of Z for mlp/wdl models")
    g.add_argument("--data-seed", type=int, default=0, help="public seed for data generation and batch order")
    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--initializer", choices=("uniform", "zero"), default="uniform")
    s = p.add_argument_group("protocol")
    s.add_argument("--seed-a", type=int, default=1, help="party A randomness seed")
    s.add_argument("--seed-b", type=int, default=2, help="party B randomness seed")
    s.add_argument("--key-bits", type=int, choices=(512, 1024, 2048), default=2048)
    s.add_argument("--metrics", type=Path, help="write the metrics CSV here")


def build_problem(args):
    if args.split == "ranges" and not args.ranges:
        raise argparse.ArgumentTypeError("--split ranges needs --ranges")
    ds = load_dataset(args.dataset, args.n, seed=args.data_seed)
    ranges = args.ranges if args.split == "ranges" else None
    tr, te = train_test_split(ds, args.test_fraction, seed=args.data_seed)
    extra = {"hidden": args.hidden} if args.hidden is not None else {}
    spec = ModelSpec.for_dataset(args.model, ds, ranges, **extra)
    cfg = TrainConfig(args.epochs, args.lr, args.batch, args.momentum, args.data_seed, args.initializer)
    return spec, cfg, tr, te, ranges


def report_history(history, metrics_path) -> None:
    for row in history:
        emit({"event": "epoch", **row})
    if metrics_path:
        write_metrics_csv(metrics_path, history)
    if history:
        last = history[-1]
        say(f"epoch {last['epoch']}: train loss {last['train_loss']:.5f}, test metric {last['test_metric']:.5f}")


# -- commands ---------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    rng = DRBG(args.seed) if args.seed is not None else DRBG()
    keys = keygen(args.bits, args.owner, rng)
    save_keys(args.out, keys)
    emit({"event": "keygen", "owner": args.owner, "bits": args.bits, "path": str(args.out)})
    say(f"wrote {args.bits}-bit key pair for {args.owner} to {args.out}")
    return 0


def cmd_run_party(args) -> int:
    if bool(args.listen) == bool(args.connect):
        raise argparse.ArgumentTypeError("give exactly one of --listen or --connect")
    spec, cfg, tr, te, ranges = build_problem(args)
    role, peer = args.role, ("B" if args.role == "A" else "A")
    seed = args.seed_a if role == "A" else args.seed_b
    keys = load_keys(args.keys) if args.keys else E.seeded_keys(args.key_bits, role, seed)
    config = ProtocolConfig(key_bits=args.key_bits)
    channel = tcp_listen(*args.listen) if args.listen else tcp_connect(*args.connect)
    session = connect(role, peer, channel, config, keys, DRBG(seed), trace=bool(args.trace_out))
    own_tr = party_views(tr, ranges)[0 if role == "A" else 1]
    own_te = party_views(te, ranges)[0 if role == "A" else 1]
    try:
        res = train_party(session, spec, cfg, own_tr, own_te, checkpoint_path=args.checkpoint)
    finally:
        if args.transcript:
            session.transcript.save(args.transcript)
        if args.trace_out:
            session.trace.save(args.trace_out)
        session.close()
    if role == "B":
        report_history(res.history, args.metrics)
    emit({"event": "done", "party": role, "transcript_digest": session.transcript.digest()})
    return 0


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _party_argv(args, role: str, addr_flag: str, port: int) -> list[str]:
    argv = [sys.executable, "-m", "fedsource.cli", "run-party", "--role", role, addr_flag, f"127.0.0.1:{port}"]
    for flag in ("model", "dataset", "n", "test_fraction", "split", "hidden", "data_seed", "epochs", "lr", "batch",
                 "momentum", "initializer", "seed_a", "seed_b", "key_bits"):
        v = getattr(args, flag)
        if v is not None:
            argv += [f"--{flag.replace('_', '-')}", str(v)]
    if args.ranges:
        argv += ["--ranges", ",".join(f"{lo}:{hi}" for lo, hi in args.ranges)]
    if args.transcript_dir:
        argv += ["--transcript", str(Path(args.transcript_dir) / f"transcript_{role}.jsonl")]
        argv += ["--trace-out", str(Path(args.transcript_dir) / f"trace_{role}.jsonl")]
    if role == "B" and args.metrics:
        argv += ["--metrics", str(args.metrics)]
    return argv


def cmd_train(args) -> int:
    if args.mode == "processes":
        port = _free_port()
        if args.transcript_dir:
            Path(args.transcript_dir).mkdir(parents=True, exist_ok=True)
        pb = subprocess.Popen(_party_argv(args, "B", "--listen", port), stdout=subprocess.PIPE, text=True)
        pa = subprocess.Popen(_party_argv(args, "A", "--connect", port), stdout=subprocess.PIPE, text=True)
        out_b, _ = pb.communicate()
        out_a, _ = pa.communicate()
        sys.stdout.write(out_b)
        sys.stdout.write(out_a)
        return max(pa.returncode, pb.returncode)
    spec, cfg, tr, te, ranges = build_problem(args)
    run = E.federated_run(spec, cfg, tr, te, ranges=ranges, seed_a=args.seed_a, seed_b=args.seed_b,
                          key_bits=args.key_bits, trace=bool(args.transcript_dir))
    report_history(run.history, args.metrics)
    if args.transcript_dir:
        d = Path(args.transcript_dir)
        d.mkdir(parents=True, exist_ok=True)
        for role, s in (("A", run.session_a), ("B", run.session_b)):
            s.transcript.save(d / f"transcript_{role}.jsonl")
            s.trace.save(d / f"trace_{role}.jsonl")
    emit({"event": "done", "transcript_digest_a": run.session_a.transcript.digest(),
          "transcript_digest_b": run.session_b.transcript.digest()})
    return 0


def cmd_oracle_train(args) -> int:
    spec, cfg, tr, te, ranges = build_problem(args)
    res, _ = oracle_train(spec, cfg, party_views(tr, ranges), party_views(te, ranges),
                          seed_a=args.seed_a, seed_b=args.seed_b, config=ProtocolConfig(key_bits=args.key_bits),
                          features=args.features)
    report_history(res.history, args.metrics)
    return 0


def cmd_probe(args) -> int:
    if args.which == "forward":
        reports = [
            E.forward_probe(args.n or 1000, args.runs, args.epochs or 3, key_bits=args.key_bits),
            E.forward_baseline_probe(key_bits=args.key_bits),
            E.ablation_probe(),
        ]
    elif args.which == "derivative":
        reports = [E.derivative_probe(args.n or 2000, key_bits=args.key_bits)]
    else:
        reports = [E.shares_probe(args.n or 128, key_bits=args.key_bits)]
    for r in reports:
        emit(json.loads(r.to_json()))
        say(f"{r.probe}: {r.metric} = {r.value:.4f} ({r.threshold}) -> {'pass' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def _layer_kinds(trace: Trace) -> dict[str, str]:
    kinds = {}
    for name, _, _ in trace.records:
        layer, _, what = name.rpartition(".")
        if what == "x":
            kinds[layer] = "matmul"
        elif what == "idx":
            kinds[layer] = "embed"
    return kinds


def cmd_scan(args) -> int:
    d = Path(args.dir)
    ta, tb = Trace.load(d / "trace_A.jsonl"), Trace.load(d / "trace_B.jsonl")
    total = 0
    for party in ("A", "B"):
        transcript = Transcript.load(d / f"transcript_{party}.jsonl", party)
        forbidden: dict[str, list] = {}
        for layer, kind in _layer_kinds(ta).items():
            gt = matmul_ground_truth(ta, tb, layer) if kind == "matmul" else embed_ground_truth(ta, tb, layer)
            for name in policy_for(kind, party):
                forbidden.setdefault(name, []).extend(gt.get(name, []))
        found = scan(party, observations(transcript), forbidden)
        for v in found:
            emit({"event": "violation", "party": v.party, "quantity": v.quantity, "source": v.source})
        emit({"event": "scan", "party": party, "messages": len(transcript.entries), "violations": len(found)})
        total += len(found)
    say(f"scan: {total} violation(s)")
    return 0 if total == 0 else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    rows = bench_sparse(args.batch, args.cols, args.out, args.sparsity, seed=args.seed, repeats=args.repeats,
                        config=ProtocolConfig(key_bits=args.key_bits))
    for row in rows:
        emit({"event": "bench", **row})
    if args.csv:
        Path(args.csv).write_text(to_csv(rows))
    say(to_csv(rows).rstrip())
    return 0


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsource", description="Federated source layers over Paillier encryption and secret sharing.")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="generate a Paillier key pair file")
    k.add_argument("--bits", type=int, choices=(512, 1024, 2048), default=2048)
    k.add_argument("--owner", default="A", help="party label: A, B or A<i>")
    k.add_argument("--out", type=Path, required=True)
    k.add_argument("--seed", type=int, help="deterministic keys (tests only)")
    k.set_defaults(func=cmd_keygen)

    r = sub.add_parser("run-party", help="run one party over TCP")
    r.add_argument("--role", choices=("A", "B"), required=True)
    r.add_argument("--listen", type=host_port, metavar="HOST:PORT")
    r.add_argument("--connect", type=host_port, metavar="HOST:PORT")
    r.add_argument("--keys", type=Path, help="key file from keygen (default: derived from the party seed)")
    r.add_argument("--transcript", type=Path, help="save this party's transcript (JSON lines)")
    r.add_argument("--trace-out", type=Path, help="save this party's plaintext debug trace (for offline scans)")
    r.add_argument("--checkpoint", type=Path, help="write a checkpoint after training")
    add_model_args(r)
    r.set_defaults(func=cmd_run_party)

    t = sub.add_parser("train", help="train both parties locally")
    t.add_argument("--mode", choices=("threads", "processes"), default="threads")
    t.add_argument("--transcript-dir", type=Path, help="save transcripts and debug traces of both parties")
    add_model_args(t)
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle-train", help="plaintext reference training on collocated features")
    o.add_argument("--features", choices=("both", "B"), default="both")
    add_model_args(o)
    o.set_defaults(func=cmd_oracle_train)

    pr = sub.add_parser("probe", help="leakage probes")
    pr.add_argument("which", choices=("forward", "derivative", "shares"))
    pr.add_argument("--n", type=int)
    pr.add_argument("--runs", type=int, default=5)
    pr.add_argument("--epochs", type=int)
    pr.add_argument("--key-bits", type=int, choices=(512, 1024, 2048), default=512)
    pr.set_defaults(func=cmd_probe)

    s = sub.add_parser("scan-transcript", help="check saved transcripts against the restricted quantities")
    s.add_argument("dir", type=Path, help="directory holding transcript_{A,B}.jsonl and trace_{A,B}.jsonl")
    s.set_defaults(func=cmd_scan)

    b = sub.add_parser("bench-sparse", help="dense vs CSR encrypted product timing")
    b.add_argument("--batch", type=int, default=128)
    b.add_argument("--cols", type=int, default=1000)
    b.add_argument("--out", type=int, default=1)
    b.add_argument("--sparsity", type=float, nargs="+", default=list(SPARSITY_GRID))
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--key-bits", type=int, choices=(512, 1024, 2048), default=512)
    b.add_argument("--csv", type=Path)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        say(f"error: {exc}")
        return EXIT_USAGE
    except (ProtocolError, ConfigMismatchError) as exc:
        step = getattr(exc, "step_tag", None)
        emit({"event": "error", "kind": type(exc).__name__, "message": str(exc), "step_tag": step})
        say(f"protocol error at {step}: {exc}")
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
