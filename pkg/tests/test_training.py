import math

import numpy as np
import pytest

from fedsource import experiments as E
from fedsource.data import load_dataset, train_test_split
from fedsource.training.metrics import accuracy, auc, log_loss
from fedsource.training.metrics import test_metric as metric_for
from fedsource.training.oracle import quantize
from fedsource.training.topmodels import TopModel
from fedsource.training.trainer import (
    ModelSpec,
    TrainConfig,
    batch_schedule,
    build_layers,
    build_top,
    load_checkpoint,
    party_views,
    train_party,
    write_metrics_csv,
)
from fedsource.transport import run_parties


# -- metrics ---------------------------------------------------------------------


def test_auc_known_values():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([1, 2, 3], [0, 1, 1]) == 1.0
    assert auc([3, 2, 1], [0, 1, 1]) == 0.0
    # ties count half
    assert auc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        auc([1, 2], [1, 1])


def test_accuracy_and_loss():
    assert accuracy([0, 2, 1], [0, 1, 1]) == pytest.approx(2 / 3)
    assert log_loss(np.full((4, 1), 0.5), [0, 1, 0, 1]) == pytest.approx(math.log(2))
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    assert log_loss(probs, [0, 2]) == pytest.approx(-(math.log(0.7) + math.log(0.8)) / 2)
    assert metric_for(probs, [0, 2]) == 1.0
    assert metric_for(np.array([[0.2], [0.9]]), [0, 1]) == 1.0


def test_quantize_rounds_to_grid():
    assert quantize([[0.3]], 2)[0, 0] == 0.25
    assert quantize([[0.375]], 2)[0, 0] == 0.5
    assert quantize([[-0.375]], 2)[0, 0] == -0.25


# -- top model ---------------------------------------------------------------------


@pytest.mark.parametrize("in_dim,out_dim,hidden,act", [(1, 1, (), True), (3, 3, (), True), (4, 1, (5,), True), (6, 3, (4, 4), False)])
def test_top_gradient_matches_finite_differences(in_dim, out_dim, hidden, act):
    gen = np.random.default_rng(0)
    top = TopModel(in_dim, out_dim, hidden, gen=gen, input_act=act)
    for k in top.params:
        top.params[k] = top.params[k] + gen.normal(0, 0.1, size=top.params[k].shape)
    z = gen.normal(size=(5, in_dim))
    y = gen.integers(0, max(out_dim, 2), size=5)

    def loss(zz):
        return top.loss(top.predict(zz), y)

    eps = 1e-6
    num = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        d = np.zeros_like(z)
        d[idx] = eps
        num[idx] = (loss(z + d) - loss(z - d)) / (2 * eps)
    top.forward(z)
    np.testing.assert_allclose(top.backward(y), num, atol=1e-7)


def test_top_update_is_momentum_sgd():
    top = TopModel(1, 1, gen=np.random.default_rng(0), lr=0.5, momentum=0.5)
    z = np.zeros((2, 1))
    top.forward(z)
    top.backward(np.array([1, 1]))
    # d/db of the mean loss at p=0.5 with both labels 1 is -0.5
    assert top.params["b"][0] == pytest.approx(0.25)
    top.forward(z)
    top.backward(np.array([1, 1]))
    p = 1 / (1 + math.exp(-0.25))
    v = 0.5 * -0.5 + (p - 1)
    assert top.params["b"][0] == pytest.approx(0.25 - 0.5 * v)


# -- specs and schedules -------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("cnn", 1, 1)
    with pytest.raises(ValueError):
        ModelSpec("lr", 1, 1, n_classes=3)
    with pytest.raises(ValueError):
        ModelSpec("wdl", 1, 1)
    assert ModelSpec("mlp", 2, 2, hidden=8).out == 8
    assert ModelSpec("mlr", 2, 2, n_classes=4).out == 4
    spec = ModelSpec.for_dataset("wdl", load_dataset("categorical", 10))
    assert (spec.vocab_a, spec.vocab_b, spec.out) == (20, 20, 1)


def test_batch_schedule_is_public_and_complete():
    a = batch_schedule(10, 4, 3, 1)
    assert [len(b) for b in a] == [4, 4, 2]
    assert sorted(np.concatenate(a).tolist()) == list(range(10))
    assert all((x == y).all() for x, y in zip(a, batch_schedule(10, 4, 3, 1)))
    assert not all((x == y).all() for x, y in zip(a, batch_schedule(10, 4, 3, 2)))


# -- federated runs ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_lr():
    ds = load_dataset("a9a", 400, seed=2)
    tr, te = train_test_split(ds, 0.25, seed=0)
    spec = ModelSpec.for_dataset("lr", ds)
    cfg = TrainConfig(epochs=2, batch=64)
    return spec, cfg, tr, te, E.federated_run(spec, cfg, tr, te, trace=False)


def test_history_layout(small_lr):
    spec, cfg, tr, te, run = small_lr
    assert [r["epoch"] for r in run.history] == [0, 1, 2]
    assert len(run.b.iter_losses) == 2 * math.ceil(len(tr) / 64)
    assert run.a.history == []


def test_matches_oracle(small_lr):
    spec, cfg, tr, te, run = small_lr
    ref, model = E.oracle_run(spec, cfg, tr, te)
    assert E.mean_abs_gap(run.b.iter_losses, ref.iter_losses) <= 1e-6
    for got, want in zip(run.history, ref.history):
        assert abs(got["test_metric"] - want["test_metric"]) <= 1e-4
    la, lb = run.a.layers[0], run.b.layers[0]
    np.testing.assert_allclose((la.U + lb.V_peer).decode(), model.params["W_A"], atol=1e-6)


@pytest.mark.parametrize("kind", ["mlr", "mlp"])
def test_other_heads_match_oracle(kind):
    ds = load_dataset("multiclass" if kind == "mlr" else "a9a", 120, seed=1)
    spec = ModelSpec.for_dataset(kind, ds, **({"hidden": 4} if kind == "mlp" else {}))
    cfg = TrainConfig(epochs=1, batch=40)
    run = E.federated_run(spec, cfg, ds)
    ref, _ = E.oracle_run(spec, cfg, ds)
    assert E.mean_abs_gap(run.b.iter_losses, ref.iter_losses) <= 1e-6


def test_zero_epochs_reports_initial_model():
    ds = load_dataset("a9a", 60, seed=0)
    run = E.federated_run(ModelSpec.for_dataset("lr", ds), TrainConfig(epochs=0), ds)
    assert len(run.history) == 1 and run.history[0]["epoch"] == 0
    assert math.isnan(run.history[0]["test_metric"])
    assert run.b.iter_losses == []


def test_same_seeds_same_run(tmp_path):
    ds = load_dataset("a9a", 80, seed=0)
    spec, cfg = ModelSpec.for_dataset("lr", ds), TrainConfig(epochs=1, batch=40)
    r1 = E.federated_run(spec, cfg, ds, ds)
    r2 = E.federated_run(spec, cfg, ds, ds)
    write_metrics_csv(tmp_path / "a.csv", r1.history)
    write_metrics_csv(tmp_path / "b.csv", r2.history)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert r1.session_a.transcript.digest() == r2.session_a.transcript.digest()
    assert r1.session_b.transcript.digest() == r2.session_b.transcript.digest()
    r3 = E.federated_run(spec, cfg, ds, ds, seed_a=9)
    assert r3.session_b.transcript.digest() != r1.session_b.transcript.digest()


def test_checkpoint_roundtrip(tmp_path, sessions):
    ds = load_dataset("categorical", 40, seed=0)
    spec, cfg = ModelSpec.for_dataset("wdl", ds), TrainConfig(epochs=1, batch=20)
    a, b = party_views(ds)
    sa, sb = sessions()
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    ra, rb = run_parties(
        lambda: train_party(sa, spec, cfg, a, checkpoint_path=pa),
        lambda: train_party(sb, spec, cfg, b, checkpoint_path=pb),
    )
    sa2, sb2 = sessions(seed_a=1, seed_b=2)
    la, lb = build_layers(sa2, spec, cfg), build_layers(sb2, spec, cfg)
    top = build_top(np.random.default_rng(5), spec, cfg)
    assert load_checkpoint(pa, sa2, la) == 1
    assert load_checkpoint(pb, sb2, lb, top) == 1
    for old, new in zip(ra.layers + rb.layers, la + lb):
        assert new.iteration == old.iteration
        for k, v in old.plaintext_state().items():
            assert new.plaintext_state()[k] == v
        for k, v in old.opt.velocity.items():
            assert new.opt.velocity[k] == v
    for k in rb.top.params:
        np.testing.assert_array_equal(top.params[k], rb.top.params[k])
    with pytest.raises(ValueError):
        load_checkpoint(pa, sb2, lb)


def test_collocated_beats_label_party_alone():
    both, local = E.collocated_vs_local(1200, epochs=5)
    assert both > local + 0.1
