import json

import numpy as np
import pytest

from fedsource import experiments as E
from fedsource import probes as P


def test_activation_auc_uses_first_column():
    x = np.array([[1.0], [2.0], [3.0], [4.0]])
    w = np.array([[1.0, -1.0]])
    assert P.activation_auc(x, w, [0, 0, 1, 1]) == 1.0


def test_forward_report_band():
    assert P.forward_masked_report([0.5, 0.52]).passed
    r = P.forward_masked_report([0.7, 0.6])
    assert not r.passed and r.value == pytest.approx(0.65)
    assert json.loads(r.to_json())["probe"] == "forward"
    assert P.forward_baseline_report(0.81).passed and not P.forward_baseline_report(0.79).passed


def test_ablation_difference_cancels_mask(gen):
    x = gen.normal(size=(200, 5))
    w_true = gen.normal(size=(5, 1))
    y = (x @ w_true).ravel() > 0
    w0 = np.zeros((5, 1))
    for big in (1.0, 1e6):
        r = P.ablation_trajectory(x, w0, w_true, big * gen.normal(size=(5, 1)), y.astype(int))
        assert r["differenced"] == 1.0
    rep = P.ablation_report({1.0: {"raw": 0.5, "differenced": 0.9}, 1e6: {"raw": 0.5, "differenced": 0.8}})
    assert rep.passed and rep.value == 0.8


def test_cosine_sign_recovery():
    y = np.array([1, 0, 1, 0, 1])
    d = np.where(y[:, None] == 1, 1.0, -1.0) * np.abs(np.random.default_rng(0).normal(size=(5, 3)))
    assert P.cosine_sign_recovery(d, y) == 1.0
    d[0] = 0.0
    assert P.cosine_sign_recovery(d, y) == 1.0  # reference skips the zero row
    assert P.cosine_sign_recovery(np.zeros((3, 2)), [0, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        P.cosine_sign_recovery(d, [0, 1, 2, 0, 1])


def test_derivative_report_counts_masked_messages():
    assert P.derivative_report({1: 1.0, 2: 0.995}, 0).passed
    assert not P.derivative_report({1: 1.0}, 3).passed
    assert not P.derivative_report({1: 0.9}).passed


def test_share_statistics(gen):
    w = gen.normal(size=2000)
    st = P.share_statistics(w, w)
    assert st["degenerate"] and st["sign_agreement"] == 1.0
    sweep = P.mask_sweep(w, [0.0, 1e3], gen)
    assert sweep[0]["degenerate"]
    assert 0.4 <= sweep[1]["sign_agreement"] <= 0.6
    assert P.shares_report(w - 1e3 * gen.normal(size=2000), w).passed
    assert not P.shares_report(w[:10] - 5, w[:10]).passed


def test_derivative_probe_single_depth():
    rep = E.derivative_probe(n=600, hidden_layers=(1,), masked_check=False)
    assert rep.details["by_hidden_layers"]["1"] >= 0.99


def test_shares_probe():
    rep = E.shares_probe(n=64, hidden=32)
    assert rep.passed, rep.details
