import numpy as np
import pytest

from fedsource.fixedpoint import FixedPointOverflow, ScaleMismatchError
from fedsource.tensor import FxTensor
from fedsource.training.optimizer import FederatedOptimizer

from layer_helpers import ints

F = 20
S = 2 * F


def test_beta_is_quantized():
    opt = FederatedOptimizer(0.9, F)
    assert opt.beta_raw == 943718  # round(0.9 * 2**20)
    assert opt.beta == 943718 / 2**20
    with pytest.raises(ValueError):
        FederatedOptimizer(1.0)


def test_zero_momentum_is_plain_sgd(gen):
    opt = FederatedOptimizer(0.0, F)
    w = FxTensor(ints(gen.integers(-(10**9), 10**9, size=(3, 2))), S)
    for _ in range(5):
        g = FxTensor(ints(gen.integers(-(10**6), 10**6, size=(3, 2))), S)
        new = opt.step("w", w, g)
        assert new == w - g
        w = new


def test_shared_momentum_tracks_float_oracle():
    """Two pieces updated independently stay within one unit per piece per step of the float run."""
    gen = np.random.default_rng(0)
    beta = 0.9
    opt = FederatedOptimizer(beta, F)
    w = gen.normal(size=(4, 3))
    mask = gen.normal(scale=1e3, size=w.shape)
    pa = FxTensor.encode(w - mask, S)
    pb = FxTensor.encode(mask, S)
    w_ref = (pa + pb).decode()
    v_ref = np.zeros_like(w)
    steps = 50
    for k in range(1, steps + 1):
        g = FxTensor.encode(gen.normal(scale=0.05, size=w.shape), S)
        split = FxTensor.encode(gen.normal(scale=1e3, size=w.shape), S)
        pa = opt.step("a", pa, g - split)
        pb = opt.step("b", pb, split)
        v_ref = opt.beta * v_ref + g.decode()
        w_ref = w_ref - v_ref
        gap = np.max(np.abs((pa + pb).decode() - w_ref))
        assert gap <= k * 2.0 ** (-F + 1)
        # the tighter bound: two pieces, geometric sum of per-step floor errors
        assert gap <= k * 2 / (1 - opt.beta) * 2.0**-S + 1e-12


def test_checks():
    opt = FederatedOptimizer(0.5, F, bound_bits=50)
    with pytest.raises(ScaleMismatchError):
        opt.step("w", FxTensor.zeros((1, 1), S), FxTensor.zeros((1, 1), F))
    with pytest.raises(FixedPointOverflow):
        opt.step("w", FxTensor.zeros((1, 1), S), FxTensor(ints([[-(2**60)]]), S))
    assert set(opt.state_dict()) <= {"w"}
