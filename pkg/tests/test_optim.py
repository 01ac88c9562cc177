import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdfocc.errors import DomainError, NumericError
from sdfocc.optim import OptimState, adamw_step, cosine_lr


def test_cosine_examples():
    s = OptimState(lr0=1e-4, total_steps=100)
    assert cosine_lr(s, 0) == 1e-4
    assert cosine_lr(s, 100) == pytest.approx(0, abs=1e-20)
    assert cosine_lr(s, 50) == pytest.approx(5e-5)
    with pytest.raises(DomainError):
        cosine_lr(OptimState(total_steps=0))
    with pytest.raises(DomainError):
        cosine_lr(s, 101)


def test_zero_gradient_zero_decay_is_identity():
    p = {"sdf": np.array([1.0, -2.0])}
    adamw_step(OptimState(lr0=0.1, total_steps=10, weight_decay=0.0), p, {"sdf": np.zeros(2)}, lr=0.1)
    assert np.array_equal(p["sdf"], [1.0, -2.0])


def test_decay_acts_alone():
    p = {"sdf": np.array([1.0, -2.0]), "rho": np.array(3.0)}
    s = OptimState(lr0=0.1, total_steps=10, weight_decay=0.01)
    adamw_step(s, p, {"sdf": np.zeros(2), "rho": np.zeros(())}, lr=0.1)
    assert np.allclose(p["sdf"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.01))
    assert p["rho"] == 3.0  # excluded from decay


def test_first_step_is_sign_step():
    g = np.array([3.0, -0.02, 50.0])
    p = {"sdf": np.zeros(3)}
    lr = 0.01
    adamw_step(OptimState(lr0=lr, total_steps=10, weight_decay=0.0), p, {"sdf": g}, lr=lr)
    assert np.allclose(p["sdf"], -lr * np.sign(g), atol=lr * 1e-6)


def test_nan_gradient_names_block():
    with pytest.raises(NumericError, match="color"):
        adamw_step(OptimState(total_steps=5), {"color": np.zeros(2)}, {"color": np.array([np.nan, 0])})


def test_schedule_used_when_lr_omitted():
    s = OptimState(lr0=0.2, total_steps=4, weight_decay=0.0)
    p = {"sdf": np.zeros(1)}
    adamw_step(s, p, {"sdf": np.ones(1)})
    assert p["sdf"][0] == pytest.approx(-0.2, rel=1e-6)
    assert s.step == 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), wd=st.floats(0, 0.1), lr=st.floats(1e-4, 0.5))
def test_adaptive_step_bound(seed, wd, lr):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=6)
    p = {"sdf": rng.normal(size=6)}
    s = OptimState(lr0=lr, total_steps=50, weight_decay=wd)
    for _ in range(10):
        before = p["sdf"].copy()
        adamw_step(s, p, {"sdf": g}, lr=lr)
        bound = lr * (1 + wd * np.max(np.abs(before)))
        assert np.max(np.abs(p["sdf"] - before)) <= bound * (1 + 1e-9)
        assert np.all(s.second["sdf"] >= 0)


def test_post_step_clamp_and_determinism():
    def run():
        rng = np.random.default_rng(0)
        p = {"color": np.full(4, 0.99)}
        s = OptimState(lr0=0.5, total_steps=20)
        for _ in range(5):
            adamw_step(s, p, {"color": -np.abs(rng.normal(size=4))},
                       post_step=lambda: np.clip(p["color"], 0, 1, out=p["color"]))
        return p["color"]

    a, b = run(), run()
    assert np.all(a <= 1) and np.array_equal(a, b)


def test_moments_follow_recurrence():
    s = OptimState(lr0=0.1, total_steps=10, weight_decay=0.0)
    p = {"x": np.zeros(1)}
    gs = [1.0, -2.0, 0.5]
    m = v = 0.0
    for k, g in enumerate(gs, 1):
        before = p["x"][0]
        adamw_step(s, p, {"x": np.array([g])}, lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        step = (m / (1 - 0.9 ** k)) / (math.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        assert p["x"][0] == pytest.approx(before - 0.1 * step, rel=1e-12)
