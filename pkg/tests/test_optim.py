import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from context_forge.errors import ContractError
from context_forge.optim import AdamWState, CosineSchedule, adamw_step, lr_at


def reference_adamw(p, grads, lr, wd=0.1, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop AdamW with decoupled decay, for comparison."""
    p = p.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        for i in range(p.size):
            m.flat[i] = b1 * m.flat[i] + (1 - b1) * g.flat[i]
            v.flat[i] = b2 * v.flat[i] + (1 - b2) * g.flat[i] ** 2
            mhat = m.flat[i] / (1 - b1 ** t)
            vhat = v.flat[i] / (1 - b2 ** t)
            p.flat[i] -= lr * wd * p.flat[i]
            p.flat[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return p


def test_adamw_matches_scalar_reference():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    params = {"w": p0.copy()}
    state = AdamWState()
    for g in grads:
        adamw_step(params, {"w": g}, state, 1e-2)
    np.testing.assert_allclose(params["w"], reference_adamw(p0, grads, 1e-2), atol=1e-12)


def test_first_step_moves_each_weight_by_about_lr():
    params = {"w": np.zeros(4)}
    adamw_step(params, {"w": np.array([1.0, -2.0, 3.0, -0.5])}, AdamWState(weight_decay=0.0), 1e-3)
    np.testing.assert_allclose(np.abs(params["w"]), 1e-3, rtol=1e-4)


def test_zero_lr_leaves_parameters_unchanged():
    params = {"w": np.ones(3)}
    adamw_step(params, {"w": np.ones(3)}, AdamWState(), 0.0)
    np.testing.assert_array_equal(params["w"], 1.0)


def test_weight_decay_only_shrinks_without_gradient():
    params = {"w": np.full(2, 2.0), "b": np.full(2, 2.0)}
    grads = {"w": np.zeros(2), "b": None}
    adamw_step(params, grads, AdamWState(weight_decay=0.1), 0.5, decay={"w": True, "b": False})
    np.testing.assert_allclose(params["w"], 2.0 * (1 - 0.05))
    np.testing.assert_array_equal(params["b"], 2.0)


def test_negative_lr_rejected():
    with pytest.raises(ContractError):
        adamw_step({"w": np.ones(1)}, {"w": np.ones(1)}, AdamWState(), -1.0)


def test_schedule_endpoints():
    s = CosineSchedule(base_lr=1e-4, min_lr=1e-6, warmup_steps=10, total_steps=110)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 5) == pytest.approx(5e-5)
    assert lr_at(s, 10) == pytest.approx(1e-4)
    assert lr_at(s, 60) == pytest.approx((1e-4 + 1e-6) / 2)
    assert lr_at(s, 110) == pytest.approx(1e-6)


def test_schedule_out_of_range_rejected():
    s = CosineSchedule(total_steps=5)
    with pytest.raises(ContractError):
        lr_at(s, 6)
    with pytest.raises(ContractError):
        lr_at(s, -1)
    with pytest.raises(ContractError):
        CosineSchedule(base_lr=1e-4, min_lr=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 50), st.integers(1, 200), st.floats(1e-6, 1.0), st.floats(0.0, 1.0))
def test_schedule_is_bounded_and_monotone_after_warmup(warmup, extra, base, frac):
    total = warmup + extra
    s = CosineSchedule(base_lr=base, min_lr=base * frac * 0.5, warmup_steps=warmup, total_steps=total)
    values = [lr_at(s, t) for t in range(total + 1)]
    assert all(0.0 <= v <= base * (1 + 1e-12) for v in values)
    after = values[warmup:]
    assert all(a >= b - 1e-15 for a, b in zip(after, after[1:]))
