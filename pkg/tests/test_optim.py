import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sanpeft.errors import ConfigError, ContractError, NumericError
from sanpeft.optim import ADAM_EPS, lr_at, optimizer_step


def test_sgd_example():
    (p,), _ = optimizer_step("sgd", [np.array(1.0)], [np.array(1.0)], {}, 0.1)
    assert abs(p - 0.9) < 1e-15


@pytest.mark.parametrize("kind", ["adam", "adamw"])
def test_adam_first_step_closed_form(kind):
    g = np.array([0.3, -2.0, 1e-3])
    p0 = np.array([1.0, 2.0, 3.0])
    (p,), state = optimizer_step(kind, [p0], [g], {}, 0.01, [False])
    # bias-corrected m/c1 = g, v/c2 = g^2, so the step is lr * g / (|g| + eps)
    expected = p0 - 0.01 * g / (np.abs(g) + ADAM_EPS)
    assert np.abs(p - expected).max() < 1e-15
    assert np.abs(p - (p0 - 0.01 * np.sign(g))).max() < 1e-7
    assert state["t"] == 1


def test_adamw_decays_only_masked():
    p0 = [np.ones(2), np.ones((2, 2))]
    g = [np.zeros(2), np.zeros((2, 2))]
    (a, b), _ = optimizer_step("adamw", p0, g, {}, 0.1, [False, True])
    assert (a == 1.0).all() and np.allclose(b, 1.0 - 0.1 * 0.01)


def test_zero_grad_null_update():
    p0 = np.array([1.5, -2.0])
    (p,), _ = optimizer_step("sgd", [p0], [np.zeros(2)], {}, 0.1)
    assert (p == p0).all()
    (p,), _ = optimizer_step("adam", [p0], [np.zeros(2)], {}, 0.1)
    assert np.abs(p - p0).max() < 0.1 * ADAM_EPS


def test_non_finite_grads_abort():
    with pytest.raises(NumericError):
        optimizer_step("adam", [np.ones(2)], [np.array([1.0, np.inf])], {}, 0.1)
    with pytest.raises(ConfigError):
        optimizer_step("lion", [np.ones(1)], [np.ones(1)], {}, 0.1)


def test_inputs_not_mutated():
    p0, g = np.ones(3), np.ones(3)
    optimizer_step("adamw", [p0], [g], {}, 0.1)
    assert (p0 == 1).all()


def test_schedule_examples():
    assert lr_at(0, 100, 0.5) == 0.0
    assert lr_at(10, 100, 0.5) == 0.5
    assert abs(lr_at(100, 100, 0.5)) < 1e-12
    assert abs(lr_at(55, 100, 0.5) - 0.5 * (1 + math.cos(math.pi / 2)) / 2) < 1e-12
    with pytest.raises(ContractError):
        lr_at(101, 100, 0.5)
    with pytest.raises(ContractError):
        lr_at(-1, 100, 0.5)


@given(st.integers(2, 500), st.floats(0.0, 0.9), st.floats(1e-5, 1.0))
def test_schedule_shape(total, warm, base):
    lrs = [lr_at(s, total, base, warm) for s in range(total + 1)]
    w = warm * total
    up = [lr for s, lr in enumerate(lrs) if s <= w]
    down = [lr for s, lr in enumerate(lrs) if s >= w]
    assert all(a <= b + 1e-15 for a, b in zip(up, up[1:]))
    assert all(a >= b - 1e-15 for a, b in zip(down, down[1:]))
    assert all(0 <= lr <= base * (1 + 1e-12) for lr in lrs)
    if w > 0:  # continuous where the ramp meets the cosine
        assert abs(lr_at(w * (1 - 1e-13), total, base, warm) - lr_at(w, total, base, warm)) < 1e-12
