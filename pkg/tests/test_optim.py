import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopcon.errors import DimensionError
from koopcon.optim import Adam, AdamState, adam_step
from koopcon.tensor import Tensor


def test_first_step_moves_by_lr_times_sign():
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    (new,), state = adam_step([np.zeros(4)], [g], AdamState(learning_rate=1e-3))
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert np.allclose(new, -1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-18)
    assert np.allclose(new, -1e-3 * np.sign(g), rtol=1e-5)
    assert state.step_count == 1


def test_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    (new,), state = adam_step([p], [np.zeros(2)], AdamState())
    assert np.array_equal(new, p)
    assert state.step_count == 1


def test_two_fresh_runs_identical():
    rng = np.random.default_rng(0)
    p, g1, g2 = rng.normal(size=(3, 5))

    def run():
        state = AdamState()
        (q,), state = adam_step([p], [g1], state)
        (q,), state = adam_step([q], [g2], state)
        return q

    assert run().tobytes() == run().tobytes()


def test_bias_correction_second_step():
    g = np.array([2.0])
    state = AdamState(learning_rate=0.1)
    (p,), state = adam_step([np.zeros(1)], [g], state)
    (p,), state = adam_step([p], [g], state)
    # constant gradient: bias-corrected moments equal g and g^2 exactly
    assert p[0] == pytest.approx(-0.2, rel=1e-7)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step([np.zeros(3)], [np.zeros(4)], AdamState())
    with pytest.raises(DimensionError):
        adam_step([np.zeros(3)], [], AdamState())


def test_state_tracks_fixed_parameter_list():
    state = AdamState()
    adam_step([np.zeros(2)], [np.ones(2)], state)
    with pytest.raises(DimensionError):
        adam_step([np.zeros(2), np.zeros(2)], [np.ones(2), np.ones(2)], state)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda x: abs(x) > 1e-3), st.floats(1e-5, 1e-1))
def test_first_step_magnitude_bounded_by_lr(g, lr):
    (new,), _ = adam_step([np.zeros(1)], [np.array([g])], AdamState(learning_rate=lr))
    assert abs(new[0]) <= lr * (1 + 1e-12)
    assert np.sign(new[0]) == -np.sign(g)


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ((x - 1.0) ** 2).sum().backward()
        opt.step()
    assert np.allclose(x.data, 1.0, atol=1e-3)


def test_missing_grad_treated_as_zero():
    a, b = Tensor(1.0, requires_grad=True), Tensor(1.0, requires_grad=True)
    opt = Adam([a, b], lr=0.5)
    (a * 2.0).backward()
    opt.step()
    assert a.data < 1.0 and b.data == 1.0
