import numpy as np
import pytest

from pingo.optim import AdamState, MissingGradientError, adam_step
from pingo.tensor import Tensor


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Textbook Adam written out step by step."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        g = g + wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def test_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    adam_step([p], AdamState(lr=0.1, eps=0.0))
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9])


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_matches_reference_over_many_steps(wd):
    rng = np.random.default_rng(0)
    theta0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(25)]
    p = Tensor(theta0.copy(), True)
    state = AdamState(lr=0.01, weight_decay=wd)
    for g in grads:
        p.grad = g.copy()
        adam_step([p], state)
    np.testing.assert_allclose(p.data, reference_adam(theta0, grads, 0.01, wd=wd), rtol=1e-12)
    assert state.step_count == 25


def test_minimises_a_quadratic():
    p = Tensor(np.array([5.0, -3.0]), True)
    state = AdamState(lr=0.1)
    for _ in range(500):
        loss = (p * p).sum()
        loss.backward()
        adam_step([p], state)
    assert np.abs(p.data).max() < 1e-2


def test_gradients_zeroed_after_step():
    p = Tensor(np.ones(2), True)
    p.grad = np.ones(2)
    adam_step([p], AdamState())
    assert not np.any(p.grad)


def test_missing_gradient_names_parameter():
    a = Tensor(np.ones(2), True, "layer.weight")
    b = Tensor(np.ones(2), True, "layer.bias")
    a.grad = np.ones(2)
    with pytest.raises(MissingGradientError, match=r"1 \(layer.bias\)"):
        adam_step([a, b], AdamState())


def test_parameter_count_change_is_rejected():
    a = Tensor(np.ones(2), True)
    a.grad = np.ones(2)
    state = AdamState()
    adam_step([a], state)
    b = Tensor(np.ones(2), True)
    a.grad, b.grad = np.ones(2), np.ones(2)
    with pytest.raises(ValueError):
        adam_step([a, b], state)


def test_negative_lr_rejected():
    with pytest.raises(ValueError):
        AdamState(lr=-1.0)
