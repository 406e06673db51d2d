import numpy as np
import pytest

from dualprompt.optim import Adam, NonFiniteGradientError, adam_step
from dualprompt.tensor_core import Tensor


def scalar(v, grad=True):
    return Tensor(np.array([v]), requires_grad=grad)


def test_zero_gradient_leaves_params_unchanged():
    p = scalar(1.5)
    p.grad = np.zeros(1)
    adam_step({"w": p}, {}, lr=0.1)
    assert p.data[0] == 1.5


def test_one_step_on_square_decreases_magnitude():
    p = scalar(1.0)
    p.grad = 2 * p.data
    adam_step({"w": p}, {}, lr=0.1)
    assert abs(p.data[0]) < 1.0


def test_two_step_trace_on_square():
    # hand-rolled: f(w) = w^2 from w = 1, lr = 0.1, default betas and eps
    p, moments = scalar(1.0), {}
    expected = [0.9000000005, 0.8004122286917927]
    for want in expected:
        p.grad = 2 * p.data
        adam_step({"w": p}, moments, lr=0.1)
        assert p.data[0] == pytest.approx(want, rel=1e-14)
    assert moments["w"].step == 2


def test_frozen_and_gradless_params_skipped():
    frozen, gradless = scalar(1.0, grad=False), scalar(2.0)
    frozen.grad = np.ones(1)
    moments = {}
    adam_step({"a": frozen, "b": gradless}, moments, lr=0.1)
    assert frozen.data[0] == 1.0 and gradless.data[0] == 2.0 and moments == {}


def test_nan_gradient_aborts_with_name():
    p = scalar(1.0)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradientError, match="'w'"):
        adam_step({"w": p}, {}, lr=0.1)


def test_drop_prefix_resets_moments():
    opt = Adam(lr=0.1)
    params = {"e.1.3": scalar(1.0), "g.1": scalar(1.0)}
    for p in params.values():
        p.grad = np.ones(1)
    opt.step(params)
    opt.drop("e.1.")
    assert set(opt.moments) == {"g.1"}
