import math

import numpy as np
import pytest

from library.errors import ConfigurationError, TrainingDivergedError
from library.nn import Parameter
from library.optim import Adam, NewBobState, Sgd, build_optimizer, clip_grad_norm, newbob_update


def _params(*values):
    return {f"p{k}": Parameter(f"p{k}", np.array(v, dtype=np.float64)) for k, v in enumerate(values)}


def test_sgd_step():
    params = _params([1.0, -2.0])
    params["p0"].grad[:] = [0.5, -1.0]
    optimizer = Sgd(params, lr=0.1)
    optimizer.step()
    np.testing.assert_allclose(params["p0"].value, [0.95, -1.9])
    assert params["p0"].version == 1


def test_adam_zero_gradient_leaves_parameters():
    params = _params([1.0, 2.0])
    optimizer = Adam(params, lr=0.1)
    for _ in range(3):
        optimizer.step()
    np.testing.assert_array_equal(params["p0"].value, [1.0, 2.0])


def test_adam_first_step_moves_by_lr():
    params = _params([0.0, 0.0])
    params["p0"].grad[:] = [4.0, -0.01]
    Adam(params, lr=0.1).step()
    np.testing.assert_allclose(params["p0"].value, [-0.1, 0.1], rtol=1e-5)


def test_adam_minimizes_quadratic_bowl():
    target = np.array([1.5, -0.5, 0.25])
    params = _params([0.0, 0.0, 0.0])
    optimizer = Adam(params, lr=0.05)
    for _ in range(500):
        optimizer.zero_grad()
        params["p0"].grad[:] = params["p0"].value - target
        optimizer.step()
    np.testing.assert_allclose(params["p0"].value, target, atol=1e-6)


def test_clip_grad_norm():
    params = _params([0.0], [0.0])
    params["p0"].grad[:] = 3.0
    params["p1"].grad[:] = 4.0
    assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
    assert params["p0"].grad[0] == pytest.approx(0.6)
    assert params["p1"].grad[0] == pytest.approx(0.8)

    assert clip_grad_norm(params, 10.0) == pytest.approx(1.0)
    assert params["p1"].grad[0] == pytest.approx(0.8)


def test_non_finite_gradient_stops_training():
    params = _params([1.0])
    params["p0"].grad[:] = np.nan
    with pytest.raises(TrainingDivergedError):
        Sgd(params, lr=0.1).step()
    assert params["p0"].value[0] == 1.0


def test_build_optimizer():
    params = _params([0.0])
    assert build_optimizer("sgd", params).lr == 0.05
    assert build_optimizer("adam", params).lr == 1e-3
    assert build_optimizer("adam", params, 0.01).lr == 0.01
    with pytest.raises(ConfigurationError):
        build_optimizer("rmsprop", params)
    with pytest.raises(ConfigurationError):
        build_optimizer("sgd", params, 0.0)


def test_newbob_decays_when_cv_stalls():
    state = NewBobState(current_lr=0.1)
    assert newbob_update(state, 10.0, 0.8) == 0.1
    assert newbob_update(state, 10.0, 0.8) == pytest.approx(0.08)
    assert state.decay_triggered


def test_newbob_latches():
    state = NewBobState(current_lr=0.1)
    rates = [newbob_update(state, loss, 0.8) for loss in (10.0, 9.99, 5.0, 1.0)]
    assert rates == pytest.approx([0.1, 0.08, 0.064, 0.0512])
    assert [epoch for epoch, _, _ in state.history] == [1, 2, 3, 4]


def test_newbob_never_decays_while_improving():
    state = NewBobState(current_lr=0.1)
    for loss in (10.0, 9.0, 8.0, 7.0, 6.0):
        assert newbob_update(state, loss, 0.25) == 0.1
    assert not state.decay_triggered
    assert state.best_cv_loss == 6.0


def test_newbob_relative_threshold():
    state = NewBobState(current_lr=1.0)
    newbob_update(state, 100.0, 0.5)
    assert newbob_update(state, 99.0, 0.5) == 1.0
    assert newbob_update(state, 98.6, 0.5) == 0.5


def test_newbob_rejects_bad_input():
    with pytest.raises(TrainingDivergedError):
        newbob_update(NewBobState(current_lr=0.1), math.nan, 0.8)
    with pytest.raises(ConfigurationError):
        newbob_update(NewBobState(current_lr=0.1), 1.0, 1.0)


def test_newbob_adam_factor():
    state = NewBobState(current_lr=1e-3)
    newbob_update(state, 2.0, 0.25)
    assert newbob_update(state, 2.0, 0.25) == pytest.approx(2.5e-4)
