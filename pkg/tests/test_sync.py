"""Synchronization-rule tests.

Oracles: a hand-derived scalar BMUF trace, the algebraic reduction of
BMUF to plain averaging at eta=0/zeta=1 (required to hold bit for bit),
the running-mean identity against numpy's mean, and the unrolled
geometric sum behind the EMA recursion.
"""

import numpy as np
import pytest

from deeplstm.model import ModelLayout, xavier_init
from deeplstm.sync import (BmufState, EmaState, MaState, bmuf_step,
                           ema_update, ma_update, model_average)


# ------------------------------------------------------------ model_average

def test_model_average_by_hand():
    avg = model_average([np.array([2.0, 10.0]), np.array([4.0, 20.0])])
    assert np.array_equal(avg, [3.0, 15.0])


def test_model_average_accepts_model_objects():
    layout = ModelLayout(2, (2,), 2)
    a = xavier_init(layout, 0)
    b = xavier_init(layout, 1)
    avg = model_average([a, b])
    assert avg.shape == (layout.param_count,)
    assert np.array_equal(avg, (a.values + b.values) / 2.0)


def test_model_average_is_serial_ascending_sum():
    # must equal a left-to-right accumulation, not a pairwise tree
    rng = np.random.default_rng(0)
    vs = [rng.standard_normal(17) for _ in range(5)]
    acc = vs[0].copy()
    for v in vs[1:]:
        acc += v
    acc /= 5
    assert np.array_equal(model_average(vs), acc)


def test_model_average_errors():
    with pytest.raises(ValueError):
        model_average([])
    with pytest.raises(ValueError):
        model_average([np.zeros(3), np.zeros(4)])


# ------------------------------------------------------------------- bmuf

def test_bmuf_scalar_trace_by_hand():
    # eta=0.9, zeta=1, theta_g starts at 0:
    #   sync 1: theta_bar=1 -> delta=0.9*0+1*(1-0)=1.0,  theta_g=1.0
    #   sync 2: theta_bar=2 -> delta=0.9*1+1*(2-1)=1.9,  theta_g=2.9
    state = BmufState(np.array([0.0]), eta=0.9, zeta=1.0)
    state = bmuf_step(state, np.array([1.0]))
    assert state.theta_g[0] == 1.0
    assert state.delta[0] == 1.0
    state = bmuf_step(state, np.array([2.0]))
    assert state.delta[0] == 1.9
    assert state.theta_g[0] == 2.9


def test_bmuf_reduces_to_model_average_bit_exact():
    rng = np.random.default_rng(1)
    for _ in range(50):
        theta_g = rng.standard_normal(13)
        delta = rng.standard_normal(13)
        workers = [rng.standard_normal(13) for _ in range(4)]
        theta_bar = model_average(workers)
        state = bmuf_step(BmufState(theta_g, delta, eta=0.0, zeta=1.0),
                          theta_bar)
        assert np.array_equal(state.theta_g, theta_bar)


def test_bmuf_fixed_point_is_bit_exact():
    # converged: theta_bar == theta_g and delta == 0 must reproduce the
    # state exactly, for any eta and zeta
    rng = np.random.default_rng(2)
    theta = rng.standard_normal(9)
    for eta, zeta in [(0.9, 1.0), (0.5, 0.7), (0.0, 2.0), (0.99, 1.3)]:
        state = bmuf_step(BmufState(theta.copy(), eta=eta, zeta=zeta),
                          theta.copy())
        assert np.array_equal(state.theta_g, theta)
        assert np.array_equal(state.delta, np.zeros(9))


def test_bmuf_matches_unfactored_recurrence():
    # theta_g' = theta_g + delta' up to float reassociation
    rng = np.random.default_rng(3)
    state = BmufState(rng.standard_normal(11), rng.standard_normal(11),
                      eta=0.7, zeta=1.2)
    theta_bar = rng.standard_normal(11)
    nxt = bmuf_step(state, theta_bar)
    want_delta = 0.7 * state.delta + 1.2 * (theta_bar - state.theta_g)
    assert np.array_equal(nxt.delta, want_delta)
    assert np.allclose(nxt.theta_g, state.theta_g + want_delta,
                       atol=1e-12, rtol=0)


def test_bmuf_validation():
    with pytest.raises(ValueError):
        BmufState(np.zeros(3), eta=1.0)
    with pytest.raises(ValueError):
        BmufState(np.zeros(3), eta=-0.1)
    with pytest.raises(ValueError):
        BmufState(np.zeros(3), zeta=0.0)
    with pytest.raises(ValueError):
        BmufState(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        bmuf_step(BmufState(np.zeros(3)), np.zeros(4))


# --------------------------------------------------------------------- ma

def test_ma_running_mean_by_hand():
    state = MaState(np.zeros(1))
    state = ma_update(state, np.array([2.0]))
    assert state.mean[0] == 2.0 and state.count == 1
    state = ma_update(state, np.array([4.0]))
    assert state.mean[0] == 3.0 and state.count == 2


def test_ma_matches_numpy_mean():
    rng = np.random.default_rng(4)
    vs = rng.standard_normal((30, 7))
    state = MaState(np.zeros(7))
    for i, v in enumerate(vs, 1):
        state = ma_update(state, v)
        assert np.allclose(state.mean, vs[:i].mean(axis=0), atol=1e-13,
                           rtol=0)
    assert state.count == 30


def test_ma_validation():
    with pytest.raises(ValueError):
        MaState(np.ones(3), count=0)  # nonzero mean with no history
    with pytest.raises(ValueError):
        MaState(np.zeros(3), count=-1)
    state = ma_update(MaState(np.zeros(3)), np.zeros(3))
    with pytest.raises(ValueError):
        ma_update(state, np.zeros(4))


# -------------------------------------------------------------------- ema

def test_ema_unrolled_geometric_sum():
    # theta_hat_T = alpha^T theta_0 + (1-alpha) sum_i alpha^(T-1-i) v_i
    rng = np.random.default_rng(5)
    alpha = 0.9
    theta0 = rng.uniform(-1, 1, size=6)
    vs = rng.uniform(-1, 1, size=(100, 6))

    state = EmaState(theta0.copy(), alpha)
    for v in vs:
        state = ema_update(state, v)

    closed = (alpha ** 100) * theta0
    for i in range(100):
        closed = closed + (1 - alpha) * alpha ** (100 - 1 - i) * vs[i]
    assert np.max(np.abs(state.theta_hat - closed)) < 1e-12


def test_ema_alpha_zero_tracks_latest_exactly():
    rng = np.random.default_rng(6)
    state = EmaState(rng.standard_normal(5), 0.0)
    v = rng.standard_normal(5)
    state = ema_update(state, v)
    assert np.array_equal(state.theta_hat, v)


def test_ema_alpha_one_freezes():
    rng = np.random.default_rng(7)
    theta0 = rng.standard_normal(5)
    state = EmaState(theta0.copy(), 1.0)
    for _ in range(3):
        state = ema_update(state, rng.standard_normal(5))
    assert np.array_equal(state.theta_hat, theta0)


def test_ema_validation():
    with pytest.raises(ValueError):
        EmaState(np.zeros(3), 1.5)
    with pytest.raises(ValueError):
        EmaState(np.zeros(3), -0.1)
    with pytest.raises(ValueError):
        EmaState(np.array([np.nan, 0.0]), 0.5)
    with pytest.raises(ValueError):
        ema_update(EmaState(np.zeros(3), 0.5), np.zeros(2))
