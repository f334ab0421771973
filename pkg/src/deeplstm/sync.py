"""Synchronization-time parameter aggregation: model averaging, blockwise
model-update filtering (BMUF), running moving average, and exponential
moving average of weights.

All operations are pure state transitions on flat float64 vectors. Sums
over workers always run in ascending worker-index order so results are
bit-reproducible and interchangeable with the distributed reduction.
"""

import numpy as np


def _as_vector(x):
    if hasattr(x, "values") and hasattr(x, "layout"):
        return x.values, x.layout
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a flat vector, got shape {v.shape}")
    return v, None


def model_average(models):
    """Element-wise mean of equally shaped parameter vectors.

    Accepts model objects or plain flat vectors. Summation runs serially
    in list order (ascending worker index), matching the distributed
    reduction bit for bit.
    """
    if len(models) == 0:
        raise ValueError("cannot average zero models")
    first, layout0 = _as_vector(models[0])
    acc = first.astype(np.float64, copy=True)
    for m in models[1:]:
        v, layout = _as_vector(m)
        if layout0 is not None and layout is not None and layout != layout0:
            raise ValueError("models have mismatched layouts")
        if v.size != acc.size:
            raise ValueError(
                f"parameter length mismatch: {v.size} vs {acc.size}"
            )
        acc += v
    acc /= len(models)
    return acc


class BmufState:
    """Global model plus its filtered update for blockwise model-update
    filtering: delta' = eta*delta + zeta*(theta_bar - theta_g)."""

    __slots__ = ("theta_g", "delta", "eta", "zeta")

    def __init__(self, theta_g, delta=None, eta=0.9, zeta=1.0):
        theta_g = np.asarray(theta_g, dtype=np.float64)
        if delta is None:
            delta = np.zeros_like(theta_g)
        delta = np.asarray(delta, dtype=np.float64)
        if theta_g.shape != delta.shape or theta_g.ndim != 1:
            raise ValueError("theta_g and delta must be flat vectors of equal length")
        if not 0.0 <= eta < 1.0:
            raise ValueError(f"block momentum must lie in [0, 1), got {eta}")
        if zeta <= 0.0:
            raise ValueError(f"block learning rate must be > 0, got {zeta}")
        self.theta_g = theta_g
        self.delta = delta
        self.eta = float(eta)
        self.zeta = float(zeta)


def bmuf_step(state, theta_bar):
    """One BMUF synchronization: filter the averaged-model update through
    block momentum, then advance the global model.

    theta_g' = theta_g + delta' with delta' = eta*delta + zeta*(theta_bar -
    theta_g). The update is grouped as theta_bar + ((1 - zeta)*(theta_g -
    theta_bar) + eta*delta) -- algebraically the same, but it makes eta=0,
    zeta=1 return theta_bar itself (plain model averaging, to the bit) and
    keeps a converged state exactly fixed.
    """
    theta_bar = np.asarray(theta_bar, dtype=np.float64)
    if theta_bar.shape != state.theta_g.shape:
        raise ValueError(
            f"averaged model length {theta_bar.size} does not match state "
            f"length {state.theta_g.size}"
        )
    delta = state.eta * state.delta + state.zeta * (theta_bar - state.theta_g)
    theta_g = theta_bar + (
        (1.0 - state.zeta) * (state.theta_g - theta_bar) + state.eta * state.delta
    )
    return BmufState(theta_g, delta, state.eta, state.zeta)


class MaState:
    """Running mean of synchronized global models."""

    __slots__ = ("mean", "count")

    def __init__(self, mean, count=0):
        mean = np.asarray(mean, dtype=np.float64)
        if mean.ndim != 1:
            raise ValueError("mean must be a flat vector")
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        if count == 0 and np.any(mean != 0.0):
            raise ValueError("a zero-count state must hold a zero mean")
        self.mean = mean
        self.count = int(count)


def ma_update(state, theta_g_t):
    """Fold one more global model into the running mean."""
    v = np.asarray(theta_g_t, dtype=np.float64)
    if state.count > 0 and v.shape != state.mean.shape:
        raise ValueError("vector length does not match moving-average state")
    count = state.count + 1
    if state.count == 0:
        return MaState(v.copy(), 1)
    mean = state.mean + (v - state.mean) / count
    return MaState(mean, count)


class EmaState:
    """Exponentially weighted average of synchronized global models.

    Tracked on the side during training and read only at export time; the
    weight on older models decays geometrically with age.
    """

    __slots__ = ("theta_hat", "alpha")

    def __init__(self, theta_hat, alpha):
        theta_hat = np.asarray(theta_hat, dtype=np.float64)
        if theta_hat.ndim != 1:
            raise ValueError("theta_hat must be a flat vector")
        if not np.all(np.isfinite(theta_hat)):
            raise ValueError("theta_hat must be finite")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"exponential updating rate must lie in [0, 1], got {alpha}")
        self.theta_hat = theta_hat
        self.alpha = float(alpha)


def ema_update(state, theta_g_t):
    """theta_hat' = alpha*theta_hat + (1 - alpha)*theta_g_t.

    alpha = 0 tracks the latest model exactly; alpha = 1 freezes the state.
    """
    v = np.asarray(theta_g_t, dtype=np.float64)
    if v.shape != state.theta_hat.shape:
        raise ValueError("vector length does not match EMA state")
    theta_hat = state.alpha * state.theta_hat + (1.0 - state.alpha) * v
    return EmaState(theta_hat, state.alpha)
