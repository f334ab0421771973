"""State-level minimum Bayes-risk criterion on frame-layered lattices.

A lattice here is a stack of frame layers, each holding one or more arcs
(a state id plus a language-model score), with full connectivity between
consecutive layers: a path picks exactly one arc per frame. Path scores
combine scaled acoustic log posteriors with the arc lm scores; the
criterion is the expected number of frames on which the chosen path agrees
with the reference, and training ascends it.

Includes a brute-force path-enumeration oracle for small lattices so the
forward-backward implementation can be cross-checked exactly.
"""

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SmbrConfig:
    """Acoustic scale applied to log posteriors in path scores."""

    kappa: float = 1.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")


class Lattice:
    """Frame-layered hypothesis set with a frame-level reference.

    ``arcs[t]`` is a pair of equal-length arrays ``(states, lm_scores)``
    holding the competing states for frame t; consecutive layers are fully
    connected.
    """

    __slots__ = ("arcs", "ref")

    def __init__(self, arcs, ref):
        if len(arcs) == 0:
            raise ValueError("lattice must have at least one frame")
        packed = []
        for t, frame in enumerate(arcs):
            states, lm = frame
            states = np.asarray(states, dtype=np.int64)
            lm = np.asarray(lm, dtype=np.float64)
            if states.ndim != 1 or states.size == 0:
                raise ValueError(f"frame {t} must hold at least one arc")
            if lm.shape != states.shape:
                raise ValueError(
                    f"frame {t}: {states.size} states but {lm.size} lm scores"
                )
            if np.any(states < 0):
                raise ValueError(f"frame {t}: negative state id")
            packed.append((states, lm))
        ref = np.asarray(ref, dtype=np.int64)
        if ref.shape != (len(packed),):
            raise ValueError(
                f"reference length {ref.size} does not match {len(packed)} frames"
            )
        self.arcs = tuple(packed)
        self.ref = ref

    @property
    def num_frames(self):
        return len(self.arcs)

    def max_state(self):
        return max(int(states.max()) for states, _ in self.arcs)


def _check_log_posteriors(lat, frame_log_posteriors):
    logp = np.asarray(frame_log_posteriors, dtype=np.float64)
    if logp.ndim != 2:
        raise ValueError(f"log posteriors must be 2-D, got shape {logp.shape}")
    if logp.shape[0] != lat.num_frames:
        raise ValueError(
            f"log posteriors cover {logp.shape[0]} frames, lattice has "
            f"{lat.num_frames}"
        )
    if not np.all(np.isfinite(logp)):
        raise ValueError("log posteriors must be finite")
    if lat.max_state() >= logp.shape[1]:
        raise ValueError(
            f"lattice state {lat.max_state()} out of range for "
            f"{logp.shape[1]} classes"
        )
    return logp


def _arc_weights(lat, logp, kappa):
    """Per-frame arc scores: kappa * log posterior of the arc state + lm."""
    return [kappa * logp[t, states] + lm for t, (states, lm) in enumerate(lat.arcs)]


def _logsumexp(v):
    m = v.max()
    return m + np.log(np.exp(v - m).sum())


def lattice_forward_backward(lat, frame_log_posteriors, cfg=None):
    """Arc occupation posteriors gamma(t, arc) by log-space forward-backward.

    alpha(t, a) = w(t, a) + LSE_b alpha(t-1, b) over the fully connected
    previous layer; beta symmetrically from the end; gamma = exp(alpha +
    beta - log Z). Returns a list of per-frame gamma arrays aligned with
    ``lat.arcs``.
    """
    if cfg is None:
        cfg = SmbrConfig()
    logp = _check_log_posteriors(lat, frame_log_posteriors)
    w = _arc_weights(lat, logp, cfg.kappa)
    t_len = lat.num_frames

    alpha = [None] * t_len
    alpha[0] = w[0]
    for t in range(1, t_len):
        alpha[t] = w[t] + _logsumexp(alpha[t - 1])
    # beta(t, a): total score of all suffixes leaving frame t; identical for
    # every arc of the layer because connectivity is complete
    beta = np.zeros(t_len)
    for t in range(t_len - 2, -1, -1):
        beta[t] = _logsumexp(w[t + 1] + beta[t + 1])
    log_z = _logsumexp(alpha[t_len - 1])
    out = []
    for t in range(t_len):
        g = np.exp(alpha[t] + beta[t] - log_z)
        # every path crosses exactly one arc per frame, so each layer's
        # occupations sum to 1; renormalizing enforces that invariant
        # exactly (a one-arc layer gets gamma = 1.0, not 1 +- 1 ulp)
        out.append(g / g.sum())
    return out


def smbr_loss_and_grad(lat, frame_log_posteriors, cfg=None):
    """Expected path accuracy F and its gradient in the log posteriors.

    A path's accuracy is the number of frames where its arc state matches
    the reference; F is the expectation under the path posterior. The
    gradient at (t, s) is kappa * gamma(t, s) * (Abar(t, s) - F), where
    Abar is the mean accuracy of paths through state s at frame t. With
    complete inter-layer connectivity the path posterior factorizes over
    frames, so Abar(t, a) decomposes into the arc's own accuracy plus the
    expected accuracy of all other frames.

    Returns ``(F, grad)`` with grad shaped like the log posteriors; rows
    sum to zero.
    """
    if cfg is None:
        cfg = SmbrConfig()
    logp = _check_log_posteriors(lat, frame_log_posteriors)
    gamma = lattice_forward_backward(lat, logp, cfg)
    t_len = lat.num_frames

    acc = [(states == lat.ref[t]).astype(np.float64)
           for t, (states, _) in enumerate(lat.arcs)]
    # expected accuracy contributed by each frame, and the total
    frame_exp = np.array([g @ a for g, a in zip(gamma, acc)])
    total = float(frame_exp.sum())

    grad = np.zeros_like(logp)
    for t, (states, _) in enumerate(lat.arcs):
        # Abar(t, a) - F = acc(t, a) - E[acc of frame t]
        contrib = cfg.kappa * gamma[t] * (acc[t] - frame_exp[t])
        np.add.at(grad[t], states, contrib)
    return total, grad


def smbr_by_enumeration(lat, frame_log_posteriors, cfg=None):
    """Brute-force oracle: expected accuracy and gradient by enumerating
    every path. Exponential in the frame count; intended for T <= 10."""
    if cfg is None:
        cfg = SmbrConfig()
    logp = _check_log_posteriors(lat, frame_log_posteriors)
    w = _arc_weights(lat, logp, cfg.kappa)
    t_len = lat.num_frames

    idx = np.array(
        list(itertools.product(*[range(states.size) for states, _ in lat.arcs])),
        dtype=np.int64,
    )
    scores = np.zeros(idx.shape[0])
    acc = np.zeros(idx.shape[0])
    for t, (states, _) in enumerate(lat.arcs):
        scores += w[t][idx[:, t]]
        acc += (states[idx[:, t]] == lat.ref[t]).astype(np.float64)
    scores -= scores.max()
    p = np.exp(scores)
    p /= p.sum()
    total = float(p @ acc)

    grad = np.zeros_like(logp)
    for t, (states, _) in enumerate(lat.arcs):
        np.add.at(grad[t], states[idx[:, t]], cfg.kappa * p * (acc - total))
    return total, grad
