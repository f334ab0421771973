"""Frame-level training criteria: cross entropy on hard labels, soft-target
(distillation) cross entropy, and their convex combination.

All criteria consume softmax posteriors, average over frames, and return
``(loss, d_logits)`` where ``d_logits`` is the analytic gradient at the
logits that produced those posteriors -- ready to feed into backprop.
Note the distillation loss is a cross entropy, so its minimum over the
student is the teacher's entropy, not zero.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    """Weights for mixing hard-label CE with soft-target distillation,
    plus the distillation temperature."""

    w_hard: float = 0.5
    w_soft: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.w_hard <= 1.0 or not 0.0 <= self.w_soft <= 1.0:
            raise ValueError(
                f"weights must lie in [0, 1], got ({self.w_hard}, {self.w_soft})"
            )
        if abs(self.w_hard + self.w_soft - 1.0) > 1e-9:
            raise ValueError(
                f"weights must sum to 1, got {self.w_hard} + {self.w_soft}"
            )
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


class Targets:
    """Per-frame training targets for one sequence: integer hard labels
    and/or soft target distributions. At least one must be present."""

    __slots__ = ("hard", "soft")

    def __init__(self, hard=None, soft=None):
        if hard is None and soft is None:
            raise ValueError("need hard labels, soft targets, or both")
        if hard is not None:
            hard = np.asarray(hard, dtype=np.int64)
            if hard.ndim != 1:
                raise ValueError(f"hard labels must be 1-D, got shape {hard.shape}")
        if soft is not None:
            soft = np.asarray(soft, dtype=np.float64)
            if soft.ndim != 2:
                raise ValueError(f"soft targets must be 2-D, got shape {soft.shape}")
            if np.any(soft < 0):
                raise ValueError("soft targets must be non-negative")
            if not np.all(np.abs(soft.sum(axis=1) - 1.0) <= 1e-9):
                raise ValueError("soft target rows must sum to 1")
            if hard is not None and hard.shape[0] != soft.shape[0]:
                raise ValueError("hard and soft targets disagree on frame count")
        self.hard = hard
        self.soft = soft

    @property
    def num_frames(self):
        return self.hard.shape[0] if self.hard is not None else self.soft.shape[0]


def _check_posteriors(posteriors):
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(
            f"posteriors must be 2-D (frames x classes), got shape {p.shape}"
        )
    if p.shape[0] == 0:
        raise ValueError("need at least one frame")
    return p


def ce_loss(posteriors, labels):
    """Mean cross entropy of posteriors against integer labels.

    Returns the loss and its gradient at the logits, (p - onehot) / T.
    """
    p = _check_posteriors(posteriors)
    labels = np.asarray(labels)
    t_len, c = p.shape
    if labels.shape != (t_len,):
        raise ValueError(f"labels must have shape ({t_len},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(
            f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]"
        )
    rows = np.arange(t_len)
    with np.errstate(divide="ignore"):
        loss = -np.log(p[rows, labels]).sum() / t_len
    d_logits = p / t_len
    d_logits[rows, labels] -= 1.0 / t_len
    return float(loss), d_logits


def sharpen(posteriors, temperature):
    """Temperature-scale a row-stochastic matrix: normalize p**(1/tau).

    Equivalent to softmax of the underlying logits divided by tau.
    tau = 1 is the identity; tau < 1 sharpens, tau > 1 flattens.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if temperature == 1.0:
        return p.copy()
    # work in log space so tiny posteriors don't underflow before the root
    with np.errstate(divide="ignore"):
        logq = np.log(p) / temperature
    logq -= logq.max(axis=1, keepdims=True)
    q = np.exp(logq)
    q /= q.sum(axis=1, keepdims=True)
    return q


def distill_loss(student_posteriors, teacher_posteriors, temperature=1.0):
    """Mean cross entropy of the student against teacher posteriors, both
    distributions temperature-scaled.

    The gradient is taken at the temperature-scaled logits (z / tau) and
    equals (q_student - q_teacher) / T per frame; at the default
    temperature 1 that is simply the plain logits gradient.
    """
    p_s = _check_posteriors(student_posteriors)
    p_t = np.asarray(teacher_posteriors, dtype=np.float64)
    if p_t.shape != p_s.shape:
        raise ValueError(
            f"teacher posteriors shape {p_t.shape} does not match student {p_s.shape}"
        )
    if np.any(p_t < 0):
        raise ValueError("teacher posteriors must be non-negative")
    if not np.all(np.abs(p_t.sum(axis=1) - 1.0) <= 1e-6):
        raise ValueError("teacher posterior rows must sum to 1")
    t_len = p_s.shape[0]
    q_t = sharpen(p_t, temperature)
    if temperature == 1.0:
        q_s = p_s
        with np.errstate(divide="ignore"):
            log_q_s = np.log(p_s)
    else:
        with np.errstate(divide="ignore"):
            log_q_s = np.log(p_s) / temperature
        log_q_s -= log_q_s.max(axis=1, keepdims=True)
        norm = np.exp(log_q_s).sum(axis=1, keepdims=True)
        log_q_s -= np.log(norm)
        q_s = np.exp(log_q_s)
    # 0 * log(0) = 0 by the usual cross-entropy convention
    terms = np.where(q_t > 0, q_t * log_q_s, 0.0)
    loss = -terms.sum() / t_len
    d_logits = (q_s - q_t) / t_len
    return float(loss), d_logits


def combined_loss(posteriors, targets, cfg=None):
    """Convex mix of hard-label CE and soft-target distillation.

    Degenerate weights reduce bit-exactly to the single active criterion;
    otherwise loss and gradient are the weighted sums of the two parts.
    """
    if cfg is None:
        cfg = LossConfig()
    if cfg.w_hard > 0 and targets.hard is None:
        raise ValueError("w_hard > 0 but targets carry no hard labels")
    if cfg.w_soft > 0 and targets.soft is None:
        raise ValueError("w_soft > 0 but targets carry no soft targets")
    if cfg.w_soft == 0.0:
        return ce_loss(posteriors, targets.hard)
    if cfg.w_hard == 0.0:
        return distill_loss(posteriors, targets.soft, cfg.temperature)
    hard_l, hard_g = ce_loss(posteriors, targets.hard)
    soft_l, soft_g = distill_loss(posteriors, targets.soft, cfg.temperature)
    loss = cfg.w_hard * hard_l + cfg.w_soft * soft_l
    d_logits = cfg.w_hard * hard_g + cfg.w_soft * soft_g
    return loss, d_logits


def frame_error_rate(posteriors, labels):
    """Fraction of frames whose argmax posterior disagrees with the label."""
    p = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(labels)
    if p.ndim != 2 or p.shape[0] != labels.shape[0]:
        raise ValueError("posteriors and labels disagree on frame count")
    if p.shape[0] == 0:
        raise ValueError("need at least one frame")
    return float(np.mean(p.argmax(axis=1) != labels))
