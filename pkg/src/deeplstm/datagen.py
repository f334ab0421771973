"""Synthetic Gaussian-HMM corpora with known structure, JSON-lines dataset
and lattice IO, and synthetic lattice construction for sequence training.

The generator samples state chains from a Markov transition matrix and
emits diagonal-Gaussian features per state, so the true frame labels and a
Bayes-optimal reference classifier exist by construction. Class
separability is a knob, which makes "more capacity should help" style
comparisons meaningful at desk scale.
"""

import json
from dataclasses import dataclass

import numpy as np

from .model import forward, stack_frames
from .smbr import Lattice


class DatasetFormatError(Exception):
    """A dataset or lattice file could not be parsed."""


class Utterance:
    """One sequence: features, optional hard labels, optional soft targets.

    Hard labels may be absent on derived views (e.g. distillation inputs);
    persisted datasets always carry them.
    """

    __slots__ = ("id", "frames", "labels", "soft")

    def __init__(self, utt_id, frames, labels=None, soft=None):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"utterance {utt_id}: frames must be finite")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (frames.shape[0],):
                raise ValueError(
                    f"utterance {utt_id}: {labels.size} labels for "
                    f"{frames.shape[0]} frames"
                )
            if labels.size and labels.min() < 0:
                raise ValueError(f"utterance {utt_id}: negative label")
        if soft is not None:
            soft = np.asarray(soft, dtype=np.float64)
            if soft.ndim != 2 or soft.shape[0] != frames.shape[0]:
                raise ValueError(
                    f"utterance {utt_id}: soft targets shape {soft.shape} does "
                    f"not cover {frames.shape[0]} frames"
                )
        self.id = str(utt_id)
        self.frames = frames
        self.labels = labels
        self.soft = soft

    @property
    def num_frames(self):
        return self.frames.shape[0]


class Dataset:
    """Immutable ordered collection of utterances."""

    __slots__ = ("utterances",)

    def __init__(self, utterances):
        self.utterances = tuple(utterances)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def num_classes(self):
        """Smallest class count covering every hard label."""
        top = -1
        for u in self.utterances:
            if u.labels is not None and u.labels.size:
                top = max(top, int(u.labels.max()))
        if top < 0:
            raise ValueError("dataset has no hard labels")
        return top + 1


@dataclass(frozen=True, eq=False)
class HmmGenConfig:
    """Generator parameters: chain size, emission Gaussians, utterance
    length range, corpus size, and seed."""

    num_states: int
    feature_dim: int
    transition: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    len_range: tuple
    count: int
    seed: int

    def __post_init__(self):
        s, d = self.num_states, self.feature_dim
        if s < 1 or d < 1:
            raise ValueError("num_states and feature_dim must be >= 1")
        trans = np.asarray(self.transition, dtype=np.float64)
        means = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if trans.shape != (s, s):
            raise ValueError(f"transition matrix must be {s}x{s}, got {trans.shape}")
        if np.any(trans < 0) or np.any(np.abs(trans.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition rows must be distributions summing to 1")
        if means.shape != (s, d):
            raise ValueError(f"means must be {s}x{d}, got {means.shape}")
        if var.shape != (s, d) or np.any(var <= 0):
            raise ValueError("variances must be positive and shaped like means")
        lo, hi = self.len_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad utterance length range {self.len_range}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        object.__setattr__(self, "transition", trans)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "len_range", (int(lo), int(hi)))


def make_hmm_config(num_states=24, feature_dim=8, count=2000, len_range=(20, 60),
                    separation=2.0, self_loop=0.8, seed=0):
    """Assemble a generator config: self-loop-heavy transitions, random
    Gaussian state means scaled by ``separation``, unit variances.

    Smaller separation means more class overlap and a harder task.
    """
    s = num_states
    if s == 1:
        trans = np.ones((1, 1))
    else:
        if not 0.0 <= self_loop <= 1.0:
            raise ValueError(f"self_loop must lie in [0, 1], got {self_loop}")
        trans = np.full((s, s), (1.0 - self_loop) / (s - 1))
        np.fill_diagonal(trans, self_loop)
    means = separation * np.random.default_rng([seed, 0]).standard_normal(
        (s, feature_dim)
    )
    return HmmGenConfig(s, feature_dim, trans, means, np.ones((s, feature_dim)),
                        len_range, count, seed)


def generate_hmm_dataset(cfg):
    """Sample a corpus: per utterance, a Markov state chain (uniform start)
    and Gaussian features for each state. Deterministic per seed."""
    rng = np.random.default_rng([cfg.seed, 1])
    cum = np.cumsum(cfg.transition, axis=1)
    std = np.sqrt(cfg.variances)
    lo, hi = cfg.len_range
    utts = []
    for i in range(cfg.count):
        t_len = int(rng.integers(lo, hi + 1))
        states = np.empty(t_len, dtype=np.int64)
        s = int(rng.integers(cfg.num_states))
        states[0] = s
        draws = rng.random(t_len - 1)
        for t in range(1, t_len):
            s = min(int(np.searchsorted(cum[s], draws[t - 1], side="right")),
                    cfg.num_states - 1)
            states[t] = s
        frames = cfg.means[states] + std[states] * rng.standard_normal(
            (t_len, cfg.feature_dim)
        )
        utts.append(Utterance(f"utt{i:05d}", frames, states))
    return Dataset(utts)


def stack_dataset(dataset, k):
    """Stack k consecutive raw frames into super frames; each super frame
    takes the label of its center raw frame. Soft targets (if any) are not
    carried over -- they belong to the stacked representation."""
    out = []
    for u in dataset:
        frames = stack_frames(u.frames, k)
        if frames.shape[0] == 0:
            raise ValueError(
                f"utterance {u.id} has {u.num_frames} frames, too short to "
                f"stack by {k}"
            )
        labels = None
        if u.labels is not None:
            labels = u.labels[np.arange(frames.shape[0]) * k + k // 2]
        out.append(Utterance(u.id, frames, labels))
    return Dataset(out)


class SmbrDataset:
    """Utterances paired one-to-one with their hypothesis lattices."""

    __slots__ = ("dataset", "lattices")

    def __init__(self, dataset, lattices):
        lattices = tuple(lattices)
        if len(dataset) != len(lattices):
            raise ValueError(
                f"{len(dataset)} utterances but {len(lattices)} lattices"
            )
        for u, lat in zip(dataset, lattices):
            if lat.num_frames != u.num_frames:
                raise ValueError(
                    f"utterance {u.id}: {u.num_frames} frames but lattice "
                    f"covers {lat.num_frames}"
                )
        self.dataset = dataset
        self.lattices = lattices

    def __len__(self):
        return len(self.lattices)

    def __iter__(self):
        return iter(zip(self.dataset, self.lattices))

    def __getitem__(self, i):
        return self.dataset[i], self.lattices[i]


def make_lattices(dataset, model, alternatives_per_frame, seed, num_classes=None):
    """Build synthetic hypothesis lattices: per frame, the reference state
    plus ``alternatives_per_frame - 1`` distinct competitors sampled from
    the model's posterior (uniformly when no model is given). All lm scores
    are zero, and the reference path is always present."""
    k = alternatives_per_frame
    if k < 1:
        raise ValueError(f"need at least one arc per frame, got {k}")
    if model is not None:
        c = model.layout.num_classes
    elif num_classes is not None:
        c = int(num_classes)
    else:
        c = dataset.num_classes()
    if k > c:
        raise ValueError(f"cannot pick {k} distinct states from {c} classes")

    rng = np.random.default_rng(seed)
    lats = []
    for u in dataset:
        if u.labels is None:
            raise ValueError(f"utterance {u.id} has no reference labels")
        post = forward(model, u.frames).posteriors if model is not None else None
        frames_arcs = []
        for t in range(u.num_frames):
            ref = int(u.labels[t])
            if ref >= c:
                raise ValueError(f"utterance {u.id}: label {ref} >= {c} classes")
            if k == 1:
                states = np.array([ref], dtype=np.int64)
            else:
                p = np.full(c, 1.0 / c) if post is None else post[t] + 1e-12
                p = p.copy()
                p[ref] = 0.0
                p /= p.sum()
                alts = rng.choice(c, size=k - 1, replace=False, p=p)
                states = np.concatenate(([ref], alts)).astype(np.int64)
            frames_arcs.append((states, np.zeros(states.size)))
        lats.append(Lattice(frames_arcs, u.labels))
    return SmbrDataset(dataset, lats)


def save_dataset(dataset, path):
    """Write one JSON object per utterance: {"id", "frames", "labels"}.
    Floats round-trip bit-exactly through decimal shortest form."""
    with open(path, "w") as f:
        for u in dataset:
            if u.labels is None:
                raise ValueError(f"utterance {u.id} has no labels; cannot persist")
            rec = {"id": u.id, "frames": u.frames.tolist(),
                   "labels": u.labels.tolist()}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path):
    """Inverse of :func:`save_dataset`; empty file gives an empty dataset."""
    utts = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {ln}: {exc}") from exc
            if not isinstance(obj, dict) or set(obj) != {"id", "frames", "labels"}:
                raise DatasetFormatError(
                    f"{path}: line {ln}: expected an object with keys "
                    f"id/frames/labels"
                )
            try:
                utts.append(Utterance(obj["id"], obj["frames"], obj["labels"]))
            except (ValueError, TypeError) as exc:
                raise DatasetFormatError(f"{path}: line {ln}: {exc}") from exc
    return Dataset(utts)


def save_lattices(lattices, path):
    """Write one JSON object per lattice: {"frames": [[{"s", "lm"}, ...],
    ...], "ref": [...]}. Accepts an utterance-lattice pairing too."""
    if isinstance(lattices, SmbrDataset):
        lattices = lattices.lattices
    with open(path, "w") as f:
        for lat in lattices:
            rec = {
                "frames": [
                    [{"s": int(s), "lm": float(l)} for s, l in zip(states, lm)]
                    for states, lm in lat.arcs
                ],
                "ref": lat.ref.tolist(),
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_lattices(path):
    """Inverse of :func:`save_lattices`; returns a tuple of lattices."""
    lats = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {ln}: {exc}") from exc
            if not isinstance(obj, dict) or set(obj) != {"frames", "ref"}:
                raise DatasetFormatError(
                    f"{path}: line {ln}: expected an object with keys frames/ref"
                )
            try:
                arcs = []
                for frame in obj["frames"]:
                    states = [a["s"] for a in frame]
                    lm = [a["lm"] for a in frame]
                    if any(set(a) != {"s", "lm"} for a in frame):
                        raise ValueError("arc objects must have keys s/lm")
                    arcs.append((states, lm))
                lats.append(Lattice(arcs, obj["ref"]))
            except (ValueError, TypeError, KeyError) as exc:
                raise DatasetFormatError(f"{path}: line {ln}: {exc}") from exc
    return tuple(lats)
