"""End-to-end training procedures: synchronous data-parallel SGD with
BMUF or plain model averaging, EMA weight tracking, layer-wise deepening,
distillation, sequence-criterion fine-tuning, and evaluation.

Concurrency model: one thread per worker plus the orchestrating caller
thread. Workers own disjoint data splits and a replica of the
synchronization state; all cross-worker traffic flows through the
allreduce mesh, and every synchronization is a full barrier. Because the
averaged model and the strategy arithmetic are bit-identical on every
worker, the post-sync global model needs no broadcast -- each worker
recomputes it. The orchestrator alone evaluates, tracks the EMA model,
appends metrics, and steers the learning rate.
"""

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .allreduce import InProcessMesh, mesh_allreduce, partition
from .datagen import Dataset, Utterance
from .losses import LossConfig, Targets, ce_loss, combined_loss
from .model import (ClipConfig, Gradients, ModelLayout, ModelParams, backward,
                    deepen, forward, log_softmax, xavier_init)
from .smbr import SmbrConfig, smbr_loss_and_grad
from .sync import BmufState, EmaState, bmuf_step, ema_update

log = logging.getLogger("deeplstm.training")

MA = "ma"
BMUF = "bmuf"


class TrainingAborted(Exception):
    """A run could not finish; whatever metrics were recorded up to the
    failure are attached."""

    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


@dataclass(frozen=True)
class TrainConfig:
    """Everything a parallel run needs besides the data."""

    layout: ModelLayout
    workers: int = 8
    epochs: int = 1
    mini_batch: int = 4
    lr: float = 0.1
    momentum: float = 0.9
    sync_period: int = 1
    strategy: str = BMUF
    bmuf_eta: float = 0.9
    bmuf_zeta: float = 1.0
    ema_alpha: float = 0.99  # None disables EMA tracking entirely
    clip: ClipConfig = field(default_factory=ClipConfig)
    loss: LossConfig = field(default_factory=lambda: LossConfig(1.0, 0.0))
    seed: int = 0
    lr_halving: bool = True
    timeout: float = 120.0

    def __post_init__(self):
        if self.workers < 1 or self.epochs < 1 or self.mini_batch < 1 \
                or self.sync_period < 1:
            raise ValueError("workers, epochs, mini_batch and sync_period "
                             "must all be >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.strategy not in (MA, BMUF):
            raise ValueError(f"strategy must be '{MA}' or '{BMUF}', "
                             f"got {self.strategy!r}")
        if not 0.0 <= self.bmuf_eta < 1.0:
            raise ValueError(f"bmuf_eta must lie in [0, 1), got {self.bmuf_eta}")
        if self.bmuf_zeta <= 0:
            raise ValueError(f"bmuf_zeta must be > 0, got {self.bmuf_zeta}")
        if self.ema_alpha is not None and not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must lie in [0, 1] or be None, "
                             f"got {self.ema_alpha}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")


@dataclass(frozen=True)
class MetricsRow:
    period: int
    model: str  # "global" or "ema"
    train_loss: float
    val_loss: float
    val_fer: float
    wall_ms: float


class Metrics:
    """Per-sync-period training records, CSV-serializable."""

    COLUMNS = ("period", "model", "train_loss", "val_loss", "val_fer", "wall_ms")

    def __init__(self, rows=()):
        self.rows = list(rows)

    def append(self, row):
        self.rows.append(row)

    def extend_shifted(self, other, offset):
        """Append another run's rows with period indices shifted by offset."""
        for r in other.rows:
            self.rows.append(replace(r, period=r.period + offset))

    def next_period(self):
        return 1 + max((r.period for r in self.rows), default=-1)

    def series(self, model="global"):
        """(periods, train_loss, val_loss, val_fer) arrays for one model kind."""
        rows = [r for r in self.rows if r.model == model]
        return (np.array([r.period for r in rows]),
                np.array([r.train_loss for r in rows]),
                np.array([r.val_loss for r in rows]),
                np.array([r.val_fer for r in rows]))

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.period, r.model, repr(r.train_loss),
                            repr(r.val_loss), repr(r.val_fer), repr(r.wall_ms)])


def partition_data(dataset, num_workers, seed):
    """Shuffle-and-deal a dataset into disjoint near-equal worker splits."""
    if num_workers < 1:
        raise ValueError(f"need at least one worker, got {num_workers}")
    n = len(dataset)
    if n < num_workers:
        raise ValueError(f"{n} utterances cannot feed {num_workers} workers")
    order = np.random.default_rng(seed).permutation(n)
    return [Dataset([dataset[int(i)] for i in order[w::num_workers]])
            for w in range(num_workers)]


def _split_items(items, num_workers, seed):
    if len(items) < num_workers:
        raise ValueError(f"{len(items)} items cannot feed {num_workers} workers")
    order = np.random.default_rng(seed).permutation(len(items))
    return [[items[int(i)] for i in order[w::num_workers]]
            for w in range(num_workers)]


def sgd_momentum_step(params, grads, velocity, lr, momentum):
    """One momentum-SGD update; a skipped gradient is a strict no-op."""
    if grads.layout != params.layout:
        raise ValueError("gradient layout does not match parameters")
    velocity = np.asarray(velocity, dtype=np.float64)
    if velocity.shape != params.values.shape:
        raise ValueError("velocity length does not match parameters")
    if grads.skipped:
        return params, velocity
    v = momentum * velocity + grads.values
    return ModelParams(params.layout, params.values - lr * v), v


def evaluate(model, dataset):
    """Frame error rate (argmax posterior vs hard label, first index wins
    ties) and mean per-frame wall clock in milliseconds."""
    errors = 0
    frames = 0
    start = time.perf_counter()
    for u in dataset:
        cache = forward(model, u.frames)
        pred = cache.posteriors.argmax(axis=1)
        errors += int((pred != u.labels).sum())
        frames += u.num_frames
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    if frames == 0:
        raise ValueError("dataset has no frames to evaluate")
    return errors / frames, elapsed_ms / frames


def validation_stats(model, dataset):
    """Mean per-utterance CE loss and frame error rate in one pass."""
    losses = []
    errors = 0
    frames = 0
    for u in dataset:
        cache = forward(model, u.frames)
        loss, _ = ce_loss(cache.posteriors, u.labels)
        losses.append(loss)
        errors += int((cache.posteriors.argmax(axis=1) != u.labels).sum())
        frames += u.num_frames
    if frames == 0:
        raise ValueError("validation set has no frames")
    return float(np.mean(losses)), errors / frames


def _combined_criterion(loss_cfg):
    def criterion(item, cache):
        hard = item.labels if loss_cfg.w_hard > 0 else None
        soft = item.soft if loss_cfg.w_soft > 0 else None
        return combined_loss(cache.posteriors, Targets(hard, soft), loss_cfg)

    return criterion


def _smbr_criterion(smbr_cfg):
    def criterion(item, cache):
        utt, lat = item
        logp = log_softmax(cache.logits)
        acc, grad = smbr_loss_and_grad(lat, logp, smbr_cfg)
        t_len = logp.shape[0]
        # minimize the mean per-frame risk (T - F)/T; chain rule from log
        # posteriors back to logits
        row_sums = grad.sum(axis=1, keepdims=True)
        d_logits = -(grad - cache.posteriors * row_sums) / t_len
        return (t_len - acc) / t_len, d_logits

    return criterion


def _utt_frames(item):
    return item.frames


def _pair_frames(item):
    return item[0].frames


def _worker_loop(wid, cfg, items, initial, part, endpoint, control, report,
                 stop, frames_fn, criterion, batches_per_epoch):
    try:
        params = initial
        velocity = np.zeros(cfg.layout.param_count)
        state = BmufState(initial.values.copy(), eta=cfg.bmuf_eta,
                          zeta=cfg.bmuf_zeta) if cfg.strategy == BMUF else None
        period = 0
        while True:
            directive = control.get(timeout=cfg.timeout)
            if directive["cmd"] == "stop":
                return
            epoch = directive["epoch"]
            lr = directive["lr"]
            order = np.random.default_rng([cfg.seed, wid, epoch]).permutation(
                len(items)
            )
            period_losses = []
            for b in range(batches_per_epoch):
                if stop.is_set():
                    return
                batch = order[b * cfg.mini_batch:(b + 1) * cfg.mini_batch]
                grad_sum = np.zeros(cfg.layout.param_count)
                n_live = 0
                loss_sum = 0.0
                for i in batch:
                    item = items[int(i)]
                    cache = forward(params, frames_fn(item), cfg.clip)
                    loss, d_logits = criterion(item, cache)
                    grads = backward(params, cache, d_logits, cfg.clip)
                    loss_sum += loss
                    if not grads.skipped:
                        grad_sum += grads.values
                        n_live += 1
                if n_live:
                    batch_grads = Gradients(cfg.layout, grad_sum / n_live)
                else:
                    batch_grads = Gradients(cfg.layout, grad_sum, skipped=True)
                params, velocity = sgd_momentum_step(
                    params, batch_grads, velocity, lr, cfg.momentum
                )
                period_losses.append(loss_sum / batch.size)

                if (b + 1) % cfg.sync_period == 0 or b == batches_per_epoch - 1:
                    theta_bar = mesh_allreduce(params.values, wid, part, endpoint)
                    if state is not None:
                        state = bmuf_step(state, theta_bar)
                        theta_g = state.theta_g
                    else:
                        theta_g = theta_bar
                    params = ModelParams(cfg.layout, theta_g)
                    report.put(("sync", wid, period,
                                float(np.mean(period_losses)),
                                theta_g.copy() if wid == 0 else None))
                    period_losses = []
                    period += 1
            report.put(("epoch_done", wid, epoch, None, None))
    except BaseException as exc:
        report.put(("error", wid, f"{type(exc).__name__}: {exc}", None, None))


class _Inbox:
    """Orchestrator's view of the report queue. A fast worker may deliver
    its end-of-epoch notice while slower peers are still reporting the last
    synchronization, so messages are buffered per kind and handed out in
    arrival order."""

    def __init__(self, report, num_workers, timeout):
        self._report = report
        self._n = num_workers
        self._timeout = timeout
        self._buffers = {"sync": [], "epoch_done": []}

    def take(self, kind, metrics):
        buf = self._buffers[kind]
        while len(buf) < self._n:
            try:
                msg = self._report.get(timeout=self._timeout)
            except queue.Empty:
                raise TrainingAborted(
                    f"no worker report within {self._timeout}s; run stalled",
                    metrics,
                ) from None
            if msg[0] == "error":
                raise TrainingAborted(
                    f"worker {msg[1]} failed: {msg[2]}", metrics
                )
            self._buffers[msg[0]].append(msg)
        out = buf[: self._n]
        del buf[: self._n]
        return out


def _run_training(cfg, worker_items, frames_fn, criterion, initial, val_set,
                  metrics=None):
    """Shared engine behind all parallel procedures. Returns
    (global model, ema model or None, metrics)."""
    n = cfg.workers
    batches_per_epoch = min(len(it) for it in worker_items) // cfg.mini_batch
    if batches_per_epoch < 1:
        raise ValueError(
            "mini_batch larger than the smallest worker split; no full batch"
        )
    periods_per_epoch = math.ceil(batches_per_epoch / cfg.sync_period)

    mesh = InProcessMesh(n, timeout=cfg.timeout)
    part = partition(cfg.layout.param_count, n)
    controls = [queue.Queue() for _ in range(n)]
    report = queue.Queue()
    stop = threading.Event()
    if metrics is None:
        metrics = Metrics()
    period0 = metrics.next_period()

    threads = []
    for wid in range(n):
        t = threading.Thread(
            target=_worker_loop,
            args=(wid, cfg, worker_items[wid], initial, part,
                  mesh.endpoint(wid), controls[wid], report, stop, frames_fn,
                  criterion, batches_per_epoch),
            name=f"worker-{wid}",
            daemon=True,
        )
        t.start()
        threads.append(t)

    ema_state = None
    theta_g = initial.values
    lr = cfg.lr
    best_val = math.inf
    inbox = _Inbox(report, n, cfg.timeout)
    try:
        mark = time.perf_counter()
        for epoch in range(cfg.epochs):
            for c in controls:
                c.put({"cmd": "epoch", "epoch": epoch, "lr": lr})
            epoch_val = math.nan
            for p in range(periods_per_epoch):
                reports = inbox.take("sync", metrics)
                arrived = time.perf_counter()
                expected = epoch * periods_per_epoch + p
                if any(r[2] != expected for r in reports):
                    raise TrainingAborted(
                        f"sync period indices out of step at period {expected}",
                        metrics,
                    )
                train_loss = float(np.mean([r[3] for r in reports]))
                (theta_g,) = [r[4] for r in reports if r[1] == 0]
                wall_ms = (arrived - mark) * 1000.0

                global_model = ModelParams(cfg.layout, theta_g)
                if cfg.ema_alpha is not None:
                    if ema_state is None:
                        ema_state = EmaState(theta_g.copy(), cfg.ema_alpha)
                    else:
                        ema_state = ema_update(ema_state, theta_g)
                val_loss, val_fer = validation_stats(global_model, val_set)
                row_period = period0 + expected
                metrics.append(MetricsRow(row_period, "global", train_loss,
                                          val_loss, val_fer, wall_ms))
                if ema_state is not None:
                    ema_model = ModelParams(cfg.layout, ema_state.theta_hat)
                    ema_loss, ema_fer = validation_stats(ema_model, val_set)
                    metrics.append(MetricsRow(row_period, "ema", math.nan,
                                              ema_loss, ema_fer, wall_ms))
                epoch_val = val_loss
                mark = time.perf_counter()
            inbox.take("epoch_done", metrics)
            if cfg.lr_halving and epoch + 1 < cfg.epochs:
                if epoch_val >= best_val:
                    lr = lr / 2.0
                    log.info("validation loss %.6f did not improve on %.6f; "
                             "halving lr to %g", epoch_val, best_val, lr)
                best_val = min(best_val, epoch_val)
        for c in controls:
            c.put({"cmd": "stop"})
        for t in threads:
            t.join(timeout=cfg.timeout)
    except BaseException:
        # release any worker parked at the epoch barrier, then surface
        stop.set()
        for c in controls:
            c.put({"cmd": "stop"})
        raise

    final = ModelParams(cfg.layout, theta_g)
    ema_model = (ModelParams(cfg.layout, ema_state.theta_hat)
                 if ema_state is not None else None)
    return final, ema_model, metrics


def train_parallel(cfg, train_set, val_set, initial_model=None, metrics=None):
    """Synchronous data-parallel training on frame-level criteria.

    Workers run momentum SGD on disjoint splits; every ``sync_period``
    mini-batches (and at each epoch end) their models are averaged over
    the mesh and passed through the configured strategy (BMUF or plain
    averaging) to form the next global model. The EMA model shadows the
    global one and never feeds back into training. Returns
    ``(global model, ema model or None, metrics)``.
    """
    if initial_model is None:
        initial_model = xavier_init(cfg.layout, cfg.seed)
    if initial_model.layout != cfg.layout:
        raise ValueError("initial model layout does not match config")
    splits = partition_data(train_set, cfg.workers, cfg.seed)
    worker_items = [list(s) for s in splits]
    return _run_training(cfg, worker_items, _utt_frames,
                         _combined_criterion(cfg.loss), initial_model, val_set,
                         metrics)


def _attach_soft(dataset, teacher):
    """New dataset whose utterances carry the teacher's posteriors."""
    out = []
    for u in dataset:
        post = forward(teacher, u.frames).posteriors
        out.append(Utterance(u.id, u.frames, u.labels, soft=post))
    return Dataset(out)


def _subset(items, fraction, seed):
    count = max(1, int(math.floor(fraction * len(items))))
    order = np.random.default_rng(seed).permutation(len(items))
    return [items[int(i)] for i in sorted(order[:count])]


def layerwise_train(cfg, train_set, val_set, max_layers, teacher_tuner=None,
                    subset_fraction=1.0):
    """Grow a deep model one LSTM layer at a time.

    Stage 1 trains a 1-layer model from scratch on hard labels only. Each
    later stage deepens the previous model, computes soft targets by
    running that frozen teacher over the (possibly reduced) training set,
    and trains on the equal-weight combination of hard and soft targets.
    ``teacher_tuner(model, stage)`` may refine a stage's model (e.g.
    sequence-criterion fine-tuning) before it teaches the next one.
    ``subset_fraction < 1`` trains all but the last stage on a data
    subset. Returns ``(stage models, metrics)``.
    """
    if max_layers < 1:
        raise ValueError(f"max_layers must be >= 1, got {max_layers}")
    if len(cfg.layout.lstm_layers) != max_layers:
        raise ValueError(
            f"layout lists {len(cfg.layout.lstm_layers)} hidden sizes but "
            f"max_layers is {max_layers}"
        )
    if not 0.0 < subset_fraction <= 1.0:
        raise ValueError(f"subset_fraction must lie in (0, 1], got {subset_fraction}")

    metrics = Metrics()
    models = []
    teacher = None
    for stage in range(1, max_layers + 1):
        stage_layout = ModelLayout(cfg.layout.input_dim,
                                   cfg.layout.lstm_layers[:stage],
                                   cfg.layout.num_classes)
        data = train_set
        if subset_fraction < 1.0 and stage < max_layers:
            data = Dataset(_subset(list(train_set), subset_fraction,
                                   [cfg.seed, 90, stage]))
        if stage == 1:
            stage_cfg = replace(cfg, layout=stage_layout,
                                loss=LossConfig(1.0, 0.0, cfg.loss.temperature))
            initial = None
            log.info("stage 1: training %s from random init on hard labels",
                     stage_layout.lstm_layers)
        else:
            if teacher_tuner is not None:
                teacher = teacher_tuner(teacher, stage - 1)
                if teacher.layout.lstm_layers != cfg.layout.lstm_layers[:stage - 1]:
                    raise ValueError("teacher_tuner changed the model layout")
            initial = deepen(teacher, [cfg.seed, 7, stage],
                             new_hidden=cfg.layout.lstm_layers[stage - 1])
            data = _attach_soft(data, teacher)
            stage_cfg = replace(cfg, layout=stage_layout,
                                loss=LossConfig(0.5, 0.5, cfg.loss.temperature))
            log.info("stage %d: training %s with combined loss w_hard=%.2f "
                     "w_soft=%.2f", stage, stage_layout.lstm_layers,
                     stage_cfg.loss.w_hard, stage_cfg.loss.w_soft)
        model, _ema, metrics = train_parallel(stage_cfg, data, val_set,
                                              initial_model=initial,
                                              metrics=metrics)
        models.append(model)
        teacher = model
    return models, metrics


def distill(teacher, student_layout, train_set, val_set, cfg):
    """Train a (typically smaller) student on the teacher's posteriors only.

    Hard labels of the training set are never consulted; validation
    metrics still score against validation labels. Returns
    ``(student model, metrics)``.
    """
    if len(student_layout.lstm_layers) >= len(teacher.layout.lstm_layers):
        log.warning("student (%d layers) is not shallower than the teacher "
                    "(%d layers)", len(student_layout.lstm_layers),
                    len(teacher.layout.lstm_layers))
    if student_layout.input_dim != teacher.layout.input_dim \
            or student_layout.num_classes != teacher.layout.num_classes:
        raise ValueError("student and teacher disagree on input dim or classes")
    soft_set = Dataset([
        Utterance(u.id, u.frames, None,
                  soft=forward(teacher, u.frames).posteriors)
        for u in train_set
    ])
    dcfg = replace(cfg, layout=student_layout,
                   loss=LossConfig(0.0, 1.0, cfg.loss.temperature))
    student, _ema, metrics = train_parallel(dcfg, soft_set, val_set)
    return student, metrics


def transfer_smbr(base_model, smbr_data, val_set, cfg, smbr_cfg=None,
                  subset_fraction=1.0):
    """Adapt a trained model by ascending expected path accuracy on
    hypothesis lattices, optionally on a random fraction of the data.

    The reported train loss is the mean per-frame risk (T - F)/T, so it
    decreases as expected accuracy grows. Returns ``(adapted model,
    metrics)``.  A learning rate around a tenth of the frame-level one is
    a sensible starting point.
    """
    if smbr_cfg is None:
        smbr_cfg = SmbrConfig()
    if base_model.layout != cfg.layout:
        raise ValueError("base model layout does not match config")
    if not 0.0 < subset_fraction <= 1.0:
        raise ValueError(f"subset_fraction must lie in (0, 1], got {subset_fraction}")
    for _u, lat in smbr_data:
        if lat.max_state() >= cfg.layout.num_classes or \
                int(lat.ref.max()) >= cfg.layout.num_classes:
            raise ValueError("lattice states exceed the model's class count")
    items = list(smbr_data)
    if subset_fraction < 1.0:
        items = _subset(items, subset_fraction, [cfg.seed, 91])
    worker_items = _split_items(items, cfg.workers, cfg.seed)
    adapted, _ema, metrics = _run_training(cfg, worker_items, _pair_frames,
                                           _smbr_criterion(smbr_cfg),
                                           base_model, val_set)
    return adapted, metrics
