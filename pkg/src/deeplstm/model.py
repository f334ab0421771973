"""Stacked unidirectional LSTM with a linear + softmax head, in plain numpy.

All math is double precision. The forward pass clamps cell states to a
configured range each step; the backward pass is exact BPTT through the
computed (clamped) function, with two guard rails on top: element-wise
gradient clipping, and a saturation check on the per-step error signal
entering each recurrent layer that abandons the whole sequence when the
signal overflows.

Parameter storage is a single flat float64 vector. Per LSTM layer the
blocks are, in order: the input weight matrix W (4h x n_in), the recurrent
weight matrix U (4h x h), and the bias b (4h). The four row blocks of W, U
and b correspond to the input, forget, output and candidate gates, in that
order. After the layers come the output head weights (num_classes x h_top)
and bias (num_classes).
"""

import struct
from dataclasses import dataclass

import numpy as np

MODEL_MAGIC = b"DSTM"
MODEL_FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """A serialized model could not be decoded."""


def _sigmoid(x):
    # exp overflow for very negative inputs saturates to exactly 0, which is fine
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softmax(logits):
    """Row-wise softmax of a (T, C) logit matrix, numerically stable."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        return z.copy()
    shifted = z - z.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    return p


def log_softmax(logits):
    """Row-wise log softmax; more accurate than log(softmax(...))."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        return z.copy()
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


@dataclass(frozen=True)
class ModelLayout:
    """Network shape: input width, LSTM hidden sizes, and output classes.

    The layout fully determines the flat parameter vector length.
    """

    input_dim: int
    lstm_layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "lstm_layers", tuple(int(h) for h in self.lstm_layers))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.lstm_layers) == 0:
            raise ValueError("lstm_layers must contain at least one hidden size")
        if any(h < 1 for h in self.lstm_layers):
            raise ValueError(f"all hidden sizes must be >= 1, got {self.lstm_layers}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")

    def layer_input_dim(self, layer):
        return self.input_dim if layer == 0 else self.lstm_layers[layer - 1]

    def layer_param_count(self, layer):
        n_in = self.layer_input_dim(layer)
        h = self.lstm_layers[layer]
        return 4 * h * n_in + 4 * h * h + 4 * h

    @property
    def head_param_count(self):
        return self.num_classes * self.lstm_layers[-1] + self.num_classes

    @property
    def param_count(self):
        total = sum(self.layer_param_count(l) for l in range(len(self.lstm_layers)))
        return total + self.head_param_count


@dataclass(frozen=True)
class ClipConfig:
    """Clipping/saturation intervals: gradients, cell states, and the
    backpropagated error signal (the saturation check)."""

    grad_range: tuple = (-5.0, 5.0)
    cell_range: tuple = (-50.0, 50.0)
    diff_range: tuple = (-10000.0, 10000.0)

    def __post_init__(self):
        for name in ("grad_range", "cell_range", "diff_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not lo < hi:
                raise ValueError(f"{name} must satisfy lo < hi, got ({lo}, {hi})")


class ModelParams:
    """Flat parameter vector bound to a layout. Values are immutable."""

    __slots__ = ("layout", "values")

    def __init__(self, layout, values):
        values = np.array(values, dtype=np.float64).ravel()
        if values.size != layout.param_count:
            raise ValueError(
                f"parameter vector length {values.size} does not match "
                f"layout parameter count {layout.param_count}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must all be finite")
        values.setflags(write=False)
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):
        raise AttributeError("ModelParams is immutable")

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)


class Gradients:
    """Flat gradient vector; ``skipped`` marks a sequence abandoned by the
    saturation check, in which case the values are all zero."""

    __slots__ = ("layout", "values", "skipped")

    def __init__(self, layout, values, skipped=False):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != layout.param_count:
            raise ValueError("gradient length does not match layout")
        if skipped and np.any(values != 0.0):
            raise ValueError("skipped gradients must be all zero")
        self.layout = layout
        self.values = values
        self.skipped = bool(skipped)


def _param_views(layout, vec):
    """Per-layer (W, U, b) views plus head (W_out, b_out) views of a flat vector."""
    layers = []
    off = 0
    n_in = layout.input_dim
    for h in layout.lstm_layers:
        w = vec[off : off + 4 * h * n_in].reshape(4 * h, n_in)
        off += 4 * h * n_in
        u = vec[off : off + 4 * h * h].reshape(4 * h, h)
        off += 4 * h * h
        b = vec[off : off + 4 * h]
        off += 4 * h
        layers.append((w, u, b))
        n_in = h
    c = layout.num_classes
    w_out = vec[off : off + c * n_in].reshape(c, n_in)
    off += c * n_in
    b_out = vec[off : off + c]
    off += c
    assert off == vec.size
    return layers, w_out, b_out


def xavier_init(layout, seed):
    """Uniform Glorot initialization, deterministic per seed.

    Each per-gate weight matrix is drawn uniform within
    +-sqrt(6 / (fan_in + fan_out)); biases start at zero. Draw order is
    W then U per layer, then the head matrix.
    """
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.param_count)
    layers, w_out, _ = _param_views(layout, values)
    n_in = layout.input_dim
    for (w, u, _b), h in zip(layers, layout.lstm_layers):
        bound_w = np.sqrt(6.0 / (n_in + h))
        w[:] = rng.uniform(-bound_w, bound_w, w.shape)
        bound_u = np.sqrt(6.0 / (2 * h))
        u[:] = rng.uniform(-bound_u, bound_u, u.shape)
        n_in = h
    bound_out = np.sqrt(6.0 / (layout.lstm_layers[-1] + layout.num_classes))
    w_out[:] = rng.uniform(-bound_out, bound_out, w_out.shape)
    return ModelParams(layout, values)


def stack_frames(frames, k):
    """Concatenate k consecutive frames into super frames, dropping the
    trailing remainder. (T, d) -> (T // k, k * d)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
    if k < 1:
        raise ValueError(f"stack factor must be >= 1, got {k}")
    t2 = frames.shape[0] // k
    return frames[: t2 * k].reshape(t2, k * frames.shape[1]).copy()


class ForwardCache:
    """Everything the backward pass needs: per-layer gate activations,
    clamped cell states, hidden states, clamp masks, plus logits and
    posteriors."""

    __slots__ = (
        "layout",
        "num_frames",
        "inputs",
        "gates",
        "cells",
        "tanh_cells",
        "hiddens",
        "cell_masks",
        "logits",
        "posteriors",
    )

    def __init__(self, layout, num_frames, inputs, gates, cells, tanh_cells,
                 hiddens, cell_masks, logits, posteriors):
        self.layout = layout
        self.num_frames = num_frames
        self.inputs = inputs
        self.gates = gates
        self.cells = cells
        self.tanh_cells = tanh_cells
        self.hiddens = hiddens
        self.cell_masks = cell_masks
        self.logits = logits
        self.posteriors = posteriors


def forward(model, inputs, clip=None):
    """Run the network over a (T, input_dim) sequence.

    Gates use sigmoid nonlinearities, the cell candidate and cell output use
    tanh, and cell states are clamped to ``clip.cell_range`` at every step
    (the clamped value is what propagates to the next step).
    """
    if clip is None:
        clip = ClipConfig()
    layout = model.layout
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layout.input_dim:
        raise ValueError(
            f"inputs must have shape (T, {layout.input_dim}), got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")

    layers, w_out, b_out = _param_views(layout, model.values)
    t_len = x.shape[0]
    c_lo, c_hi = clip.cell_range

    gates_all, cells_all, tanh_all, hidden_all, mask_all = [], [], [], [], []
    layer_in = x
    for (w, u, b), h in zip(layers, layout.lstm_layers):
        pre_x = layer_in @ w.T + b
        gates = np.empty((t_len, 4 * h))
        cells = np.empty((t_len, h))
        tanh_c = np.empty((t_len, h))
        hidden = np.empty((t_len, h))
        mask = np.empty((t_len, h), dtype=bool)
        h_prev = np.zeros(h)
        c_prev = np.zeros(h)
        for t in range(t_len):
            pre = pre_x[t] + u @ h_prev
            a = gates[t]
            a[: 3 * h] = _sigmoid(pre[: 3 * h])
            a[3 * h :] = np.tanh(pre[3 * h :])
            c_raw = a[h : 2 * h] * c_prev + a[:h] * a[3 * h :]
            mask[t] = (c_raw > c_lo) & (c_raw < c_hi)
            np.clip(c_raw, c_lo, c_hi, out=cells[t])
            np.tanh(cells[t], out=tanh_c[t])
            np.multiply(a[2 * h : 3 * h], tanh_c[t], out=hidden[t])
            c_prev = cells[t]
            h_prev = hidden[t]
        gates_all.append(gates)
        cells_all.append(cells)
        tanh_all.append(tanh_c)
        hidden_all.append(hidden)
        mask_all.append(mask)
        layer_in = hidden

    logits = layer_in @ w_out.T + b_out
    posteriors = softmax(logits)
    return ForwardCache(layout, t_len, x, gates_all, cells_all, tanh_all,
                        hidden_all, mask_all, logits, posteriors)


def backward(model, cache, d_logits, clip=None):
    """Exact BPTT gradient of a logits-level loss, with two guard rails.

    Element-wise parameter gradients are clamped to ``clip.grad_range``.
    At every timestep the total error signal entering each recurrent layer
    (the dLoss/dh vector, external plus recurrent contributions) is checked
    against ``clip.diff_range``; any overflow abandons the sequence and
    returns an all-zero gradient with ``skipped=True``.
    """
    if clip is None:
        clip = ClipConfig()
    layout = model.layout
    if cache.layout != layout:
        raise ValueError("cache layout does not match model layout")
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != cache.logits.shape:
        raise ValueError(
            f"d_logits shape {d_logits.shape} does not match logits shape "
            f"{cache.logits.shape}"
        )

    layers, w_out, _ = _param_views(layout, model.values)
    t_len = cache.num_frames
    grad = np.zeros(layout.param_count)
    grad_layers, g_w_out, g_b_out = _param_views(layout, grad)
    d_lo, d_hi = clip.diff_range

    top = cache.hiddens[-1]
    g_w_out[:] = d_logits.T @ top
    g_b_out[:] = d_logits.sum(axis=0)
    d_hidden = d_logits @ w_out

    for l in reversed(range(len(layout.lstm_layers))):
        w, u, _b = layers[l]
        h = layout.lstm_layers[l]
        gates = cache.gates[l]
        cells = cache.cells[l]
        tanh_c = cache.tanh_cells[l]
        mask = cache.cell_masks[l]
        layer_in = cache.inputs if l == 0 else cache.hiddens[l - 1]

        d_pre = np.zeros((t_len, 4 * h))
        dh_rec = np.zeros(h)
        dc_rec = np.zeros(h)
        for t in reversed(range(t_len)):
            dh = d_hidden[t] + dh_rec
            if np.any(dh > d_hi) or np.any(dh < d_lo):
                return Gradients(layout, np.zeros(layout.param_count), skipped=True)
            gi = gates[t, :h]
            gf = gates[t, h : 2 * h]
            go = gates[t, 2 * h : 3 * h]
            gg = gates[t, 3 * h :]
            tc = tanh_c[t]
            d_out = dh * tc
            dc = dh * go * (1.0 - tc * tc) + dc_rec
            dc_raw = dc * mask[t]
            c_prev = cells[t - 1] if t > 0 else 0.0
            row = d_pre[t]
            row[:h] = dc_raw * gg * gi * (1.0 - gi)
            row[h : 2 * h] = dc_raw * c_prev * gf * (1.0 - gf)
            row[2 * h : 3 * h] = d_out * go * (1.0 - go)
            row[3 * h :] = dc_raw * gi * (1.0 - gg * gg)
            dh_rec = u.T @ row
            dc_rec = dc_raw * gf

        g_w, g_u, g_b = grad_layers[l]
        g_w[:] = d_pre.T @ layer_in
        if t_len > 0:
            h_shift = np.vstack([np.zeros((1, h)), cache.hiddens[l][:-1]])
            g_u[:] = d_pre.T @ h_shift
        g_b[:] = d_pre.sum(axis=0)
        d_hidden = d_pre @ w

    np.clip(grad, clip.grad_range[0], clip.grad_range[1], out=grad)
    return Gradients(layout, grad, skipped=False)


def deepen(teacher, seed, new_hidden=None):
    """Grow the network by one LSTM layer.

    The teacher's LSTM layers are copied bit-exactly; the new top layer and
    the output head are freshly Xavier-initialized (the head's input width
    may change, and the teacher's knowledge flows through soft targets
    instead). Defaults the new layer's width to the teacher's top layer.
    """
    t_layout = teacher.layout
    if new_hidden is None:
        new_hidden = t_layout.lstm_layers[-1]
    layout = ModelLayout(
        t_layout.input_dim,
        t_layout.lstm_layers + (int(new_hidden),),
        t_layout.num_classes,
    )
    values = np.zeros(layout.param_count)
    copied = sum(t_layout.layer_param_count(l) for l in range(len(t_layout.lstm_layers)))
    values[:copied] = teacher.values[:copied]

    rng = np.random.default_rng(seed)
    layers, w_out, _ = _param_views(layout, values)
    w_new, u_new, _ = layers[-1]
    n_in = layout.layer_input_dim(len(layout.lstm_layers) - 1)
    h = layout.lstm_layers[-1]
    bound_w = np.sqrt(6.0 / (n_in + h))
    w_new[:] = rng.uniform(-bound_w, bound_w, w_new.shape)
    bound_u = np.sqrt(6.0 / (2 * h))
    u_new[:] = rng.uniform(-bound_u, bound_u, u_new.shape)
    bound_out = np.sqrt(6.0 / (h + layout.num_classes))
    w_out[:] = rng.uniform(-bound_out, bound_out, w_out.shape)
    return ModelParams(layout, values)


def serialize_model(model):
    """Encode a model as bytes: magic, format version, layout dims as
    little-endian u32, then parameters as little-endian float64."""
    layout = model.layout
    dims = [layout.input_dim, len(layout.lstm_layers), *layout.lstm_layers,
            layout.num_classes]
    header = MODEL_MAGIC + struct.pack("<I", MODEL_FORMAT_VERSION)
    header += struct.pack(f"<{len(dims)}I", *dims)
    return header + model.values.astype("<f8").tobytes()


def deserialize_model(data):
    """Decode bytes produced by :func:`serialize_model`; bit-exact round trip."""
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad magic bytes: not a model file")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", data, off)
        off += 4
        if version != MODEL_FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format version {version}")
        input_dim, n_layers = struct.unpack_from("<II", data, off)
        off += 8
        hidden = struct.unpack_from(f"<{n_layers}I", data, off)
        off += 4 * n_layers
        (num_classes,) = struct.unpack_from("<I", data, off)
        off += 4
    except struct.error as exc:
        raise ModelFormatError(f"truncated model header: {exc}") from exc
    try:
        layout = ModelLayout(input_dim, hidden, num_classes)
    except ValueError as exc:
        raise ModelFormatError(f"invalid layout in model file: {exc}") from exc
    expected = layout.param_count * 8
    body = data[off:]
    if len(body) != expected:
        raise ModelFormatError(
            f"parameter payload has {len(body)} bytes, expected {expected}"
        )
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    try:
        return ModelParams(layout, values)
    except ValueError as exc:
        raise ModelFormatError(f"invalid parameter values: {exc}") from exc


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(serialize_model(model))


def load_model(path):
    with open(path, "rb") as f:
        return deserialize_model(f.read())
