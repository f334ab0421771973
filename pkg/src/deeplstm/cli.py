"""Command-line entry point for dataset generation, the training
procedures, evaluation, and allreduce benchmarking.

Configuration comes from an optional JSON file plus flags; flags win.
Unknown config keys are rejected. Every run writes a manifest.json with
the fully resolved configuration into --out, and a manifest can be passed
straight back as --config to reproduce the run. The DST_LOG environment
variable (error | info | debug) controls verbosity.
"""

import argparse
import json
import logging
import os
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .allreduce import (AggregationError, InProcessMesh, SocketTransport,
                        mesh_allreduce, partition)
from .datagen import (DatasetFormatError, SmbrDataset, generate_hmm_dataset,
                      load_dataset, load_lattices, make_hmm_config,
                      save_dataset, stack_dataset)
from .losses import LossConfig
from .model import (ClipConfig, ModelFormatError, ModelLayout, load_model,
                    save_model)
from .report import write_report
from .smbr import SmbrConfig
from .sync import model_average
from .training import (TrainConfig, TrainingAborted, distill, evaluate,
                       layerwise_train, train_parallel, transfer_smbr,
                       validation_stats)

log = logging.getLogger("deeplstm.cli")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}
_REQUIRED = object()


class ConfigError(Exception):
    """Bad configuration or usage; maps to exit code 2."""


# ---------------------------------------------------------------- validators

def _want_int(key, v, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"config field '{key}' must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"config field '{key}' must be >= {lo}, got {v}")
    return v


def _want_num(key, v, lo=None, lo_open=False, hi=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"config field '{key}' must be a number, got {v!r}")
    v = float(v)
    if lo is not None and (v <= lo if lo_open else v < lo):
        op = ">" if lo_open else ">="
        raise ConfigError(f"config field '{key}' must be {op} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"config field '{key}' must be <= {hi}, got {v}")
    return v


def _int_at_least(lo):
    return lambda key, v: _want_int(key, v, lo)


def _any_int(key, v):
    return _want_int(key, v)


def _pos_num(key, v):
    return _want_num(key, v, lo=0.0, lo_open=True)


def _nonneg_num(key, v):
    return _want_num(key, v, lo=0.0)


def _unit_num(key, v):
    return _want_num(key, v, lo=0.0, hi=1.0)


def _momentum_like(key, v):
    v = _want_num(key, v, lo=0.0)
    if v >= 1.0:
        raise ConfigError(f"config field '{key}' must be < 1, got {v}")
    return v


def _fraction(key, v):
    v = _want_num(key, v, lo=0.0, lo_open=True, hi=1.0)
    return v


def _want_bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(f"config field '{key}' must be true or false, got {v!r}")
    return v


def _int_list(key, v):
    ok = isinstance(v, list) and len(v) > 0 and all(
        isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v
    )
    if not ok:
        raise ConfigError(
            f"config field '{key}' must be a non-empty list of positive "
            f"integers, got {v!r}"
        )
    return [int(x) for x in v]


def _clip_pair(key, v):
    ok = isinstance(v, list) and len(v) == 2 and all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
    )
    if not ok or not float(v[0]) < float(v[1]):
        raise ConfigError(
            f"config field '{key}' must be a [lo, hi] pair with lo < hi, "
            f"got {v!r}"
        )
    return [float(v[0]), float(v[1])]


def _len_pair(key, v):
    ok = isinstance(v, list) and len(v) == 2 and all(
        isinstance(x, int) and not isinstance(x, bool) for x in v
    )
    if not ok or not 1 <= v[0] <= v[1]:
        raise ConfigError(
            f"config field '{key}' must be an [lo, hi] integer pair with "
            f"1 <= lo <= hi, got {v!r}"
        )
    return [int(v[0]), int(v[1])]


def _choice(*options):
    def check(key, v):
        if v not in options:
            raise ConfigError(
                f"config field '{key}' must be one of {', '.join(options)}; "
                f"got {v!r}"
            )
        return v

    return check


def _optional(inner):
    def check(key, v):
        return None if v is None else inner(key, v)

    return check


# ------------------------------------------------------------------ schemas

def _base_train_schema(lr_default):
    return {
        "hidden": (_REQUIRED, _int_list),
        "num_classes": (None, _optional(_int_at_least(1))),
        "stack": (3, _int_at_least(1)),
        "workers": (8, _int_at_least(1)),
        "epochs": (2, _int_at_least(1)),
        "mini_batch": (4, _int_at_least(1)),
        "lr": (lr_default, _pos_num),
        "momentum": (0.9, _momentum_like),
        "sync_period": (1, _int_at_least(1)),
        "strategy": ("bmuf", _choice("bmuf", "ma")),
        "bmuf_eta": (0.9, _momentum_like),
        "bmuf_zeta": (1.0, _pos_num),
        "ema_alpha": (0.99, _optional(_unit_num)),
        "temperature": (1.0, _pos_num),
        "grad_clip": ([-5.0, 5.0], _clip_pair),
        "cell_clip": ([-50.0, 50.0], _clip_pair),
        "diff_clip": ([-10000.0, 10000.0], _clip_pair),
        "seed": (0, _any_int),
        "lr_halving": (True, _want_bool),
        "timeout": (120.0, _pos_num),
    }


def _train_schema():
    schema = _base_train_schema(0.1)
    schema["w_hard"] = (1.0, _unit_num)
    schema["w_soft"] = (0.0, _unit_num)
    return schema


def _layerwise_schema():
    schema = _base_train_schema(0.1)
    schema["subset_fraction"] = (1.0, _fraction)
    return schema


def _distill_schema():
    return _base_train_schema(0.1)


def _transfer_schema():
    # frame-level defaults carry over, except the step size: sequence
    # training wants roughly a tenth of the frame-level learning rate
    schema = _base_train_schema(0.01)
    for key in ("hidden", "num_classes", "temperature"):
        del schema[key]
    schema["kappa"] = (1.0, _pos_num)
    schema["subset_fraction"] = (1.0, _fraction)
    return schema


_GEN_SCHEMA = {
    "num_states": (24, _int_at_least(1)),
    "feature_dim": (8, _int_at_least(1)),
    "count": (2000, _int_at_least(1)),
    "val_count": (200, _int_at_least(1)),
    "len_range": ([20, 60], _len_pair),
    "separation": (2.0, _nonneg_num),
    "self_loop": (0.8, _unit_num),
    "seed": (0, _any_int),
}

_EVAL_SCHEMA = {
    "stack": (3, _int_at_least(1)),
}

_BENCH_SCHEMA = {
    "workers": (4, _int_at_least(1)),
    "length": (100000, _int_at_least(1)),
    "rounds": (10, _int_at_least(1)),
    "transport": ("memory", _choice("memory", "tcp")),
    "base_port": (29500, _int_at_least(1)),
    "seed": (0, _any_int),
    "timeout": (30.0, _pos_num),
}


# ----------------------------------------------------------- config plumbing

def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if isinstance(obj, dict) and {"command", "version", "config"} <= set(obj):
        obj = obj["config"]  # a manifest works as a config
    if not isinstance(obj, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return obj


def _resolve(schema, file_cfg, overrides):
    unknown = sorted(set(file_cfg) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (default, check) in schema.items():
        if overrides.get(key) is not None:
            raw = overrides[key]
        elif key in file_cfg:
            raw = file_cfg[key]
        else:
            raw = default
        if raw is _REQUIRED:
            raise ConfigError(f"config field '{key}' is required")
        cfg[key] = check(key, raw)
    return cfg


def _overrides(args, keys):
    return {k: getattr(args, k, None) for k in keys}


def _ensure_out(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, command, cfg):
    doc = {"command": command, "version": __version__, "config": cfg}
    with open(out / "manifest.json", "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _train_config(cfg, layout, w_hard, w_soft):
    try:
        loss = LossConfig(w_hard, w_soft, cfg.get("temperature", 1.0))
        clip = ClipConfig(tuple(cfg["grad_clip"]), tuple(cfg["cell_clip"]),
                          tuple(cfg["diff_clip"]))
        return TrainConfig(
            layout=layout, workers=cfg["workers"], epochs=cfg["epochs"],
            mini_batch=cfg["mini_batch"], lr=cfg["lr"],
            momentum=cfg["momentum"], sync_period=cfg["sync_period"],
            strategy=cfg["strategy"], bmuf_eta=cfg["bmuf_eta"],
            bmuf_zeta=cfg["bmuf_zeta"], ema_alpha=cfg["ema_alpha"], clip=clip,
            loss=loss, seed=cfg["seed"], lr_halving=cfg["lr_halving"],
            timeout=cfg["timeout"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_stacked(path, stack):
    data = stack_dataset(load_dataset(path), stack)
    if len(data) == 0:
        raise ConfigError(f"{path} holds no utterances")
    return data


def _infer_classes(cfg, train, val):
    if cfg["num_classes"] is not None:
        return cfg["num_classes"]
    return max(train.num_classes(), val.num_classes())


def _print_last(metrics):
    rows = [r for r in metrics.rows if r.model == "global"]
    if rows:
        r = rows[-1]
        print(f"final: train_loss={r.train_loss:.4f} "
              f"val_loss={r.val_loss:.4f} val_fer={r.val_fer:.4f}")


# ----------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = _resolve(_GEN_SCHEMA, _load_config_file(args.config),
                   _overrides(args, ["num_states", "feature_dim", "count",
                                     "val_count", "separation", "self_loop",
                                     "seed"]))
    out = _ensure_out(args.out)
    _write_manifest(out, "gen-data", cfg)
    try:
        gen = make_hmm_config(
            num_states=cfg["num_states"], feature_dim=cfg["feature_dim"],
            count=cfg["count"], len_range=tuple(cfg["len_range"]),
            separation=cfg["separation"], self_loop=cfg["self_loop"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    train = generate_hmm_dataset(gen)
    # same emission model and chain, fresh sample stream for validation
    val = generate_hmm_dataset(replace(gen, count=cfg["val_count"],
                                       seed=cfg["seed"] + 1))
    save_dataset(train, out / "train.jsonl")
    save_dataset(val, out / "val.jsonl")
    print(f"wrote {len(train)} train and {len(val)} val utterances to {out}")
    return 0


def cmd_train(args):
    cfg = _resolve(_train_schema(), _load_config_file(args.config),
                   _overrides(args, ["hidden", "stack", "workers", "epochs",
                                     "mini_batch", "lr", "sync_period",
                                     "strategy", "ema_alpha", "seed"]))
    if abs(cfg["w_hard"] + cfg["w_soft"] - 1.0) > 1e-9:
        raise ConfigError(
            f"w_hard + w_soft must equal 1, got w_hard={cfg['w_hard']} "
            f"w_soft={cfg['w_soft']}"
        )
    if cfg["w_soft"] != 0.0:
        raise ConfigError(
            "the train command uses hard labels only (w_soft must be 0); "
            "soft-target training is done by the layerwise and distill commands"
        )
    out = _ensure_out(args.out)
    train = _load_stacked(args.data, cfg["stack"])
    val = _load_stacked(args.val, cfg["stack"])
    cfg["num_classes"] = _infer_classes(cfg, train, val)
    _write_manifest(out, "train", cfg)
    try:
        layout = ModelLayout(train[0].frames.shape[1], tuple(cfg["hidden"]),
                             cfg["num_classes"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tc = _train_config(cfg, layout, cfg["w_hard"], cfg["w_soft"])
    try:
        final, ema_model, metrics = train_parallel(tc, train, val)
    except TrainingAborted as exc:
        write_report(exc.metrics, out)
        raise
    save_model(final, out / "final.model")
    if ema_model is not None:
        save_model(ema_model, out / "ema.model")
    write_report(metrics, out)
    _print_last(metrics)
    return 0


def cmd_layerwise(args):
    cfg = _resolve(_layerwise_schema(), _load_config_file(args.config),
                   _overrides(args, ["hidden", "stack", "workers", "epochs",
                                     "mini_batch", "lr", "sync_period",
                                     "strategy", "ema_alpha", "seed",
                                     "subset_fraction"]))
    out = _ensure_out(args.out)
    train = _load_stacked(args.data, cfg["stack"])
    val = _load_stacked(args.val, cfg["stack"])
    cfg["num_classes"] = _infer_classes(cfg, train, val)
    _write_manifest(out, "layerwise", cfg)
    try:
        layout = ModelLayout(train[0].frames.shape[1], tuple(cfg["hidden"]),
                             cfg["num_classes"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tc = _train_config(cfg, layout, 1.0, 0.0)
    try:
        models, metrics = layerwise_train(
            tc, train, val, max_layers=len(cfg["hidden"]),
            subset_fraction=cfg["subset_fraction"],
        )
    except TrainingAborted as exc:
        write_report(exc.metrics, out)
        raise
    for depth, model in enumerate(models, 1):
        save_model(model, out / f"stage{depth}.model")
    save_model(models[-1], out / "final.model")
    write_report(metrics, out)
    _print_last(metrics)
    return 0


def cmd_distill(args):
    cfg = _resolve(_distill_schema(), _load_config_file(args.config),
                   _overrides(args, ["hidden", "stack", "workers", "epochs",
                                     "mini_batch", "lr", "sync_period",
                                     "strategy", "ema_alpha", "seed"]))
    teacher = load_model(args.teacher)
    out = _ensure_out(args.out)
    train = _load_stacked(args.data, cfg["stack"])
    val = _load_stacked(args.val, cfg["stack"])
    if train[0].frames.shape[1] != teacher.layout.input_dim:
        raise ConfigError(
            f"stacked input width {train[0].frames.shape[1]} does not match "
            f"the teacher's input width {teacher.layout.input_dim}; check "
            f"the 'stack' setting"
        )
    cfg["num_classes"] = teacher.layout.num_classes
    _write_manifest(out, "distill", cfg)
    student_layout = ModelLayout(teacher.layout.input_dim,
                                 tuple(cfg["hidden"]),
                                 teacher.layout.num_classes)
    tc = _train_config(cfg, student_layout, 0.0, 1.0)
    try:
        student, metrics = distill(teacher, student_layout, train, val, tc)
    except TrainingAborted as exc:
        write_report(exc.metrics, out)
        raise
    save_model(student, out / "student.model")
    write_report(metrics, out)
    _print_last(metrics)
    return 0


def cmd_transfer(args):
    cfg = _resolve(_transfer_schema(), _load_config_file(args.config),
                   _overrides(args, ["stack", "workers", "epochs",
                                     "mini_batch", "lr", "sync_period",
                                     "strategy", "ema_alpha", "seed",
                                     "subset_fraction", "kappa"]))
    base = load_model(args.base)
    out = _ensure_out(args.out)
    _write_manifest(out, "transfer", cfg)
    train = _load_stacked(args.data, cfg["stack"])
    val = _load_stacked(args.val, cfg["stack"])
    lattices = load_lattices(args.lattices)
    try:
        smbr_data = SmbrDataset(train, lattices)
    except ValueError as exc:
        raise ConfigError(
            f"lattices do not line up with the stacked dataset: {exc}"
        ) from exc
    if train[0].frames.shape[1] != base.layout.input_dim:
        raise ConfigError(
            f"stacked input width {train[0].frames.shape[1]} does not match "
            f"the base model's input width {base.layout.input_dim}"
        )
    tc = _train_config(cfg, base.layout, 1.0, 0.0)
    try:
        smbr_cfg = SmbrConfig(cfg["kappa"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        adapted, metrics = transfer_smbr(
            base, smbr_data, val, tc, smbr_cfg,
            subset_fraction=cfg["subset_fraction"],
        )
    except TrainingAborted as exc:
        write_report(exc.metrics, out)
        raise
    save_model(adapted, out / "adapted.model")
    write_report(metrics, out)
    _print_last(metrics)
    return 0


def cmd_eval(args):
    cfg = _resolve(_EVAL_SCHEMA, _load_config_file(args.config),
                   _overrides(args, ["stack"]))
    model = load_model(args.model)
    data = _load_stacked(args.data, cfg["stack"])
    out = _ensure_out(args.out)
    _write_manifest(out, "eval", cfg)
    fer, ms_per_frame = evaluate(model, data)
    val_loss, _ = validation_stats(model, data)
    frames = sum(u.num_frames for u in data)
    result = {"fer": fer, "ms_per_frame": ms_per_frame, "ce_loss": val_loss,
              "utterances": len(data), "frames": frames}
    with open(out / "eval.json", "w") as f:
        json.dump(result, f, indent=2)
        f.write("\n")
    print(f"fer={fer:.4f} ce_loss={val_loss:.4f} "
          f"ms_per_frame={ms_per_frame:.4f}")
    return 0


def cmd_allreduce_bench(args):
    cfg = _resolve(_BENCH_SCHEMA, _load_config_file(args.config),
                   _overrides(args, ["workers", "length", "rounds",
                                     "transport", "base_port", "seed"]))
    out = _ensure_out(args.out)
    _write_manifest(out, "allreduce-bench", cfg)
    n, length, rounds = cfg["workers"], cfg["length"], cfg["rounds"]
    base = np.random.default_rng(cfg["seed"]).standard_normal((n, length))
    part = partition(length, n)

    mesh = None
    if cfg["transport"] == "memory":
        mesh = InProcessMesh(n, timeout=cfg["timeout"])
        endpoints = [mesh.endpoint(w) for w in range(n)]
    else:
        endpoints = [None] * n

    results = [[None] * rounds for _ in range(n)]
    errors = []

    def runner(wid):
        try:
            ep = endpoints[wid]
            if ep is None:
                ep = SocketTransport(wid, n, cfg["base_port"],
                                     timeout=cfg["timeout"])
            try:
                for r in range(rounds):
                    results[wid][r] = mesh_allreduce(base[wid] + r, wid, part, ep)
            finally:
                if isinstance(ep, SocketTransport):
                    ep.close()
        except Exception as exc:  # noqa: BLE001 - surfaced to the main thread
            errors.append(f"worker {wid}: {exc}")

    start = time.perf_counter()
    threads = [threading.Thread(target=runner, args=(w,), daemon=True)
               for w in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=cfg["timeout"] + 5 * rounds)
    elapsed = time.perf_counter() - start
    if errors:
        raise AggregationError("; ".join(errors))
    if any(res is None for row in results for res in row):
        raise AggregationError("benchmark worker did not finish")

    for r in range(rounds):
        expected = model_average([base[w] + r for w in range(n)])
        for w in range(n):
            if not np.array_equal(results[w][r], expected):
                raise AggregationError(
                    f"round {r}: worker {w} result differs from serial mean"
                )

    stats = {
        "workers": n, "length": length, "rounds": rounds,
        "transport": cfg["transport"],
        "seconds_total": elapsed,
        "ms_per_round": elapsed * 1000.0 / rounds,
        "piece_messages": 2 * n * (n - 1) * rounds,
        "verified_bit_exact": True,
    }
    if mesh is not None:
        stats["messages_observed"] = mesh.messages_sent
        stats["payload_bytes_observed"] = mesh.payload_bytes
    with open(out / "bench.json", "w") as f:
        json.dump(stats, f, indent=2)
        f.write("\n")
    print(f"{n} workers, {length} elements, {rounds} rounds over "
          f"{cfg['transport']}: {stats['ms_per_round']:.2f} ms/round, "
          f"bit-exact")
    return 0


# ------------------------------------------------------------------- parser

def _hidden_arg(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}"
        ) from None


def _add_common_train_args(sp, teacher=False, base=False, lattices=False):
    sp.add_argument("--config", help="JSON config file (or a manifest.json)")
    sp.add_argument("--data", required=True, help="training dataset (JSONL)")
    sp.add_argument("--val", required=True, help="validation dataset (JSONL)")
    sp.add_argument("--out", required=True, help="output directory")
    if teacher:
        sp.add_argument("--teacher", required=True, help="teacher model file")
    if base:
        sp.add_argument("--base", required=True, help="base model file")
    if lattices:
        sp.add_argument("--lattices", required=True,
                        help="hypothesis lattices (JSONL)")
    sp.add_argument("--hidden", type=_hidden_arg,
                    help="comma-separated LSTM hidden sizes")
    sp.add_argument("--stack", type=int, help="frame stacking factor")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--mini-batch", dest="mini_batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--sync-period", dest="sync_period", type=int)
    sp.add_argument("--strategy", choices=["bmuf", "ma"])
    sp.add_argument("--ema-alpha", dest="ema_alpha", type=float)
    sp.add_argument("--seed", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deeplstm",
        description="Deep LSTM training framework: layer-wise growth, "
                    "distillation, lattice sequence training, and synchronous "
                    "data-parallel SGD over a mesh allreduce.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    sp = sub.add_parser("gen-data", help="generate a synthetic HMM corpus")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-states", dest="num_states", type=int)
    sp.add_argument("--feature-dim", dest="feature_dim", type=int)
    sp.add_argument("--count", type=int)
    sp.add_argument("--val-count", dest="val_count", type=int)
    sp.add_argument("--separation", type=float)
    sp.add_argument("--self-loop", dest="self_loop", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="parallel frame-level training")
    _add_common_train_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("layerwise",
                        help="grow a deep model stage by stage")
    _add_common_train_args(sp)
    sp.add_argument("--subset-fraction", dest="subset_fraction", type=float)
    sp.set_defaults(func=cmd_layerwise)

    sp = sub.add_parser("distill",
                        help="train a student on a teacher's posteriors")
    _add_common_train_args(sp, teacher=True)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("transfer",
                        help="sequence-criterion fine-tuning on lattices")
    _add_common_train_args(sp, base=True, lattices=True)
    sp.add_argument("--subset-fraction", dest="subset_fraction", type=float)
    sp.add_argument("--kappa", type=float)
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("eval", help="frame error rate and speed of a model")
    sp.add_argument("--config")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stack", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("allreduce-bench",
                        help="time the mesh allreduce and verify bit-exactness")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--length", type=int)
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--transport", choices=["memory", "tcp"])
    sp.add_argument("--base-port", dest="base_port", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_allreduce_bench)
    return parser


def _setup_logging():
    name = os.environ.get("DST_LOG", "error").strip().lower()
    if name not in _LOG_LEVELS:
        raise ConfigError(
            f"DST_LOG must be one of {', '.join(_LOG_LEVELS)}; got {name!r}"
        )
    root = logging.getLogger("deeplstm")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(
            logging.Formatter("%(levelname)s %(name)s: %(message)s")
        )
        root.addHandler(handler)
    root.setLevel(_LOG_LEVELS[name])


def run(argv=None):
    """Execute one command; returns the process exit code."""
    try:
        _setup_logging()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/diagnostic
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ModelFormatError, DatasetFormatError,
            AggregationError) as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
