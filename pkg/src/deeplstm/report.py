"""Render training curves as PNG figures next to the metrics CSV."""

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def write_report(metrics, out_dir):
    """Write metrics.csv plus loss and frame-error curves under out_dir.

    Returns the list of paths written. Figures are skipped when there are
    no rows to plot (e.g. aborted before the first synchronization).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    metrics.to_csv(csv_path)
    written = [csv_path]

    periods, train_loss, val_loss, val_fer = metrics.series("global")
    if periods.size == 0:
        return written
    ema_periods, _, ema_val_loss, ema_val_fer = metrics.series("ema")

    fig, ax = plt.subplots(figsize=(7.0, 4.4))
    if not all(math.isnan(x) for x in train_loss):
        ax.plot(periods, train_loss, label="train loss", color="tab:blue")
    ax.plot(periods, val_loss, label="val loss", color="tab:orange")
    if ema_periods.size:
        ax.plot(ema_periods, ema_val_loss, label="val loss (EMA)",
                color="tab:green", linestyle="--")
    ax.set_xlabel("sync period")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    loss_path = out / "loss_curves.png"
    fig.savefig(loss_path, dpi=120)
    plt.close(fig)
    written.append(loss_path)

    fig, ax = plt.subplots(figsize=(7.0, 4.4))
    ax.plot(periods, val_fer, label="val FER", color="tab:orange")
    if ema_periods.size:
        ax.plot(ema_periods, ema_val_fer, label="val FER (EMA)",
                color="tab:green", linestyle="--")
    ax.set_xlabel("sync period")
    ax.set_ylabel("frame error rate")
    ax.set_ylim(bottom=0.0)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fer_path = out / "val_fer.png"
    fig.savefig(fer_path, dpi=120)
    plt.close(fig)
    written.append(fer_path)
    return written
