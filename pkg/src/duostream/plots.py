"""Rendering of training and evaluation CSV logs to figure files.

Readers skip '#' comment lines, so the report command accepts the files the
trainer and evaluator write without preprocessing.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ConfigError, LoadError  # noqa: E402


def read_csv_table(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"csv file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(line for line in fh
                                      if not line.startswith("#")) if r]
    if not rows:
        raise ConfigError(f"{path} has no header row")
    header, body = rows[0], rows[1:]
    if not body:
        raise ConfigError(f"{path} has a header but no data rows")
    return header, body


def _column(header: list[str], rows: list[list[str]], name: str,
            path) -> list[float]:
    try:
        idx = header.index(name)
    except ValueError:
        raise ConfigError(f"{path} lacks required column {name!r}, "
                          f"has {header}") from None
    return [float(r[idx]) for r in rows]


def plot_loss_curves(loss_csv, out_path) -> Path:
    """Total, segmentation, and reconstruction losses against step."""
    header, rows = read_csv_table(loss_csv)
    steps = _column(header, rows, "step", loss_csv)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, style in (("total", "-"), ("seg", "--"), ("rec", ":")):
        ax.plot(steps, _column(header, rows, name, loss_csv), style, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_validation_curve(val_csv, out_path) -> Path:
    """Validation Dice and IoU against epoch, best epoch marked."""
    header, rows = read_csv_table(val_csv)
    epochs = _column(header, rows, "epoch", val_csv)
    dice = _column(header, rows, "mean_dice", val_csv)
    iou = _column(header, rows, "mean_iou", val_csv)
    best = _column(header, rows, "is_best", val_csv)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, dice, "-o", markersize=3, label="dice")
    ax.plot(epochs, iou, "-s", markersize=3, label="iou")
    best_epochs = [e for e, b in zip(epochs, best) if b >= 1.0]
    if best_epochs:
        ax.axvline(best_epochs[-1], color="gray", linestyle=":",
                   label=f"best epoch {int(best_epochs[-1])}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("validation")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_domain_bars(summary_csv, out_path) -> Path:
    """Per-domain mean Dice/IoU bars from an evaluation summary."""
    header, rows = read_csv_table(summary_csv)
    domains = [r[header.index("domain")] for r in rows]
    dice = _column(header, rows, "mean_dice", summary_csv)
    iou = _column(header, rows, "mean_iou", summary_csv)
    x = range(len(domains))
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(domains)), 4))
    width = 0.38
    ax.bar([i - width / 2 for i in x], dice, width, label="dice")
    ax.bar([i + width / 2 for i in x], iou, width, label="iou")
    ax.set_xticks(list(x))
    ax.set_xticklabels(domains, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("per-domain evaluation")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, out_path)


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
