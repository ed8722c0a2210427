"""Evaluation: thresholded Dice and IoU, per-image and aggregated.

Predictions binarize as strictly-greater-than the threshold; ground truth
must already be binary. The empty-vs-empty case scores 1.0 for both metrics
(a correct all-background prediction), and that convention is written into
every report header.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import DatasetManifest, MaskBuffer, load_image, load_mask
from .errors import ConfigError, ShapeError
from .model import image_batch, tensor_to_masks

EMPTY_VS_EMPTY = 1.0


def _counts(pred: MaskBuffer, gt: MaskBuffer, threshold: float) -> tuple[int, int, int]:
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"pred {pred.data.shape} and gt {gt.data.shape} "
                         f"shapes differ")
    if not gt.is_binary:
        raise ConfigError("ground-truth mask must be binary")
    if not 0.0 <= threshold < 1.0:
        raise ConfigError(f"threshold must lie in [0, 1), got {threshold}")
    p = pred.data > threshold
    g = gt.data > 0.5
    inter = int(np.logical_and(p, g).sum())
    return inter, int(p.sum()), int(g.sum())


def dice_score(pred: MaskBuffer, gt: MaskBuffer, threshold: float = 0.5) -> float:
    inter, p, g = _counts(pred, gt, threshold)
    if p + g == 0:
        return EMPTY_VS_EMPTY
    return 2.0 * inter / (p + g)


def iou_score(pred: MaskBuffer, gt: MaskBuffer, threshold: float = 0.5) -> float:
    inter, p, g = _counts(pred, gt, threshold)
    union = p + g - inter
    if union == 0:
        return EMPTY_VS_EMPTY
    return inter / union


@dataclass(frozen=True)
class EvalRow:
    image_id: str
    domain_tag: str
    dice: float
    iou: float


@dataclass(frozen=True)
class DomainStats:
    n: int
    mean_dice: float
    mean_iou: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    threshold: float
    skipped: int

    @property
    def overall(self) -> DomainStats:
        return DomainStats(len(self.rows),
                           float(np.mean([r.dice for r in self.rows])),
                           float(np.mean([r.iou for r in self.rows])))

    def by_domain(self) -> dict[str, DomainStats]:
        groups: dict[str, list[EvalRow]] = {}
        for row in self.rows:
            groups.setdefault(row.domain_tag, []).append(row)
        return {tag: DomainStats(len(rs),
                                 float(np.mean([r.dice for r in rs])),
                                 float(np.mean([r.iou for r in rs])))
                for tag, rs in groups.items()}

    def _header_comments(self) -> list[str]:
        return [f"# threshold={self.threshold!r}",
                f"# empty_vs_empty={EMPTY_VS_EMPTY!r}",
                f"# skipped_records={self.skipped}"]

    def to_image_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            for line in self._header_comments():
                fh.write(line + "\n")
            writer = csv.writer(fh)
            writer.writerow(["id", "domain", "dice", "iou"])
            for row in self.rows:
                writer.writerow([row.image_id, row.domain_tag,
                                 f"{row.dice:.6f}", f"{row.iou:.6f}"])
        return path

    def to_summary_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            for line in self._header_comments():
                fh.write(line + "\n")
            writer = csv.writer(fh)
            writer.writerow(["domain", "n", "mean_dice", "mean_iou"])
            for tag, stats in sorted(self.by_domain().items()):
                writer.writerow([tag, stats.n, f"{stats.mean_dice:.6f}",
                                 f"{stats.mean_iou:.6f}"])
            o = self.overall
            writer.writerow(["overall", o.n, f"{o.mean_dice:.6f}",
                             f"{o.mean_iou:.6f}"])
        return path


def evaluate_dataset(model, manifest: DatasetManifest,
                     threshold: float = 0.5) -> EvalReport:
    """Run the mask head over every record that has a mask.

    Records without masks are skipped and counted in the report. Metrics are
    per-image, then averaged (per domain and overall).
    """
    rows = []
    skipped = 0
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            for rec in manifest:
                if rec.mask_path is None:
                    skipped += 1
                    continue
                image = load_image(manifest.resolve(rec.image_path))
                gt = load_mask(manifest.resolve(rec.mask_path))
                pred_t = model.forward_mask(image_batch([image]))
                pred = tensor_to_masks(pred_t)[0]
                rows.append(EvalRow(rec.image_path, rec.domain_tag,
                                    dice_score(pred, gt, threshold),
                                    iou_score(pred, gt, threshold)))
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    if not rows:
        raise ConfigError("no evaluable records: every record lacks a mask "
                          "or the manifest is empty")
    return EvalReport(tuple(rows), threshold, skipped)
