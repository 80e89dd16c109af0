"""IoU-based referring-segmentation metrics: mIoU, oIoU and Precision@X."""
from __future__ import annotations

import csv
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
TABLE_COLUMNS = [f"P@{t}" for t in THRESHOLDS] + ["mIoU", "oIoU"]


def binarize(logits) -> np.ndarray:
    """Argmax over the trailing two logits; ties go to background."""
    x = np.asarray(logits)
    return (x[..., 1] > x[..., 0]).astype(np.uint8)


def counts(pred, gt) -> tuple[int, int]:
    """(intersection, union) pixel counts of two binary masks."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def iou(pred, gt) -> float:
    inter, union = counts(pred, gt)
    return 1.0 if union == 0 else inter / union


@dataclass
class MetricsReport:
    mIoU: float
    oIoU: float
    precision_at: dict[float, float]
    per_category: dict[str, float] = field(default_factory=dict)
    n_samples: int = 0
    ious: list[float] = field(default_factory=list)

    def row(self) -> list[float]:
        return [self.precision_at[t] for t in THRESHOLDS] + [self.mIoU, self.oIoU]


def evaluate(preds: Sequence, gts: Sequence, categories: Sequence[str] | None = None) -> MetricsReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ValueError("cannot evaluate an empty set")
    if categories is not None and len(categories) != len(preds):
        raise ValueError("one category label per sample is required")
    total_inter = total_union = 0
    ious = []
    for p, g in zip(preds, gts):
        inter, union = counts(p, g)
        total_inter += inter
        total_union += union
        ious.append(1.0 if union == 0 else inter / union)
    arr = np.array(ious)
    precision = {t: float(np.count_nonzero(arr >= t)) / len(arr) for t in THRESHOLDS}
    per_cat: dict[str, list[float]] = defaultdict(list)
    for cat, v in zip(categories or (), ious):
        per_cat[cat].append(v)
    return MetricsReport(
        mIoU=float(arr.mean()),
        oIoU=1.0 if total_union == 0 else total_inter / total_union,
        precision_at=precision,
        per_category={c: float(np.mean(v)) for c, v in sorted(per_cat.items())},
        n_samples=len(arr),
        ious=ious,
    )


def write_report_csv(reports: dict[str, MetricsReport] | MetricsReport, path: str | os.PathLike,
                     label_columns: Sequence[str] = ()) -> None:
    """Table-shaped CSV: optional label columns then P@0.5..P@0.9, mIoU, oIoU.

    ``reports`` maps a row label (a tuple for several label columns) to a
    report; a bare report is written as a single unlabelled row.
    """
    if isinstance(reports, MetricsReport):
        reports = {(): reports}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(label_columns) + TABLE_COLUMNS)
        for label, rep in reports.items():
            labels = list(label) if isinstance(label, tuple) else [label]
            w.writerow(labels + [f"{v:.17g}" for v in rep.row()])


def write_category_csv(report: MetricsReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "mIoU"])
        for cat, v in report.per_category.items():
            w.writerow([cat, f"{v:.17g}"])
        w.writerow(["average", f"{report.mIoU:.17g}"])
