"""Pixel accuracy, mean accuracy and IoU from a confusion matrix."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

IGNORE = 255


@dataclass
class MetricsReport:
    pixel_accuracy: float
    mean_accuracy: float
    iou: float
    per_class_iou: list[float] = field(default_factory=list)  # NaN for classes absent from truth

    def row(self) -> list[str]:
        vals = [self.pixel_accuracy, self.mean_accuracy, self.iou, *self.per_class_iou]
        return [f"{v:.6f}" for v in vals]


def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int, ignore: int = IGNORE) -> np.ndarray:
    """[truth, pred] counts over non-ignored pixels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    valid = truth != ignore
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes):
        raise ValueError(f"labels must lie in [0,{num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def metrics_from_confusion(conf: np.ndarray) -> MetricsReport:
    conf = conf.astype(np.float64)
    tp = np.diag(conf)
    gt = conf.sum(axis=1)
    pr = conf.sum(axis=0)
    present = gt > 0
    total = conf.sum()
    pixel = tp.sum() / total if total else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(present, tp / gt, np.nan)
        iou = np.where(present, tp / (gt + pr - tp), np.nan)
    mean_acc = float(np.nanmean(recall)) if present.any() else 0.0
    mean_iou = float(np.nanmean(iou)) if present.any() else 0.0
    return MetricsReport(float(pixel), mean_acc, mean_iou, [float(v) for v in iou])


def compute_metrics(pred, truth, num_classes: int, ignore: int = IGNORE) -> MetricsReport:
    return metrics_from_confusion(confusion(pred, truth, num_classes, ignore))


def compute_dataset_metrics(pairs: Iterable[tuple[np.ndarray, np.ndarray]], num_classes: int) -> MetricsReport:
    """Metrics over a whole evaluation set (confusion summed across images)."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, truth in pairs:
        conf += confusion(pred, truth, num_classes)
    return metrics_from_confusion(conf)


def csv_header(num_classes: int) -> list[str]:
    return ["pixel_acc", "mean_acc", "mean_iou"] + [f"iou_{k}" for k in range(num_classes)]


def write_metrics_csv(path: str | Path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(csv_header(len(report.per_class_iou)))
        wr.writerow(report.row())
