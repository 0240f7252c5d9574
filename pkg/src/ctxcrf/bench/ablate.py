"""Component ladder: each rung switches on one more piece of the system.

    baseline      single scale, no pyramid pooling, no refinement, unary only
    +pyramid      sliding pyramid pooling
    +multiscale   all input scales
    +refinement   dense-CRF boundary refinement at prediction time
    +pairwise     contextual pairwise potentials
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

from .config import MODEL_KEYS, ExperimentConfig
from .experiment import RunResult, run, train_model
from .metrics import MetricsReport, csv_header

RUNG_NAMES = ("baseline", "+pyramid", "+multiscale", "+refinement", "+pairwise")

# fields that influence the trained parameters (refinement only acts at prediction time)
_TRAINING_KEYS = MODEL_KEYS + (
    "seed", "image_size", "noise_sigma", "count", "lr", "weight_decay", "momentum",
    "epochs", "batch_size", "augment", "flip", "scale_min", "scale_max", "clip_norm",
)


def ladder(full: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Five configs ending at ``full``; neighbours differ in exactly one field."""
    if not full.relations:
        raise ValueError("the full configuration needs at least one pairwise relation")
    if len(full.scales) < 2 or not full.pool_windows:
        raise ValueError("the full configuration needs several scales and pyramid windows")
    base = full.replace(scales=(full.scales[0],), pool_windows=(), refine=False, relations=())
    steps = [
        base,
        base.replace(pool_windows=full.pool_windows),
        base.replace(pool_windows=full.pool_windows, scales=full.scales),
        base.replace(pool_windows=full.pool_windows, scales=full.scales, refine=True),
        full.replace(refine=True),
    ]
    return list(zip(RUNG_NAMES, steps))


def changed_fields(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    return [f.name for f in fields(a) if getattr(a, f.name) != getattr(b, f.name)]


@dataclass
class RungResult:
    name: str
    changed: str
    result: RunResult

    @property
    def metrics(self) -> MetricsReport:
        return self.result.metrics


def _training_key(cfg: ExperimentConfig) -> tuple:
    return tuple(getattr(cfg, k) for k in _TRAINING_KEYS)


def run_ladder(
    full: ExperimentConfig,
    train_set: Sequence,
    test_set: Sequence,
    on_rung: Callable[[RungResult], None] | None = None,
) -> list[RungResult]:
    """Train and evaluate every rung; rungs with identical training settings share one model."""
    trained: dict[tuple, tuple] = {}
    out: list[RungResult] = []
    prev = None
    for name, cfg in ladder(full):
        key = _training_key(cfg)
        if key not in trained:
            trained[key] = train_model(cfg, train_set)
        model, history = trained[key]
        res = run(cfg, train_set, test_set, model=model, history=history)
        changed = ",".join(changed_fields(prev, cfg)) if prev is not None else ""
        rung = RungResult(name, changed, res)
        out.append(rung)
        if on_rung is not None:
            on_rung(rung)
        prev = cfg
    return out


def write_ladder_csv(path: str | Path, rungs: Sequence[RungResult]) -> None:
    k = len(rungs[0].metrics.per_class_iou)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "changed"] + csv_header(k) + ["coarse_mean_iou"])
        for r in rungs:
            wr.writerow([r.name, r.changed] + r.metrics.row() + [f"{r.result.coarse_metrics.iou:.6f}"])
