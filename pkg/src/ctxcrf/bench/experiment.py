"""Train/evaluate helpers shared by the CLI, the ablation ladder and scripts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..infer import predict
from ..potentials import ContextCRF
from ..train import TrainLog, TrainSample, train
from .config import ExperimentConfig
from .metrics import MetricsReport, compute_dataset_metrics


@dataclass
class RunResult:
    config: ExperimentConfig
    model: ContextCRF
    log: TrainLog
    metrics: MetricsReport
    coarse_metrics: MetricsReport


def train_model(config: ExperimentConfig, train_set: Sequence[TrainSample], on_epoch=None) -> tuple[ContextCRF, TrainLog]:
    model = ContextCRF(config.nets(), seed=config.seed)
    history = train(train_set, model, config.training(), on_epoch=on_epoch)
    return model, history


def predict_set(model: ContextCRF, config: ExperimentConfig, samples: Sequence[TrainSample]):
    refine = config.refinement()
    return [predict(model, s.image, refine, config.mf_iterations) for s in samples]


def coarse_truth(sample: TrainSample, prediction) -> np.ndarray:
    from ..train import downsample_mask

    h, w = prediction.coarse.shape
    return downsample_mask(sample.mask, (h, w), None).reshape(h, w)


def evaluate(model: ContextCRF, config: ExperimentConfig, samples: Sequence[TrainSample]) -> tuple[MetricsReport, MetricsReport]:
    """(full-resolution metrics, coarse node-level metrics) over ``samples``."""
    preds = predict_set(model, config, samples)
    k = config.num_classes
    full = compute_dataset_metrics(((p.final, s.mask) for p, s in zip(preds, samples)), k)
    coarse = compute_dataset_metrics(((p.coarse, coarse_truth(s, p)) for p, s in zip(preds, samples)), k)
    return full, coarse


def run(config: ExperimentConfig, train_set, test_set, model: ContextCRF | None = None, history: TrainLog | None = None) -> RunResult:
    if model is None:
        model, history = train_model(config, train_set)
    full, coarse = evaluate(model, config, test_set)
    return RunResult(config, model, history, full, coarse)
