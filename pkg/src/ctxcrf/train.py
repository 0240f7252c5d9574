"""Piecewise-likelihood training of the unary and pairwise networks.

Each potential is normalised on its own (softmax over K for a node, over K^2
for an edge), so no CRF inference is ever needed to get a gradient.
``exact_nll`` is the full-likelihood counterpart used as a test oracle.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .graph import CrfGraph
from .infer import enumerate_energies, log_partition
from .nn import Tape, Tensor
from .potentials import UNARY, ContextCRF, PotentialTables, energy

log = logging.getLogger(__name__)

IGNORE = 255
AUG_SCALE_RANGE = (0.7, 1.2)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 10
    seed: int = 0
    augment: bool = False
    scale_range: tuple[float, float] = AUG_SCALE_RANGE
    flip: bool = True
    loss_weights: tuple[tuple[str, float], ...] = ()
    clip_norm: float | None = None  # per-network gradient norm cap; None is plain SGD

    def validate(self) -> None:
        # lr = 0 is allowed: a frozen run that only records the loss
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        lo, hi = self.scale_range
        if not lo < hi:
            raise ValueError(f"scale_range low must be < high, got {self.scale_range}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def weight(self, name: str) -> float:
        return dict(self.loss_weights).get(name, 1.0)


@dataclass
class TrainSample:
    image: np.ndarray  # [3,H,W] floats in [0,1]
    mask: np.ndarray  # [H,W] ints, IGNORE for unlabeled

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree")


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def downsample_mask(mask: np.ndarray, graph_dims: tuple[int, int], num_classes: int | None = None) -> np.ndarray:
    """Majority label per cell of the regular h x w partition; ties -> lowest class."""
    mask = np.asarray(mask)
    h, w = graph_dims
    big_h, big_w = mask.shape
    if h > big_h or w > big_w:
        raise ValueError(f"cannot map a {big_h}x{big_w} mask onto a {h}x{w} grid")
    k = num_classes or int(mask[mask != IGNORE].max(initial=0)) + 1
    ys = np.round(np.linspace(0, big_h, h + 1)).astype(int)
    xs = np.round(np.linspace(0, big_w, w + 1)).astype(int)
    out = np.full((h, w), IGNORE, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            cell = mask[ys[r] : ys[r + 1], xs[c] : xs[c + 1]]
            cell = cell[cell != IGNORE]
            if cell.size:
                out[r, c] = int(np.bincount(cell.ravel().astype(np.int64), minlength=k).argmax())
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def piecewise_terms(
    graph: CrfGraph, unary, pairwise: dict, labels, batch: int = 1
) -> dict[str, Tensor]:
    """Per-potential summed NLL terms; ignored nodes and their edges drop out.

    ``unary`` is [B*N, K] and ``pairwise[rel]`` is [B*E, K, K] (or [B*E, K^2])
    for ``labels`` of length B*N, image-major.
    """
    unary = nn.as_tensor(unary)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = graph.num_nodes
    if y.shape[0] != batch * n:
        raise ValueError(f"{y.shape[0]} labels for {batch} x {n} nodes")
    k = unary.shape[1]
    valid = y != IGNORE
    if np.any(y[valid] >= k) or np.any(y[valid] < 0):
        raise ValueError(f"labels must lie in [0,{k}) or equal {IGNORE}")
    if not valid.any():
        warnings.warn("all nodes carry the ignore label; piecewise loss is 0", RuntimeWarning, stacklevel=2)
    terms: dict[str, Tensor] = {}
    keep = np.flatnonzero(valid)
    terms[UNARY] = nn.softmax_xent(nn.take_rows(unary, keep), y[keep], reduction="sum")
    for name, table in pairwise.items():
        table = nn.as_tensor(table)
        edges = graph.edge_sets[name]
        m = len(edges)
        if table.shape[0] != batch * m:
            raise ValueError(f"{name}: {table.shape[0]} edge rows for {batch} x {m} edges")
        flat = nn.reshape(table, (batch * m, k * k))
        offs = np.repeat(np.arange(batch) * n, m)
        yp = y[np.tile(edges[:, 0], batch) + offs]
        yq = y[np.tile(edges[:, 1], batch) + offs]
        ok = np.flatnonzero((yp != IGNORE) & (yq != IGNORE))
        terms[name] = nn.softmax_xent(nn.take_rows(flat, ok), yp[ok] * k + yq[ok], reduction="sum")
    return terms


def piecewise_nll(graph: CrfGraph, unary, pairwise: dict, labels, batch: int = 1) -> Tensor:
    """Sum over nodes of -log P_U plus sum over edges of -log P_V."""
    terms = piecewise_terms(graph, unary, pairwise, labels, batch)
    return nn.add_scalars(list(terms.values()))


def exact_nll(graph: CrfGraph, tables: PotentialTables, labels) -> tuple[float, PotentialTables]:
    """E(y) + log Z and its gradient w.r.t. every table entry (marginal - indicator)."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    log_z = log_partition(graph, tables)
    loss = energy(graph, tables, y) + log_z
    k = tables.num_classes
    n = graph.num_nodes
    g_unary = np.zeros_like(tables.unary)
    g_pair = {name: np.zeros_like(t) for name, t in tables.pairwise.items()}
    for ys, e in enumerate_energies(graph, tables):
        p = np.exp(-e - log_z)
        for node in range(n):
            g_unary[node] += np.bincount(ys[:, node], weights=p, minlength=k)
        for name, edges in graph.edge_sets.items():
            for ei, (a, b) in enumerate(edges):
                g_pair[name][ei] += np.bincount(ys[:, a] * k + ys[:, b], weights=p, minlength=k * k).reshape(k, k)
    g_unary[np.arange(n), y] -= 1.0
    for name, edges in graph.edge_sets.items():
        if len(edges):
            g_pair[name][np.arange(len(edges)), y[edges[:, 0]], y[edges[:, 1]]] -= 1.0
    return float(loss), PotentialTables(g_unary, g_pair)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def nearest_resize(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    big_h, big_w = mask.shape
    rows = np.minimum((np.arange(height) + 0.5) * big_h / height, big_h - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * big_w / width, big_w - 1).astype(int)
    return mask[rows[:, None], cols[None, :]]


def augment(
    sample: TrainSample,
    rng: np.random.Generator,
    config: TrainConfig = TrainConfig(),
    scale: float | None = None,
    flip: bool | None = None,
) -> TrainSample:
    """Random rescale in ``config.scale_range`` and horizontal flip (p = 0.5)."""
    lo, hi = config.scale_range
    if scale is None:
        scale = float(rng.uniform(lo, hi))
    elif not lo <= scale <= hi:
        raise ValueError(f"augmentation scale {scale} outside configured range [{lo}, {hi}]")
    if flip is None:
        flip = bool(config.flip and rng.random() < 0.5)
    _, h, w = sample.image.shape
    nh, nw = max(1, int(round(scale * h))), max(1, int(round(scale * w)))
    image, mask = sample.image, sample.mask
    if (nh, nw) != (h, w):
        image = nn.bilinear_resize(image, nh, nw).data
        mask = nearest_resize(mask, nh, nw)
    if flip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    return TrainSample(np.ascontiguousarray(image), np.ascontiguousarray(mask))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def totals(self) -> list[float]:
        return [r[-1] for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", *self.columns, "total"])
            for i, row in enumerate(self.rows):
                wr.writerow([i + 1, *(repr(float(v)) for v in row)])


class DivergenceError(RuntimeError):
    pass


def _sample_loss(model: ContextCRF, samples: Sequence[TrainSample], config: TrainConfig):
    """Mean over samples of the weighted per-sample piecewise loss, on the active tape."""
    images = np.stack([s.image for s in samples])
    graph, unary, pairwise = model.forward(images)
    labels = np.concatenate(
        [downsample_mask(s.mask, (graph.height, graph.width), model.num_classes) for s in samples]
    )
    terms = piecewise_terms(graph, unary, pairwise, labels, batch=len(samples))
    weighted = [nn.scale(t, config.weight(name)) for name, t in terms.items()]
    return terms, nn.add_scalars(weighted)


def train(
    dataset: Sequence[TrainSample],
    model: ContextCRF,
    config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, list[float]], None] | None = None,
) -> TrainLog:
    """Minibatch SGD on the piecewise objective; parameters update in place."""
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    names = model.config.potential_names
    stores = list(model.param_stores().values())
    history = TrainLog(columns=[f"{n}_loss" for n in names])
    n = len(dataset)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(len(names))
        for start in range(0, n, config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            if config.augment:
                batch = [augment(s, rng, config) for s in batch]
            for st in stores:
                st.zero_grad()
            # same-size samples share one forward pass; groups keep batch order
            groups: dict[tuple[int, ...], list[TrainSample]] = {}
            for s in batch:
                groups.setdefault(s.image.shape, []).append(s)
            for group in groups.values():
                with Tape() as tape:
                    terms, loss = _sample_loss(model, group, config)
                tape.backward(loss, seed=1.0 / len(batch))
                sums += [float(terms[nm].data) for nm in names]
            for st in stores:
                if config.clip_norm is not None:
                    nn.clip_grad_norm(st, config.clip_norm)
                nn.sgd_step(st, config.lr, config.weight_decay, config.momentum)
        row = list(sums / n) + [float(sums.sum() / n)]
        if not np.all(np.isfinite(row)):
            raise DivergenceError(f"piecewise loss became non-finite in epoch {epoch + 1}")
        history.rows.append(row)
        log.info("epoch %d  total %.4f", epoch + 1, row[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, row)
    return history


def evaluate_piecewise(model: ContextCRF, dataset: Sequence[TrainSample]) -> float:
    """Mean per-sample piecewise loss without touching gradients."""
    total = 0.0
    for s in dataset:
        _, loss = _sample_loss(model, [s], TrainConfig())
        total += float(loss.data)
    return total / len(dataset)
