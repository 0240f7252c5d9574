"""Finite-difference gradient suites and mean-field vs exact comparisons.

Shared by the ``check-grad`` and ``oracle-compare`` commands and the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import nn
from ..featmap import BlockSpec, FeatMapConfig
from ..graph import ABOVE_BELOW, SURROUND, RelationSpec, build_graph
from ..infer import exact_marginals, mean_field
from ..nn import Tensor
from ..potentials import ContextCRF, PotentialNetsConfig, PotentialTables
from ..train import downsample_mask, exact_nll, piecewise_nll

GRAD_TOLERANCE = 1e-4
TABLE_GRAD_TOLERANCE = 1e-6


@dataclass
class SuiteResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tolerance)


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _make_cases() -> dict[str, Callable]:
    def conv(rng):
        x, w, b = _leaf(rng, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        r = rng.standard_normal(3 * 5 * 5)
        return lambda: _dot(nn.conv2d(x, w, b, 1, 1), r), [x, w, b]

    def conv_strided(rng):
        x, w, b = _leaf(rng, 2, 7, 6), _leaf(rng, 2, 2, 3, 3), _leaf(rng, 2)
        out = nn.conv2d(x, w, b, 2, 1).data.size
        r = rng.standard_normal(out)
        return lambda: _dot(nn.conv2d(x, w, b, 2, 1), r), [x, w, b]

    def max_pool(rng):
        x = _leaf(rng, 2, 7, 7)
        r = rng.standard_normal(nn.max_pool2d(x, 3, 2, 1).data.size)
        return lambda: _dot(nn.max_pool2d(x, 3, 2, 1), r), [x]

    def resize(rng):
        x = _leaf(rng, 2, 3, 4)
        r = rng.standard_normal(2 * 7 * 5)
        return lambda: _dot(nn.bilinear_resize(x, 7, 5), r), [x]

    def linear(rng):
        x, w, b = _leaf(rng, 4, 5), _leaf(rng, 3, 5), _leaf(rng, 3)
        r = rng.standard_normal(12)
        return lambda: _dot(nn.linear(x, w, b), r), [x, w, b]

    def xent(rng):
        z = _leaf(rng, 6, 4)
        y = rng.integers(0, 4, size=6)
        return lambda: nn.softmax_xent(z, y, reduction="sum"), [z]

    def end_to_end(rng):
        model, image, labels, graph = _tiny_problem(rng)
        params = [t for store in model.param_stores().values() for _, t in store.items()]

        def loss():
            _, unary, pairwise = model.forward(image, graph)
            return piecewise_nll(graph, unary, pairwise, labels)

        return loss, params

    return {
        "conv2d": conv,
        "conv2d_strided": conv_strided,
        "max_pool2d": max_pool,
        "bilinear_resize": resize,
        "linear": linear,
        "softmax_xent": xent,
        "piecewise_nll": end_to_end,
    }


def _dot(t: Tensor, r: np.ndarray) -> Tensor:
    return nn.total(nn.linear(nn.reshape(t, (1, -1)), Tensor(r.reshape(1, -1)), Tensor(np.zeros(1))))


def tiny_nets_config(num_classes: int = 3) -> PotentialNetsConfig:
    """Smallest useful model: one pooled block, one scale, a 3-window pyramid."""
    fm = FeatMapConfig(
        scales=(1.0,),
        shared_blocks=(BlockSpec(2, 1, 2, 3),),
        scale_block=BlockSpec(2, 1, 0, 1),
        pool_windows=(3,),
        downsample_factor=2,
    )
    rels = (RelationSpec(SURROUND, SURROUND), RelationSpec(ABOVE_BELOW, ABOVE_BELOW))
    return PotentialNetsConfig(num_classes, (4,), (4,), fm, rels)


def _tiny_problem(rng: np.random.Generator):
    cfg = tiny_nets_config()
    model = ContextCRF(cfg, seed=int(rng.integers(2**31)))
    # random biases keep ReLUs away from their kink at zero
    for store in model.param_stores().values():
        for name, t in store.items():
            if name.endswith("bias"):
                t.data[...] = rng.uniform(0.05, 0.2, t.data.shape)
    image = rng.uniform(0, 1, (3, 8, 8))
    graph, _, _ = model.forward(image)
    mask = rng.integers(0, cfg.num_classes, (8, 8))
    labels = downsample_mask(mask, (graph.height, graph.width), cfg.num_classes)
    return model, image, labels, graph


def gradient_suite(seed: int = 0, num_seeds: int = 10) -> list[SuiteResult]:
    """Worst relative error per case over ``num_seeds`` random draws."""
    out = []
    for name, make in _make_cases().items():
        worst = 0.0
        for s in range(num_seeds):
            loss_fn, tensors = make(np.random.default_rng([seed, s, len(name)]))
            worst = max(worst, nn.gradcheck(loss_fn, tensors))
        out.append(SuiteResult(name, worst, GRAD_TOLERANCE))
    out.append(SuiteResult("exact_nll", exact_nll_gradcheck(seed, num_seeds), TABLE_GRAD_TOLERANCE))
    return out


def random_instance(rng: np.random.Generator, height: int, width: int, k: int, box_ratio: float = 0.4, pair_scale: float = 1.0):
    rels = (RelationSpec(SURROUND, SURROUND, box_ratio), RelationSpec(ABOVE_BELOW, ABOVE_BELOW, box_ratio))
    graph = build_graph(height, width, rels, k)
    unary = rng.standard_normal((graph.num_nodes, k))
    pair = {n: pair_scale * rng.standard_normal((len(e), k, k)) for n, e in graph.edge_sets.items()}
    return graph, PotentialTables(unary, pair)


def exact_nll_gradcheck(seed: int = 0, num_seeds: int = 10, eps: float = 1e-6) -> float:
    worst = 0.0
    for s in range(num_seeds):
        rng = np.random.default_rng([seed, s, 99])
        graph, tables = random_instance(rng, 2, 3, 2)
        labels = rng.integers(0, 2, graph.num_nodes)
        _, grad = exact_nll(graph, tables, labels)
        arrays = [tables.unary, *tables.pairwise.values()]
        analytic = [grad.unary, *grad.pairwise.values()]
        for arr, a in zip(arrays, analytic):
            num = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = exact_nll(graph, tables, labels)[0]
                flat[i] = orig - eps
                fm = exact_nll(graph, tables, labels)[0]
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
            worst = max(worst, nn.relative_error(a, num))
    return worst


def piecewise_descent(
    seed: int = 0,
    instances: int = 50,
    height: int = 3,
    width: int = 3,
    num_classes: int = 2,
    lr: float = 0.05,
    steps: int = 5,
) -> list[tuple[float, float]]:
    """(initial, final) exact NLL when table entries are fitted with piecewise gradients.

    No networks: the tables themselves are the parameters, so the check isolates
    whether the piecewise objective points downhill on the true likelihood.
    """
    out = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i, 7])
        graph, tables = random_instance(rng, height, width, num_classes)
        labels = rng.integers(0, num_classes, graph.num_nodes)
        start = exact_nll(graph, tables, labels)[0]
        unary = Tensor(tables.unary.copy(), requires_grad=True)
        pair = {n: Tensor(v.copy(), requires_grad=True) for n, v in tables.pairwise.items()}
        for _ in range(steps):
            for t in (unary, *pair.values()):
                t.grad = None
            with nn.Tape() as tape:
                loss = piecewise_nll(graph, unary, pair, labels)
            tape.backward(loss)
            for t in (unary, *pair.values()):
                t.data -= lr * t.grad
        fitted = PotentialTables(unary.data, {n: t.data for n, t in pair.items()})
        out.append((start, exact_nll(graph, fitted, labels)[0]))
    return out


# ---------------------------------------------------------------------------
# Mean field against enumeration
# ---------------------------------------------------------------------------

COUPLING_SCALES = (1.0, 0.5, 0.1, 0.01)


@dataclass
class OracleRow:
    scale: float
    mean_error: float
    max_error: float


def oracle_compare(
    seed: int = 0,
    instances: int = 20,
    height: int = 3,
    width: int = 3,
    num_classes: int = 3,
    iterations: int = 10,
    scales=COUPLING_SCALES,
) -> list[OracleRow]:
    """Max-abs marginal error of mean field vs enumeration, per pairwise scale.

    The same random instances are reused for every scale so rows are comparable.
    """
    errors = {s: [] for s in scales}
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        graph, tables = random_instance(rng, height, width, num_classes)
        for s in scales:
            t = tables.scaled_pairwise(s)
            exact = exact_marginals(graph, t).q
            approx = mean_field(graph, t, iterations).q
            errors[s].append(float(np.abs(exact - approx).max()))
    return [OracleRow(s, float(np.mean(e)), float(np.max(e))) for s, e in errors.items()]
