"""Coarse CRF inference and the refinement stage.

``mean_field`` runs sequential (coordinate-ascent) updates in node index order,
so every full sweep is guaranteed not to increase KL(Q || P).  The exact
routines enumerate all K^N labelings and exist as test oracles.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import nn
from .graph import CrfGraph
from .potentials import ContextCRF, PotentialTables

ENUM_LIMIT = 10**7
DEFAULT_MF_ITERATIONS = 3


@dataclass
class Marginals:
    q: np.ndarray  # [N_nodes, K]

    def argmax(self) -> np.ndarray:
        return self.q.argmax(axis=1)


# ---------------------------------------------------------------------------
# Mean field
# ---------------------------------------------------------------------------


def _neighbourhoods(graph: CrfGraph, tables: PotentialTables):
    """Per node: list of (other nodes, tables oriented as [y_self, y_other])."""
    n = graph.num_nodes
    acc: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(n)]
    for name, edges in graph.edge_sets.items():
        if not len(edges):
            continue
        t = tables.pairwise[name]
        for side in (0, 1):
            own, other = edges[:, side], edges[:, 1 - side]
            oriented = t if side == 0 else t.transpose(0, 2, 1)
            order = np.argsort(own, kind="stable")
            own_sorted = own[order]
            bounds = np.searchsorted(own_sorted, np.arange(n + 1))
            for p in range(n):
                lo, hi = bounds[p], bounds[p + 1]
                if hi > lo:
                    sel = order[lo:hi]
                    acc[p].append((other[sel], oriented[sel]))
    out = []
    for parts in acc:
        if parts:
            out.append((np.concatenate([o for o, _ in parts]), np.concatenate([t for _, t in parts])))
        else:
            out.append(None)
    return out


def _check_tables(graph: CrfGraph, tables: PotentialTables) -> None:
    if tables.unary.shape[0] != graph.num_nodes:
        raise ValueError(f"unary table has {tables.unary.shape[0]} rows, graph has {graph.num_nodes} nodes")
    for name, edges in graph.edge_sets.items():
        k = tables.num_classes
        if len(edges) and tables.pairwise.get(name, np.empty(0)).shape != (len(edges), k, k):
            raise ValueError(f"pairwise table for {name!r} does not match {len(edges)} edges x {k}x{k}")


def mean_field_sweeps(graph: CrfGraph, tables: PotentialTables, iterations: int = DEFAULT_MF_ITERATIONS) -> Iterator[Marginals]:
    """Yield the initial Q and then Q after every full sequential sweep."""
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    _check_tables(graph, tables)
    q = nn.softmax(tables.unary)
    yield Marginals(q.copy())
    nbrs = _neighbourhoods(graph, tables)
    for _ in range(iterations):
        for p in range(graph.num_nodes):
            nb = nbrs[p]
            if nb is None:
                continue
            others, oriented = nb
            logit = tables.unary[p] + np.einsum("eab,eb->a", oriented, q[others])
            q[p] = nn.softmax(logit)
        yield Marginals(q.copy())


def mean_field(graph: CrfGraph, tables: PotentialTables, iterations: int = DEFAULT_MF_ITERATIONS) -> Marginals:
    *_, last = mean_field_sweeps(graph, tables, iterations)
    return last


# ---------------------------------------------------------------------------
# Exact enumeration (oracles)
# ---------------------------------------------------------------------------


def _check_enumerable(graph: CrfGraph, k: int) -> None:
    if k ** graph.num_nodes > ENUM_LIMIT:
        raise ValueError(
            f"K^N = {k}^{graph.num_nodes} exceeds the enumeration bound {ENUM_LIMIT}"
        )


def enumerate_energies(graph: CrfGraph, tables: PotentialTables, chunk: int = 1 << 16):
    """Yield (labelings [m,N], energies [m]) over all K^N labelings in chunks."""
    k = tables.num_classes
    n = graph.num_nodes
    _check_enumerable(graph, k)
    total = k**n
    powers = k ** np.arange(n - 1, -1, -1)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        ys = (idx[:, None] // powers[None, :]) % k
        e = -tables.unary[np.arange(n)[None, :], ys].sum(axis=1)
        for name, edges in graph.edge_sets.items():
            if len(edges):
                t = tables.pairwise[name]
                e = e - t[np.arange(len(edges))[None, :], ys[:, edges[:, 0]], ys[:, edges[:, 1]]].sum(axis=1)
        yield ys, e


def log_partition(graph: CrfGraph, tables: PotentialTables) -> float:
    m = -np.inf
    s = 0.0
    for _, e in enumerate_energies(graph, tables):
        neg = -e
        cm = neg.max()
        if cm > m:
            s = s * np.exp(m - cm) if np.isfinite(m) else 0.0
            m = cm
        s += np.exp(neg - m).sum()
    return float(m + np.log(s))


def exact_marginals(graph: CrfGraph, tables: PotentialTables) -> Marginals:
    k = tables.num_classes
    log_z = log_partition(graph, tables)
    q = np.zeros((graph.num_nodes, k))
    for ys, e in enumerate_energies(graph, tables):
        p = np.exp(-e - log_z)
        for node in range(graph.num_nodes):
            q[node] += np.bincount(ys[:, node], weights=p, minlength=k)
    q /= q.sum(axis=1, keepdims=True)
    return Marginals(q)


def kl_qp(graph: CrfGraph, tables: PotentialTables, marginals: Marginals) -> float:
    """KL(Q || P) for the factorised Q, by enumeration."""
    log_z = log_partition(graph, tables)
    logq_nodes = np.log(np.clip(marginals.q, 1e-300, None))
    n = graph.num_nodes
    kl = 0.0
    for ys, e in enumerate_energies(graph, tables):
        logq = logq_nodes[np.arange(n)[None, :], ys].sum(axis=1)
        qy = np.exp(logq)
        logp = -e - log_z
        kl += float((qy * (logq - logp)).sum())
    return kl


# ---------------------------------------------------------------------------
# Score maps and refinement
# ---------------------------------------------------------------------------


def coarse_scores(marginals: Marginals, graph_dims: tuple[int, int]) -> np.ndarray:
    h, w = graph_dims
    q = marginals.q
    if q.shape[0] != h * w:
        raise ValueError(f"{q.shape[0]} marginals do not fill a {h}x{w} grid")
    return q.T.reshape(q.shape[1], h, w).copy()


def upsample_scores(scores: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling that places each node at the centre of its grid cell.

    Node labels come from a regular partition of the image, so interpolating
    between cell centres keeps scores and labels registered.
    """
    return nn.bilinear_resize(scores, height, width, align_corners=False).data


@dataclass(frozen=True)
class RefineParams:
    potts_weight: float = 3.0
    appearance_weight: float = 10.0
    spatial_sigma: float = 3.0
    color_sigma: float = 20.0
    iterations: int = 5
    appearance_spatial_factor: float = 20.0
    max_pixels: int = 16384

    def validate(self) -> None:
        if self.potts_weight < 0 or self.appearance_weight < 0:
            raise ValueError("refinement weights must be >= 0")
        if self.spatial_sigma <= 0 or self.color_sigma <= 0:
            raise ValueError("refinement sigmas must be > 0")
        if self.iterations < 0:
            raise ValueError("refinement iterations must be >= 0")


def dense_kernel(image: np.ndarray, params: RefineParams) -> np.ndarray:
    """Pixel-pair kernel matrix [HW, HW] with a zero diagonal.

    ``image`` is [3,H,W] on the 0-255 scale.
    """
    _, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pos = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    col = image.reshape(3, -1).T.astype(np.float64)

    def sqdist(a):
        sq = (a * a).sum(axis=1)
        return np.maximum(sq[:, None] + sq[None, :] - 2.0 * a @ a.T, 0.0)

    d_pos = sqdist(pos)
    d_col = sqdist(col)
    app_sigma = params.spatial_sigma * params.appearance_spatial_factor
    kern = params.appearance_weight * np.exp(
        -d_pos / (2 * app_sigma**2) - d_col / (2 * params.color_sigma**2)
    )
    kern += params.potts_weight * np.exp(-d_pos / (2 * params.spatial_sigma**2))
    np.fill_diagonal(kern, 0.0)
    return kern


def dense_crf_refine(scores: np.ndarray, image: np.ndarray, params: RefineParams = RefineParams()) -> np.ndarray:
    """Fully connected Potts CRF mean field over pixels; returns an HxW label map.

    Parallel updates:  Q_i(l) ∝ exp(log s_i(l) - sum_j k(i,j) (1 - Q_j(l))).
    """
    params.validate()
    k, h, w = scores.shape
    if image.shape != (3, h, w):
        raise ValueError(f"image shape {image.shape} does not match scores {scores.shape}")
    if h * w > params.max_pixels:
        raise ValueError(f"{h}x{w} image exceeds the naive dense-CRF limit of {params.max_pixels} pixels")
    unary = np.log(np.clip(scores, 1e-8, 1.0)).reshape(k, -1).T  # -U
    if params.iterations == 0 or (params.potts_weight == 0 and params.appearance_weight == 0):
        return scores.argmax(axis=0)
    kern = dense_kernel(image, params)
    q = nn.softmax(unary)
    for _ in range(params.iterations):
        msg = kern @ q  # sum_j k(i,j) Q_j(l)
        penalty = kern.sum(axis=1, keepdims=True) - msg  # Potts: pay for every differing label
        q = nn.softmax(unary - penalty)
    return q.argmax(axis=1).reshape(h, w)


@dataclass
class Prediction:
    coarse: np.ndarray  # [h,w] labels
    final: np.ndarray  # [H,W] labels
    marginals: Marginals
    scores: np.ndarray  # [K,H,W] upsampled


def predict(
    model: ContextCRF,
    image: np.ndarray,
    refine: RefineParams | None = None,
    mf_iterations: int = DEFAULT_MF_ITERATIONS,
) -> Prediction:
    """Feature maps -> tables -> mean field -> upsample -> optional dense-CRF."""
    image = np.asarray(image, dtype=np.float64)
    graph, tables = model.tables(image)
    marg = mean_field(graph, tables, mf_iterations)
    coarse = coarse_scores(marg, (graph.height, graph.width))
    _, h, w = image.shape
    up = upsample_scores(coarse, h, w)
    if refine is None:
        final = up.argmax(axis=0)
    else:
        final = dense_crf_refine(up, image * 255.0, refine)
    return Prediction(coarse.argmax(axis=0), final, marg, up)


def write_scores(path, scores: np.ndarray) -> None:
    """Header line ``K H W`` then little-endian float32 values."""
    k, h, w = scores.shape
    with open(path, "wb") as fh:
        fh.write(f"{k} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(scores, dtype="<f4").tobytes())


def read_scores(path) -> np.ndarray:
    with open(path, "rb") as fh:
        k, h, w = (int(v) for v in fh.readline().split())
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != k * h * w:
        raise ValueError(f"score file holds {data.size} values, header says {k}x{h}x{w}")
    return data.reshape(k, h, w)
