"""Unary-Net and Pairwise-Net heads, the three-network model, and CRF energy.

Sign convention: nets output confidences ``z``; potentials are ``U = -z`` and
``V = -z``.  :class:`PotentialTables` stores the raw ``z`` values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .featmap import FeatMapConfig, FeatMapNet, FeatureMap, build_featmapnet
from .graph import CrfGraph, RelationSpec, build_graph, default_relations
from .nn import ParamStore, Tensor

UNARY = "unary"


@dataclass(frozen=True)
class PotentialNetsConfig:
    num_classes: int = 5
    unary_hidden: tuple[int, ...] = (32,)
    pairwise_hidden: tuple[int, ...] = (32,)
    featmap: FeatMapConfig = field(default_factory=FeatMapConfig)
    relations: tuple[RelationSpec, ...] = field(default_factory=lambda: tuple(default_relations()))
    share_trunk: bool = False

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in (*self.unary_hidden, *self.pairwise_hidden)):
            raise ValueError("hidden widths must be positive")
        self.featmap.validate()

    @property
    def potential_names(self) -> list[str]:
        return [UNARY] + [r.name for r in self.relations]


@dataclass
class PotentialTables:
    """``unary[p, y]`` and ``pairwise[rel][e, y_p, y_q]`` hold net outputs z."""

    unary: np.ndarray
    pairwise: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.unary.shape[1]

    def scaled_pairwise(self, factor: float) -> "PotentialTables":
        return PotentialTables(self.unary.copy(), {k: v * factor for k, v in self.pairwise.items()})

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.unary).all() and all(np.isfinite(v).all() for v in self.pairwise.values()))


class Head:
    """Fully connected stack: affine, ReLU, ..., affine."""

    def __init__(self, params: ParamStore, prefix: str, widths: Sequence[int]):
        self.params = params
        self.prefix = prefix
        self.widths = tuple(widths)

    @classmethod
    def build(cls, params: ParamStore, prefix: str, widths: Sequence[int], rng: np.random.Generator) -> "Head":
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params.add(f"{prefix}fc{i + 1}.weight", nn.glorot_uniform(rng, (b, a), a, b))
            params.add(f"{prefix}fc{i + 1}.bias", np.zeros(b))
        return cls(params, prefix, widths)

    @property
    def in_width(self) -> int:
        return self.widths[0]

    def __call__(self, x: Tensor) -> Tensor:
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            x = nn.linear(x, self.params[f"{self.prefix}fc{i + 1}.weight"], self.params[f"{self.prefix}fc{i + 1}.bias"])
            if i < n_layers - 1:
                x = nn.relu(x)
        return x


def _node_features(fmap: FeatureMap | Tensor) -> Tensor:
    t = fmap.tensor if isinstance(fmap, FeatureMap) else nn.as_tensor(fmap)
    return nn.flatten_nodes(t)


def unary_forward(fmap: FeatureMap | Tensor, head: Head) -> Tensor:
    """[N_nodes, K] table of z; for batched maps rows run over (image, node)."""
    feats = _node_features(fmap)
    if feats.shape[1] != head.in_width:
        raise ValueError(f"feature map has {feats.shape[1]} channels, unary head expects {head.in_width}")
    return head(feats)


def pairwise_forward(fmap: FeatureMap | Tensor, edges, head: Head, num_classes: int | None = None) -> Tensor:
    """[N_edges, K, K] table; edge feature is concat(feature(p), feature(q))."""
    feats = _node_features(fmap)
    if 2 * feats.shape[1] != head.in_width:
        raise ValueError(
            f"edge features have width {2 * feats.shape[1]}, pairwise head expects {head.in_width}"
        )
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    k2 = head.widths[-1]
    k = num_classes or int(round(np.sqrt(k2)))
    if k * k != k2:
        raise ValueError(f"pairwise head width {k2} is not K^2")
    pair = nn.concat([nn.take_rows(feats, edges[:, 0]), nn.take_rows(feats, edges[:, 1])], axis=1)
    return nn.reshape(head(pair), (len(edges), k, k))


def batch_edges(edges: np.ndarray, num_nodes: int, batch: int) -> np.ndarray:
    """Offset one image's edge list to index rows of a batched node table."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return np.concatenate([edges + b * num_nodes for b in range(batch)]) if batch > 1 else edges


def energy(graph: CrfGraph, tables: PotentialTables, labeling) -> float:
    y = np.asarray(labeling, dtype=np.int64).reshape(-1)
    k = tables.num_classes
    if y.shape[0] != graph.num_nodes:
        raise ValueError(f"labeling has {y.shape[0]} entries, graph has {graph.num_nodes} nodes")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0,{k})")
    e = -tables.unary[np.arange(len(y)), y].sum()
    for name, edges in graph.edge_sets.items():
        if len(edges):
            t = tables.pairwise[name]
            e -= t[np.arange(len(edges)), y[edges[:, 0]], y[edges[:, 1]]].sum()
    return float(e)


@dataclass
class PotentialNet:
    """One FeatMap-Net plus its head, owning (or sharing) a ParamStore."""

    name: str
    trunk: FeatMapNet
    head: Head
    params: ParamStore


class ContextCRF:
    """The unary net plus one pairwise net per relation."""

    def __init__(self, config: PotentialNetsConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.nets: dict[str, PotentialNet] = {}
        fm = config.featmap
        d = fm.out_channels
        k = config.num_classes
        shared = None
        for name in config.potential_names:
            # per-potential seed depends only on (seed, name): nets train identically across configs
            rng_seed = int(np.random.SeedSequence([seed, *name.encode()]).generate_state(1)[0])
            rng = np.random.default_rng(rng_seed)
            if shared is not None:
                trunk, params = shared
            else:
                trunk, params = build_featmapnet(fm, rng_seed, prefix="featmap.")
                if config.share_trunk:
                    shared = (trunk, params)
            if name == UNARY:
                head = Head.build(params, f"{name}_head.", (d, *config.unary_hidden, k), rng)
            else:
                head = Head.build(params, f"{name}_head.", (2 * d, *config.pairwise_hidden, k * k), rng)
            self.nets[name] = PotentialNet(name, trunk, head, params)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def relation_names(self) -> list[str]:
        return [r.name for r in self.config.relations]

    def param_stores(self) -> dict[str, ParamStore]:
        """Distinct stores keyed by the first potential that owns them."""
        out: dict[str, ParamStore] = {}
        seen: set[int] = set()
        for name, net in self.nets.items():
            if id(net.params) not in seen:
                seen.add(id(net.params))
                out[name] = net.params
        return out

    def graph_for(self, height: int, width: int) -> CrfGraph:
        return build_graph(height, width, self.config.relations, self.num_classes)

    def feature_maps(self, images) -> dict[str, FeatureMap]:
        images = nn.as_tensor(images)
        out: dict[str, FeatureMap] = {}
        cache: dict[int, FeatureMap] = {}
        for name, net in self.nets.items():
            key = id(net.trunk)
            if key not in cache:
                cache[key] = net.trunk.forward(images)
            out[name] = cache[key]
        return out

    def forward(self, images, graph: CrfGraph | None = None) -> tuple[CrfGraph, Tensor, dict[str, Tensor]]:
        """Potential tables as tape tensors for a single image or a batch.

        Batched tables stack images along the first axis (node and edge rows
        run image-major).
        """
        images = nn.as_tensor(images)
        fmaps = self.feature_maps(images)
        any_map = next(iter(fmaps.values()))
        h, w = any_map.height, any_map.width
        batch = images.shape[0] if images.ndim == 4 else 1
        if graph is None or (graph.height, graph.width) != (h, w):
            graph = self.graph_for(h, w)
        unary = unary_forward(fmaps[UNARY], self.nets[UNARY].head)
        pairwise = {}
        for rel in self.relation_names:
            edges = batch_edges(graph.edge_sets[rel], graph.num_nodes, batch)
            pairwise[rel] = pairwise_forward(fmaps[rel], edges, self.nets[rel].head, self.num_classes)
        return graph, unary, pairwise

    def tables(self, image) -> tuple[CrfGraph, PotentialTables]:
        """Numpy tables for one [3,H,W] image (no tape)."""
        graph, unary, pairwise = self.forward(image)
        return graph, PotentialTables(unary.data.copy(), {k: v.data.copy() for k, v in pairwise.items()})
