"""CRF graphs over feature-map grids.

One node per feature-map cell (row-major index ``p = row * width + col``) and
one typed edge list per spatial relation.  Two relation kinds exist:

* ``surround``: an ``s x s`` box centred on the node; symmetric, each unordered
  pair stored once with ``p < q``.
* ``above_below``: an ``s x s`` box directly below the node; edges are stored
  oriented ``(upper, lower)``.

The box side is ``s = max(1, round(box_ratio * a))`` with ``a`` the short edge
of the grid, rounding half up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SURROUND = "surround"
ABOVE_BELOW = "above_below"
BOX_KINDS = (SURROUND, ABOVE_BELOW)
DEFAULT_BOX_RATIO = 0.4


@dataclass(frozen=True)
class RelationSpec:
    name: str
    box_kind: str
    box_ratio: float = DEFAULT_BOX_RATIO

    def __post_init__(self):
        if self.box_kind not in BOX_KINDS:
            raise ValueError(f"box_kind must be one of {BOX_KINDS}, got {self.box_kind!r}")
        if not (0.0 < self.box_ratio <= 1.0):
            raise ValueError(f"box_ratio must lie in (0, 1], got {self.box_ratio}")

    @property
    def symmetric(self) -> bool:
        return self.box_kind == SURROUND


def default_relations(box_ratio: float = DEFAULT_BOX_RATIO) -> list[RelationSpec]:
    return [RelationSpec(SURROUND, SURROUND, box_ratio), RelationSpec(ABOVE_BELOW, ABOVE_BELOW, box_ratio)]


def relations_from_names(names: Sequence[str], box_ratio: float = DEFAULT_BOX_RATIO) -> list[RelationSpec]:
    # relation names double as their box kinds in configs
    return [RelationSpec(n, n, box_ratio) for n in names]


def box_side(height: int, width: int, box_ratio: float) -> int:
    a = min(height, width)
    return max(1, int(math.floor(box_ratio * a + 0.5)))


@dataclass(frozen=True)
class CrfGraph:
    height: int
    width: int
    edge_sets: dict[str, np.ndarray] = field(default_factory=dict)
    relations: tuple[RelationSpec, ...] = ()
    num_classes: int | None = None

    @property
    def num_nodes(self) -> int:
        return self.height * self.width

    @property
    def relation_names(self) -> list[str]:
        return list(self.edge_sets)

    def num_edges(self, relation: str | None = None) -> int:
        if relation is not None:
            return len(self.edge_sets[relation])
        return sum(len(e) for e in self.edge_sets.values())

    def row(self, p):
        return np.asarray(p) // self.width

    def col(self, p):
        return np.asarray(p) % self.width


def _surround_edges(h: int, w: int, s: int) -> np.ndarray:
    r = s // 2
    edges = set()
    for row in range(h):
        for col in range(w):
            p = row * w + col
            for dr in range(-r, r + 1):
                for dc in range(-r, r + 1):
                    rr, cc = row + dr, col + dc
                    if (dr or dc) and 0 <= rr < h and 0 <= cc < w:
                        q = rr * w + cc
                        edges.add((min(p, q), max(p, q)))
    return np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)


def _above_below_edges(h: int, w: int, s: int) -> np.ndarray:
    r = s // 2
    edges = []
    for row in range(h):
        for col in range(w):
            p = row * w + col
            for dr in range(1, s + 1):
                for dc in range(-r, r + 1):
                    rr, cc = row + dr, col + dc
                    if rr < h and 0 <= cc < w:
                        edges.append((p, rr * w + cc))
    return np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)


def build_graph(
    height: int, width: int, relations: Sequence[RelationSpec] = (), num_classes: int | None = None
) -> CrfGraph:
    if height < 1 or width < 1:
        raise ValueError(f"grid must be at least 1x1, got {height}x{width}")
    names = [r.name for r in relations]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate relation names in {names}")
    edge_sets = {}
    for rel in relations:
        s = box_side(height, width, rel.box_ratio)
        if rel.box_kind == SURROUND:
            edge_sets[rel.name] = _surround_edges(height, width, s)
        else:
            edge_sets[rel.name] = _above_below_edges(height, width, s)
    return CrfGraph(height, width, edge_sets, tuple(relations), num_classes)


def edge_feature_indices(graph: CrfGraph, relation: str) -> np.ndarray:
    if relation not in graph.edge_sets:
        raise KeyError(f"unknown relation {relation!r}; graph has {graph.relation_names}")
    return graph.edge_sets[relation]


def dump_text(graph: CrfGraph, path: str | Path | None = None) -> str:
    """One edge per line: ``relation p q``."""
    lines = [f"# grid {graph.height} {graph.width}"]
    for name, edges in graph.edge_sets.items():
        lines.extend(f"{name} {p} {q}" for p, q in edges)
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_text(text: str) -> CrfGraph:
    height = width = None
    sets: dict[str, list[tuple[int, int]]] = {}
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            if parts[1:2] == ["grid"]:
                height, width = int(parts[2]), int(parts[3])
            continue
        name, p, q = parts
        sets.setdefault(name, []).append((int(p), int(q)))
    if height is None:
        raise ValueError("missing '# grid H W' header")
    edge_sets = {k: np.array(v, dtype=np.int64).reshape(-1, 2) for k, v in sets.items()}
    rels = tuple(RelationSpec(k, k) for k in edge_sets if k in BOX_KINDS)
    return CrfGraph(height, width, edge_sets, rels)
